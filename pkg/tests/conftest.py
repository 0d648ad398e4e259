import copy

import numpy as np
import pytest

from dynsolve import ba_core, frame_graph, synth
from dynsolve.ba_core import BAProblem, Edge
from dynsolve.geometry import DisparityGrid, Intrinsics, induced_flow, se3_exp

# scene settings shared by the unit and acceptance suites
FORWARD = dict(trajectory="forward", magnitude=0.1, heading=0.2, turn_rate=0.01)
ROTATIONAL = dict(trajectory="rotational", magnitude=0.01)
ORBIT = dict(trajectory="orbit", magnitude=0.02)


def random_problem(rng, n_frames=3, h=4, w=5, optimize_focal=True, noise=0.5, fixed=(0,), w_d=0.0,
                   optimize_disparity=True):
    """Small random BA problem with all ordered pairs as edges."""
    K = Intrinsics.from_focal(rng.uniform(4.0, 8.0), w, h)
    poses = [se3_exp(np.concatenate([rng.normal(scale=0.05, size=3), rng.normal(scale=0.1, size=3)]))
             for _ in range(n_frames)]
    disp = rng.uniform(0.2, 0.8, size=(n_frames, h, w))
    edges = []
    for i in range(n_frames):
        for j in range(n_frames):
            if i == j:
                continue
            rel = poses[j] @ poses[i].inverse()
            uv, valid = induced_flow(rel, DisparityGrid(disp[i]), K)
            target = np.where(valid[..., None], uv, 0.0) + rng.normal(scale=noise, size=(h, w, 2))
            edges.append(Edge(i, j, target, rng.uniform(0.2, 1.0, size=(h, w))))
    prior = disp + rng.normal(scale=0.05, size=disp.shape) if w_d > 0 else None
    return BAProblem(poses, disp, K, edges, prior=prior, w_d=w_d, fixed=frozenset(fixed),
                     optimize_focal=optimize_focal, optimize_disparity=optimize_disparity,
                     focal_norm=max(w, h))


def gt_keyframes(bundle, threshold=frame_graph.KEYFRAME_THRESHOLD_PX):
    """Keyframe selection with the pipeline rule applied to ground truth."""
    d, s = ba_core.normalize_disparity(bundle.disp_low)
    poses = ba_core.scale_translations(bundle.poses, 1.0 / s)
    K = bundle.low_intrinsics
    kfs = [0]
    for c in range(1, len(poses)):
        if frame_graph.should_add_keyframe(c, kfs[-1], poses, d, K, threshold, bundle.spec.lowres_factor):
            kfs.append(c)
    return kfs, poses, d


def keyframe_problem(bundle, kfs, poses, d, **kw):
    """BAProblem over the given keyframes using the pipeline's edge rules and weights."""
    K = bundle.low_intrinsics
    pairs = frame_graph.build_edges(kfs, poses, d, K, frame_graph.WINDOW_RADIUS, frame_graph.PROXIMITY_PX,
                                    bundle.spec.lowres_factor, set(bundle.flows_low))
    loc = {f: n for n, f in enumerate(kfs)}
    edges = []
    for i, j in pairs:
        obs = frame_graph.EdgeObservation.from_flow(bundle.flows_low[(i, j)], bundle.conf_low[(i, j)],
                                                    bundle.motion_low[i])
        edges.append(Edge(loc[i], loc[j], obs.target, obs.weight))
    kw.setdefault("focal_norm", max(K.width, K.height))
    return BAProblem([poses[k] for k in kfs], d[kfs], K, edges, **kw)


@pytest.fixture(scope="session")
def forward_bundle():
    return synth.generate(synth.SceneSpec(n_frames=40, **FORWARD))


@pytest.fixture(scope="session")
def rotational_bundle():
    return synth.generate(synth.SceneSpec(n_frames=40, **ROTATIONAL))


@pytest.fixture(scope="session")
def orbit_bundle():
    return synth.generate(synth.SceneSpec(n_frames=40, **ORBIT))


@pytest.fixture(scope="session")
def forward_frontend(forward_bundle):
    """Forward scene after initialization and frontend tracking (backend not run)."""
    from dynsolve import pipeline
    state, nxt = pipeline.initialize(forward_bundle.to_dataset())
    for f in range(nxt, forward_bundle.spec.n_frames):
        pipeline.frontend_track(state, f)
    return state


@pytest.fixture(scope="session")
def forward_state(forward_frontend):
    from dynsolve import pipeline
    return pipeline.backend_global(copy.deepcopy(forward_frontend))


@pytest.fixture(scope="session")
def rotational_state(rotational_bundle):
    from dynsolve import pipeline
    return pipeline.run(rotational_bundle.to_dataset())
