"""Two-phase camera / low-res depth solver.

Frontend: mono-depth alignment, keyframe initialization with motion-only
BA, then sliding-window BA regularized towards the aligned mono-depth.
Backend: observability analysis of the keyframe Hessian, gated global BA,
non-keyframe registration and a final global BA over all frames.

All optimization runs in normalized units (98th disparity percentile = 2);
``VideoSolveState.export`` converts back to the units of the metric prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import ba_core
from .ba_core import BAProblem, Edge, motion_only_ba, normalize_disparity, lm_iterate
from .errors import DegenerateScale, InsufficientMotion, NoNeighborKeyframe
from .frame_graph import FrameGraph, EdgeObservation, build_edges, mean_flow_distance
from .geometry import RigidTransform, compose, inverse, se3_exp, se3_log
from .io import Dataset
from .uncertainty import ObservabilityReport, depth_reg_weight, focal_gate, observability_report

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    n_init: int = 8
    window: int = 8
    keyframe_threshold_px: float = 16.0
    window_radius: int = 3
    proximity_px: float = 24.0
    w_d_frontend: float = 0.05
    gamma_d: float = 1e-4
    beta_d: float = 0.05
    tau_f: float = 50.0
    focal: float = 0.0               # full-res pixels; 0 = take from the dataset intrinsics
    focal_scale: float = 1.0         # multiplies the initial focal (perturbation studies)
    use_motion_maps: bool = True
    max_iters: int = 50
    cost_tol: float = 1e-12
    registration_iters: int = 30
    lost_rms_px: float = 1.0         # a stalled window only counts as a failure above this weighted RMS residual

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class VideoSolveState:
    data: Dataset
    config: PipelineConfig
    poses: list                      # per frame, normalized units
    keyframe: list                   # per frame bool
    disparities: np.ndarray          # (n, h, w) normalized
    focal: float                     # low-res pixels
    d_align: np.ndarray              # normalized aligned mono-disparity
    motion: np.ndarray
    scale: float                     # disparity normalization factor
    alpha: float = 1.0
    beta: float = 0.0
    graph: FrameGraph = field(default_factory=FrameGraph)
    report: ObservabilityReport | None = None
    registered: list = field(default_factory=list)
    active: list = field(default_factory=list)
    tracking_lost: bool = False
    failures: int = 0
    w_d: float = 0.0
    focal_enabled: bool = False
    log: list = field(default_factory=list)

    @property
    def keyframes(self):
        return [k for k, flag in enumerate(self.keyframe) if flag]

    @property
    def low_intrinsics(self):
        return self.data.low_intrinsics.with_focal(self.focal)

    @property
    def focal_full(self):
        return self.focal * self.data.lowres_factor

    def export(self):
        """Poses, low-res disparities and full-res focal in the prior's metric units."""
        poses = ba_core.scale_translations(self.poses, self.scale)
        return poses, self.disparities / self.scale, self.focal_full


# ---------------------------------------------------------------------------
# mono-depth alignment
# ---------------------------------------------------------------------------

def align_mono_depth(d_rel, d_abs, d_min=ba_core.D_MIN):
    """Median-based global scale/shift mapping relative disparity to metric.

    Returns ``(alpha, beta, d_align)``.
    """
    d_rel = np.asarray(d_rel, dtype=np.float64)
    d_abs = np.asarray(d_abs, dtype=np.float64)
    alphas = []
    for rel, ab in zip(d_rel, d_abs):
        ok = np.isfinite(rel) & np.isfinite(ab)
        cr = rel[ok] - np.median(rel[ok])
        ca = ab[ok] - np.median(ab[ok])
        use = np.abs(cr) > 1e-12 * max(np.abs(rel[ok]).max(), 1e-300)
        if np.any(use):
            alphas.append(np.median(ca[use] / cr[use]))
    if not alphas:
        raise DegenerateScale("relative disparity is constant in every frame")
    alpha = float(np.median(alphas))
    ok = np.isfinite(d_rel) & np.isfinite(d_abs)
    beta = float(np.median(d_abs[ok] - alpha * d_rel[ok]))
    return alpha, beta, np.maximum(alpha * d_rel + beta, d_min)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

def _observation(state, i, j):
    key = (i, j)
    if key not in state.graph.edges:
        data = state.data
        motion = state.motion[i] if state.config.use_motion_maps else None
        obs = EdgeObservation.from_flow(data.flows[key], data.confidences[key], motion)
        state.graph.add_node(i, state.keyframe[i])
        state.graph.add_node(j, state.keyframe[j])
        state.graph.add_edge(i, j, obs)
    return state.graph.edges[key]


def _problem(state, frames, pairs, fixed=(), frozen=(), w_d=0.0, optimize_focal=False,
             optimize_disparity=True):
    local = {f: n for n, f in enumerate(frames)}
    edges = []
    for i, j in pairs:
        obs = _observation(state, i, j)
        edges.append(Edge(local[i], local[j], obs.target, obs.weight))
    K = state.low_intrinsics
    return BAProblem(
        poses=[state.poses[f] for f in frames],
        disparities=state.disparities[frames],
        intrinsics=K, edges=edges,
        prior=state.d_align[frames] if w_d > 0 else None, w_d=w_d,
        fixed=frozenset(local[f] for f in fixed), frozen_disparity=frozenset(local[f] for f in frozen),
        optimize_focal=optimize_focal, optimize_disparity=optimize_disparity,
        focal_norm=max(K.width, K.height),
    )


def _write_back(state, frames, problem, disparities=True):
    for n, f in enumerate(frames):
        state.poses[f] = problem.poses[n]
        if disparities and problem.optimize_disparity:
            state.disparities[f] = problem.disparities[n]
    state.focal = problem.focal


def _available(state):
    return set(state.data.flows)


def _distance(state, i, j):
    return mean_flow_distance(i, j, state.poses, state.disparities, state.low_intrinsics,
                              scale=state.data.lowres_factor)


def _constant_velocity(state, frame):
    prev = [f for f in range(frame) if state.registered[f]]
    if len(prev) < 2:
        return state.poses[prev[-1]] if prev else RigidTransform.identity()
    a, b = prev[-2], prev[-1]
    step = se3_log(compose(state.poses[b], inverse(state.poses[a]))) / (b - a)
    return compose(se3_exp(step * (frame - b)), state.poses[b])


def _track(state, frame, reference):
    """Motion-only estimate of ``frame`` against one reference keyframe."""
    state.poses[frame] = _constant_velocity(state, frame)
    avail = _available(state)
    pairs = [p for p in ((reference, frame), (frame, reference)) if p in avail]
    if not pairs:
        return None
    prob = _problem(state, [reference, frame], pairs, fixed=[reference], optimize_disparity=False)
    res = motion_only_ba(prob, max_iters=state.config.registration_iters, cost_tol=state.config.cost_tol)
    state.poses[frame] = res.problem.poses[1]
    state.registered[frame] = True
    return res


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def prepare(data: Dataset, config: PipelineConfig | None = None) -> VideoSolveState:
    config = config or PipelineConfig()
    alpha, beta, d_align = align_mono_depth(data.disp_rel, data.disp_abs)
    d_norm, s = normalize_disparity(d_align)
    f_full = config.focal if config.focal > 0 else data.intrinsics.fx
    focal = f_full * config.focal_scale / data.lowres_factor
    n = data.n_frames
    motion = data.motion if config.use_motion_maps else np.ones_like(data.motion)
    return VideoSolveState(
        data=data, config=config, poses=[RigidTransform.identity() for _ in range(n)],
        keyframe=[False] * n, disparities=d_norm.copy(), focal=focal, d_align=d_norm,
        motion=motion, scale=s, alpha=alpha, beta=beta, registered=[False] * n,
    )


def initialize(data: Dataset, config: PipelineConfig | None = None) -> tuple[VideoSolveState, int]:
    """Select the first ``n_init`` keyframes and solve their poses with motion-only BA.

    Returns the state and the index of the next unprocessed frame.
    """
    state = prepare(data, config)
    cfg = state.config
    state.keyframe[0] = True
    state.registered[0] = True
    state.graph.add_node(0, True)
    last = 0
    frame = 1
    while frame < data.n_frames and len(state.keyframes) < cfg.n_init:
        if _track(state, frame, last) is not None and _distance(state, last, frame) >= cfg.keyframe_threshold_px:
            state.keyframe[frame] = True
            state.graph.add_node(frame, True)
            last = frame
        frame += 1
    kfs = state.keyframes
    if len(kfs) < cfg.n_init:
        raise InsufficientMotion(f"only {len(kfs)} keyframes with sufficient motion (need {cfg.n_init})")
    pairs = build_edges(kfs, window_radius=cfg.window_radius, proximity_px=None, available=_available(state))
    prob = _problem(state, kfs, pairs, fixed=[kfs[0]], optimize_disparity=False)
    res = motion_only_ba(prob, max_iters=cfg.max_iters, cost_tol=cfg.cost_tol)
    _write_back(state, kfs, res.problem, disparities=False)
    state.active = list(kfs[-cfg.window:])
    state.log.append({"stage": "init", "keyframes": len(kfs), "cost": res.costs[-1]})
    return state, frame


def frontend_track(state: VideoSolveState, frame: int) -> VideoSolveState:
    """Register ``frame``; if it moved enough, add it as keyframe and run windowed BA."""
    cfg = state.config
    last = state.keyframes[-1]
    if _track(state, frame, last) is None:
        return state
    if _distance(state, last, frame) < cfg.keyframe_threshold_px:
        return state
    state.keyframe[frame] = True
    state.graph.add_node(frame, True)
    state.disparities[frame] = state.d_align[frame]
    state.active = (state.active + [frame])[-cfg.window:]
    win = state.active
    pairs = build_edges(win, window_radius=cfg.window_radius, proximity_px=None, available=_available(state))
    prob = _problem(state, win, pairs, fixed=[win[0]], w_d=cfg.w_d_frontend)
    res = lm_iterate(prob, max_iters=cfg.max_iters, cost_tol=cfg.cost_tol)
    _write_back(state, win, res.problem)
    n_obs = sum(float(e.weight.sum()) for e in prob.edges)
    rms = np.sqrt(res.costs[-1] / max(n_obs, 1e-12))
    if res.no_progress and rms > cfg.lost_rms_px:
        state.failures += 1
        if state.failures >= 2:
            state.tracking_lost = True
            log.warning("tracking lost at frame %d", frame)
    else:
        state.failures = 0
    return state


def register_nonkeyframes(state: VideoSolveState) -> VideoSolveState:
    """Motion-only registration of every non-keyframe against its two nearest keyframes."""
    kfs = state.keyframes
    if len(kfs) < 2:
        raise NoNeighborKeyframe("need at least two keyframes to register other frames")
    avail = _available(state)
    for f in range(state.data.n_frames):
        if state.keyframe[f]:
            continue
        near = sorted(kfs, key=lambda k: (abs(k - f), k))[:2]
        a, b = sorted(near)
        alpha = (f - a) / (b - a)
        delta = se3_log(compose(state.poses[b], inverse(state.poses[a])))
        state.poses[f] = compose(se3_exp(alpha * delta), state.poses[a])
        refs = [k for k in (a, b) if (k, f) in avail]
        if not refs:
            raise NoNeighborKeyframe(f"frame {f} has no flow to keyframes {a} and {b}")
        frames = refs + [f]
        pairs = [(k, f) for k in refs]
        prob = _problem(state, frames, pairs, fixed=refs, optimize_disparity=False)
        res = motion_only_ba(prob, max_iters=state.config.registration_iters, cost_tol=state.config.cost_tol)
        state.poses[f] = res.problem.poses[-1]
        state.registered[f] = True
    return state


def backend_global(state: VideoSolveState) -> VideoSolveState:
    cfg = state.config
    avail = _available(state)
    kfs = state.keyframes
    kf_pairs = build_edges(kfs, state.poses, state.disparities, state.low_intrinsics, cfg.window_radius,
                           cfg.proximity_px, scale=state.data.lowres_factor, available=avail)

    # observability of the frontend solution
    prob = _problem(state, kfs, kf_pairs, fixed=[kfs[0]], optimize_focal=True)
    state.report = observability_report(prob, cfg.gamma_d, cfg.beta_d, cfg.tau_f, frames=kfs)
    state.w_d = depth_reg_weight(state.report.median_hd, cfg.gamma_d, cfg.beta_d)
    state.focal_enabled = focal_gate(state.report.focal_h, cfg.tau_f)

    prob = _problem(state, kfs, kf_pairs, fixed=[kfs[0]], w_d=state.w_d, optimize_focal=state.focal_enabled)
    res = lm_iterate(prob, max_iters=cfg.max_iters, cost_tol=cfg.cost_tol)
    _write_back(state, kfs, res.problem)

    register_nonkeyframes(state)

    frames = list(range(state.data.n_frames))
    for f in frames:
        if not state.keyframe[f]:
            state.disparities[f] = state.d_align[f]
    all_pairs = build_edges(frames, window_radius=cfg.window_radius, proximity_px=None, available=avail)
    prob = _problem(state, frames, all_pairs, fixed=[kfs[0]], w_d=state.w_d, optimize_focal=state.focal_enabled)
    res = lm_iterate(prob, max_iters=cfg.max_iters, cost_tol=cfg.cost_tol)
    _write_back(state, frames, res.problem)
    state.log.append({"stage": "backend", "w_d": state.w_d, "focal_enabled": state.focal_enabled,
                      "cost": res.costs[-1]})
    return state


def run(data: Dataset, config: PipelineConfig | None = None) -> VideoSolveState:
    state, frame = initialize(data, config)
    for f in range(frame, data.n_frames):
        frontend_track(state, f)
    return backend_global(state)
