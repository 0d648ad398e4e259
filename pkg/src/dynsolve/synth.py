"""Synthetic dynamic scenes with exact ground truth.

The static background is a star-shaped closed surface around the world origin
(radius modulated by a few random low-frequency waves), so every trajectory
family sees geometry in every viewing direction.  Movers are boxes with
constant angular and linear velocity.  Depth is obtained by ray casting
(nearest hit wins) and flows by transporting the hit point through the
ground-truth camera (and mover) motion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SpecInfeasible
from .geometry import Intrinsics, RigidTransform, pixel_grid, project, so3_exp_matrix
from .io import Dataset, LOWRES_FACTOR

TRAJECTORIES = ("static", "rotational", "forward", "orbit", "lateral")
FLOW_RANGE_PX = (0.5, 64.0)
CVD_OFFSETS = (1, 2, 4, 8, 15)


@dataclass
class Mover:
    center: tuple = (0.0, 0.0, 3.0)
    half_extent: tuple = (0.5, 0.5, 0.5)
    angular_velocity: tuple = (0.0, 0.0, 0.0)   # rad / frame, world frame, about the box centre
    linear_velocity: tuple = (0.05, 0.0, 0.0)   # scene units / frame


@dataclass
class SceneSpec:
    seed: int = 0
    trajectory: str = "forward"
    n_frames: int = 40
    width: int = 512
    height: int = 384
    focal: float = 400.0
    magnitude: float = 0.05
    heading: float = 0.0
    turn_rate: float = 0.0
    orbit_radius: float = 1.0
    base_depth: float = 4.0
    amplitude: float = 0.15
    smoothness: float = 2.0
    n_waves: int = 6
    movers: list = field(default_factory=list)
    flow_sigma: float = 0.0
    mono_a: float = 1.0
    mono_b: float = 0.0
    mono_sigma: float = 0.0
    abs_sigma: float = 0.0
    frame_a_range: tuple = (1.0, 1.0)
    frame_b_range: tuple = (0.0, 0.0)
    mover_confidence: float = 1.0
    max_gap: int = 12
    lowres_factor: int = LOWRES_FACTOR
    full_resolution: bool = False
    enforce_flow_range: bool = False

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.base_depth * (1 - self.amplitude) <= 0:
            raise ValueError("background depth must stay positive")
        self.movers = [m if isinstance(m, Mover) else Mover(**m) for m in self.movers]


@dataclass
class SceneBundle:
    spec: SceneSpec
    intrinsics: Intrinsics
    low_intrinsics: Intrinsics
    poses: list
    disp_low: np.ndarray
    mover_low: np.ndarray
    flows_low: dict
    conf_low: dict
    disp_rel_low: np.ndarray
    disp_abs_low: np.ndarray
    frame_affine: np.ndarray
    disp_full: np.ndarray | None = None
    mover_full: np.ndarray | None = None
    flows_full: dict = field(default_factory=dict)
    disp_rel_full: np.ndarray | None = None
    disp_abs_full: np.ndarray | None = None

    @property
    def motion_low(self):
        """Static-probability maps (1 = static)."""
        return (~self.mover_low).astype(np.float64)

    @property
    def motion_full(self):
        return None if self.mover_full is None else (~self.mover_full).astype(np.float64)

    @property
    def edges(self):
        return sorted(self.flows_low)

    def to_dataset(self) -> Dataset:
        return Dataset(
            intrinsics=self.intrinsics, n_frames=self.spec.n_frames, edges=self.edges,
            disp_rel=self.disp_rel_low, disp_abs=self.disp_abs_low, motion=self.motion_low,
            flows={e: self.flows_low[e] for e in self.edges},
            confidences={e: self.conf_low[e] for e in self.edges},
            lowres_factor=self.spec.lowres_factor, poses_gt=list(self.poses),
            full_edges=sorted(self.flows_full), full_flows=dict(self.flows_full),
            full_disp_rel=self.disp_rel_full, full_disp_abs=self.disp_abs_full,
            full_motion=self.motion_full,
        )


# ---------------------------------------------------------------------------
# deterministic randomness: Philox keyed by (seed, frame/pair, stream)
# ---------------------------------------------------------------------------

_STREAM_SCENE, _STREAM_FLOW, _STREAM_REL, _STREAM_ABS, _STREAM_AFFINE = range(5)


def _rng(seed, slot, stream):
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (slot << 8) | stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _pair_slot(i, j):
    return 1 + i * 100003 + j


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def _yaw(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _from_camera_to_world(R_c2w, center):
    R = R_c2w.T
    return RigidTransform.from_rt(R, -R @ np.asarray(center, dtype=np.float64))


def trajectory_family(kind, n_frames, magnitude, heading=0.0, orbit_radius=1.0, turn_rate=0.0):
    """World-to-camera poses for one of the synthetic camera paths.

    ``magnitude`` is the per-frame step: an angle (radians) for rotational and
    orbit paths, a distance otherwise.  ``heading`` yaws the forward camera
    away from its direction of travel (moves the epipole off-centre) and
    ``turn_rate`` bends the path: both the travel direction and the camera
    yaw advance by ``turn_rate`` per frame.  Forward and lateral paths are
    centred on the origin so the camera stays well inside the background.
    """
    if kind not in TRAJECTORIES:
        raise ValueError(f"unknown trajectory {kind!r}")
    if kind != "static" and not magnitude > 0:
        raise ValueError("magnitude must be positive for moving trajectories")
    poses = []
    start = -0.5 * (n_frames - 1) * magnitude
    center = np.array([0.0, 0.0, start])
    for k in range(n_frames):
        if kind == "static":
            poses.append(RigidTransform.identity())
        elif kind == "rotational":
            poses.append(_from_camera_to_world(_yaw(k * magnitude), np.zeros(3)))
        elif kind == "forward":
            poses.append(_from_camera_to_world(_yaw(heading + k * turn_rate), center.copy()))
            a = k * turn_rate
            center = center + magnitude * np.array([np.sin(a), 0.0, np.cos(a)])
        elif kind == "lateral":
            poses.append(_from_camera_to_world(np.eye(3), [start + k * magnitude, 0.0, 0.0]))
        else:
            phi = k * magnitude
            c = [orbit_radius * np.sin(phi), 0.0, -orbit_radius * np.cos(phi)]
            poses.append(_from_camera_to_world(_yaw(-phi), c))
    return poses


# ---------------------------------------------------------------------------
# scene geometry
# ---------------------------------------------------------------------------

class _Background:
    def __init__(self, spec: SceneSpec):
        rng = _rng(spec.seed, 0, _STREAM_SCENE)
        dirs = rng.normal(size=(spec.n_waves, 3))
        self.freq = spec.smoothness * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        self.phase = rng.uniform(0, 2 * np.pi, size=spec.n_waves)
        w = rng.uniform(0.5, 1.0, size=spec.n_waves)
        self.weight = w / w.sum()
        self.base = spec.base_depth
        self.amp = spec.amplitude

    def radius(self, unit_dirs):
        waves = np.sin(unit_dirs @ self.freq.T + self.phase) @ self.weight
        return self.base * (1.0 + self.amp * waves)

    def intersect(self, origin, dirs, iters=80):
        """Ray parameter where |o + s d| meets the surface (origin strictly inside)."""
        lo = np.zeros(dirs.shape[:-1])
        hi = np.full(dirs.shape[:-1], 2.0 * self.base * (1 + self.amp) + 2.0 * np.linalg.norm(origin))
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            p = origin + mid[..., None] * dirs
            r = np.linalg.norm(p, axis=-1)
            outside = r > self.radius(p / r[..., None])
            hi = np.where(outside, mid, hi)
            lo = np.where(outside, lo, mid)
        return 0.5 * (lo + hi)


def _mover_pose(m: Mover, k):
    R = so3_exp_matrix(k * np.asarray(m.angular_velocity, dtype=np.float64))
    t = np.asarray(m.center, dtype=np.float64) + k * np.asarray(m.linear_velocity, dtype=np.float64)
    return R, t


def _ray_box(origin, dirs, half):
    """Slab test in the box frame; returns hit parameter (inf where missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def _render(spec, bg, pose: RigidTransform, K: Intrinsics, k):
    """Depth (z in camera), world hit points and mover index (-1 = background)."""
    R_c2w = pose.rotation.T
    center = -R_c2w @ pose.translation
    pix = pixel_grid(K.height, K.width)
    rays_cam = np.stack([(pix[..., 0] - K.cx) / K.fx, (pix[..., 1] - K.cy) / K.fy,
                         np.ones((K.height, K.width))], axis=-1)
    dirs = rays_cam @ R_c2w.T
    s = bg.intersect(center, dirs)
    owner = np.full(s.shape, -1, dtype=np.int64)
    for idx, m in enumerate(spec.movers):
        R, t = _mover_pose(m, k)
        o_b = R.T @ (center - t)
        d_b = dirs @ R
        sb = _ray_box(o_b, d_b, np.asarray(m.half_extent, dtype=np.float64))
        closer = sb < s
        s = np.where(closer, sb, s)
        owner[closer] = idx
    # rays_cam has unit z, so the ray parameter is the camera depth
    return s, center + s[..., None] * dirs, owner


def _flows_for_level(spec, poses, K, depth, world, owner, pairs):
    """Target displacement fields (i -> j) and their validity for the requested pairs."""
    flows, valid = {}, {}
    for i, j in pairs:
        Xw = world[i]
        moved = Xw.copy()
        for idx, m in enumerate(spec.movers):
            sel = owner[i] == idx
            if not np.any(sel):
                continue
            Ri, ti = _mover_pose(m, i)
            Rj, tj = _mover_pose(m, j)
            body = (Xw[sel] - ti) @ Ri
            moved[sel] = body @ Rj.T + tj
        uv, ok = project(poses[j].apply(moved), K)
        # reproject the source too so identical poses give exactly zero flow
        src, _ = project(poses[i].apply(Xw), K)
        flows[(i, j)] = np.where(ok[..., None], uv - src, 0.0)
        valid[(i, j)] = ok
    return flows, valid


def _level(spec, bg, poses, K):
    depth, world, owner = [], [], []
    for k, T in enumerate(poses):
        d, w, o = _render(spec, bg, T, K, k)
        depth.append(d)
        world.append(w)
        owner.append(o)
    return np.stack(depth), np.stack(world), np.stack(owner)


def low_res_pairs(n_frames, max_gap):
    return [(i, j) for i in range(n_frames) for j in range(n_frames) if i != j and abs(i - j) <= max_gap]


def cvd_pairs(n_frames, offsets=CVD_OFFSETS):
    return [(i, i + k) for k in offsets for i in range(n_frames) if i + k < n_frames]


def generate(spec: SceneSpec) -> SceneBundle:
    """Render a deterministic scene bundle for ``spec``."""
    K = Intrinsics.from_focal(spec.focal, spec.width, spec.height)
    Kl = K.scaled(spec.lowres_factor)
    poses = trajectory_family(spec.trajectory, spec.n_frames, spec.magnitude if spec.trajectory != "static" else 1.0,
                              spec.heading, spec.orbit_radius, spec.turn_rate)
    bg = _Background(spec)
    n = spec.n_frames

    depth, world, owner = _level(spec, bg, poses, Kl)
    disp_low = 1.0 / depth
    mover_low = owner >= 0
    pairs = low_res_pairs(n, spec.max_gap)
    clean, clean_ok = _flows_for_level(spec, poses, Kl, depth, world, owner, pairs)

    if spec.enforce_flow_range:
        lo, hi = FLOW_RANGE_PX
        for i in range(n - 1):
            mag = np.linalg.norm(clean[(i, i + 1)], axis=-1).mean() * spec.lowres_factor
            if not lo <= mag <= hi:
                raise SpecInfeasible(f"mean flow between frames {i} and {i + 1} is {mag:.3f} px "
                                     f"(allowed {lo}-{hi} px at full resolution)")

    flows, conf = {}, {}
    for (i, j), f in clean.items():
        if spec.flow_sigma > 0:
            noise = _rng(spec.seed, _pair_slot(i, j), _STREAM_FLOW).normal(0.0, spec.flow_sigma, size=f.shape)
            c = np.exp(-np.linalg.norm(noise, axis=-1) / spec.flow_sigma)
        else:
            noise = np.zeros_like(f)
            c = np.ones(f.shape[:2])
        c = np.where(mover_low[i], spec.mover_confidence, c)
        c = np.where(clean_ok[(i, j)], c, 0.0)
        flows[(i, j)] = f + noise
        conf[(i, j)] = c

    affine = np.ones((n, 2))
    affine[:, 1] = 0.0
    for k in range(n):
        r = _rng(spec.seed, k + 1, _STREAM_AFFINE)
        affine[k] = [r.uniform(*spec.frame_a_range), r.uniform(*spec.frame_b_range)]

    def priors(disp, tag):
        rel, ab = [], []
        for k in range(n):
            shape = disp[k].shape
            nr = _rng(spec.seed, (k + 1) * 4 + tag, _STREAM_REL).normal(0.0, 1.0, size=shape)
            na = _rng(spec.seed, (k + 1) * 4 + tag, _STREAM_ABS).normal(0.0, 1.0, size=shape)
            a, b = affine[k]
            corrupted = a * disp[k] + b
            rel.append(spec.mono_a * corrupted + spec.mono_b + spec.mono_sigma * nr)
            ab.append(disp[k] + spec.abs_sigma * na)
        return np.stack(rel), np.stack(ab)

    rel_low, abs_low = priors(disp_low, 0)
    bundle = SceneBundle(spec, K, Kl, poses, disp_low, mover_low, flows, conf, rel_low, abs_low, affine)

    if spec.full_resolution:
        depth_f, world_f, owner_f = _level(spec, bg, poses, K)
        bundle.disp_full = 1.0 / depth_f
        bundle.mover_full = owner_f >= 0
        bundle.flows_full, _ = _flows_for_level(spec, poses, K, depth_f, world_f, owner_f, cvd_pairs(n))
        if spec.flow_sigma > 0:
            for (i, j), f in bundle.flows_full.items():
                noise = _rng(spec.seed, _pair_slot(i, j) + 7, _STREAM_FLOW).normal(0.0, spec.flow_sigma, f.shape)
                bundle.flows_full[(i, j)] = f + noise
        bundle.disp_rel_full, bundle.disp_abs_full = priors(bundle.disp_full, 1)
    return bundle


def spec_with(spec: SceneSpec, **changes):
    return replace(spec, **changes)


def flow_distance_matrix(bundle: SceneBundle):
    """Mean ego-motion induced flow magnitude (low-res px) between every frame pair."""
    from .frame_graph import mean_flow_distance

    n = bundle.spec.n_frames
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = mean_flow_distance(i, j, bundle.poses, bundle.disp_low, bundle.low_intrinsics)
    return D


def sample_pairs(distance, rng, low=FLOW_RANGE_PX[0], high=FLOW_RANGE_PX[1], count=1):
    """Draw frame pairs whose mean flow lies in [low, high]."""
    cand = np.argwhere((distance >= low) & (distance <= high))
    if len(cand) == 0:
        raise SpecInfeasible("no frame pair inside the requested flow range")
    return [tuple(int(x) for x in cand[k]) for k in rng.integers(0, len(cand), size=count)]
