"""Consistent video depth: first-order refinement of full-resolution disparity.

Cameras and focal are fixed.  The state is a disparity map and an aleatoric
uncertainty map per frame.  The uncertainty ``M`` is the scale of a Laplacian
noise model, so every data term contributes ``residual / M + log M`` per
pixel: large residuals (moving objects) drive ``M`` up and their weight down.

All losses return analytic gradients.  ``total_objective`` evaluates the
weighted sum over all pairs and frames in a vectorized form.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch
from .geometry import Intrinsics, RigidTransform, Z_MIN, pixel_grid, relative_pose

log = logging.getLogger(__name__)

PAIR_OFFSETS = (1, 2, 4, 8, 15)
M_FLOOR = 1e-3
M_CEIL = 1e3
D_MIN = 1e-4
_NORMAL_EPS = 1e-12
# residuals this small count as sitting on the L1 / ratio kink (subgradient 0)
KINK_TOL = 1e-9


@dataclass
class CVDConfig:
    w_flow: float = 1.0
    w_temp: float = 0.2
    w_prior: float = 1.0
    w_grad: float = 1.0
    w_normal: float = 4.0
    beta_grad: float = 5.0
    n_scales: int = 4
    pair_offsets: tuple = PAIR_OFFSETS
    warmup_steps: int = 100
    main_steps: int = 400
    lr_warmup: float = 1e-2         # scale / shift / uncertainty
    lr_disparity: float = 5e-3      # log-disparity in the main phase
    lr_uncertainty: float = 1e-2    # log-uncertainty, both phases
    lr_final_fraction: float = 0.1  # main-phase step sizes decay linearly to this fraction
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    m_floor: float = M_FLOOR
    m_ceil: float = M_CEIL

    def __post_init__(self):
        for name in ("w_flow", "w_temp", "w_prior", "w_grad", "w_normal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.pair_offsets = tuple(int(k) for k in self.pair_offsets)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class DepthState:
    disparity: np.ndarray           # (n, H, W)
    uncertainty: np.ndarray         # (n, H, W), in [m_floor, m_ceil]
    scale: np.ndarray = None
    shift: np.ndarray = None

    def __post_init__(self):
        n = len(self.disparity)
        if self.uncertainty.shape != self.disparity.shape:
            raise ShapeMismatch("uncertainty and disparity rasters differ in shape")
        if self.scale is None:
            self.scale = np.ones(n)
        if self.shift is None:
            self.shift = np.zeros(n)

    def copy(self):
        return DepthState(self.disparity.copy(), self.uncertainty.copy(), self.scale.copy(), self.shift.copy())

    def effective(self):
        return self.scale[:, None, None] * self.disparity + self.shift[:, None, None]


@dataclass
class CVDData:
    poses: list
    intrinsics: Intrinsics
    flows: dict                     # (i, j) -> (H, W, 2) displacement, full resolution
    d_align: np.ndarray             # (n, H, W)
    gt_motion: np.ndarray | None = None


@dataclass
class CVDResult:
    state: DepthState
    trace: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "phase", "total", "flow", "temp", "si", "grad", "normal"])
            for t in self.trace:
                w.writerow([t["step"], t["phase"]] + [repr(float(t[k])) for k in
                                                      ("total", "flow", "temp", "si", "grad", "normal")])


def select_pairs(n_frames, offsets=PAIR_OFFSETS):
    if n_frames < 2:
        raise ValueError("need at least two frames")
    return [(i, i + k) for k in offsets for i in range(n_frames) if i + k < n_frames]


def init_uncertainty(shape, motion=None, m_floor=M_FLOOR):
    """M from static-probability maps: static (m = 1) -> m_floor, moving (m = 0) -> 1.

    Without maps every pixel starts at 1.
    """
    if motion is None:
        return np.ones(shape)
    m = np.clip(np.asarray(motion, dtype=np.float64), 0.0, 1.0)
    return m_floor + (1.0 - m) * (1.0 - m_floor)


def ratio_delta(a, b):
    """max(a/b, b/a)."""
    return np.maximum(a / b, b / a)


def _rays(K: Intrinsics, shape):
    h, w = shape
    pix = pixel_grid(h, w)
    return np.stack([(pix[..., 0] - K.cx) / K.fx, (pix[..., 1] - K.cy) / K.fy, np.ones((h, w))], axis=-1)


# ---------------------------------------------------------------------------
# data terms (batched over an optional leading pair axis)
# ---------------------------------------------------------------------------

def _transform(E, rq, t):
    """Camera-j points Y = R q / E + t and dY/dE."""
    Es = np.where(E > 0, E, 1.0)
    Y = rq / Es[..., None] + t[..., None, None, :]
    dY = -rq / (Es ** 2)[..., None]
    return Y, dY, E > 0


def _flow_terms(E, M, rq, t, target, K):
    Y, dY, ok = _transform(E, rq, t)
    z = Y[..., 2]
    valid = ok & (z > Z_MIN) & np.all(np.isfinite(target), axis=-1)
    zs = np.where(valid, z, 1.0)
    u = K.fx * Y[..., 0] / zs + K.cx
    v = K.fy * Y[..., 1] / zs + K.cy
    ru = np.where(valid, u - np.nan_to_num(target[..., 0]), 0.0)
    rv = np.where(valid, v - np.nan_to_num(target[..., 1]), 0.0)
    l1 = np.abs(ru) + np.abs(rv)
    loss_px = np.where(valid, l1 / M + np.log(M), 0.0)
    du = K.fx * (dY[..., 0] * zs - Y[..., 0] * dY[..., 2]) / zs ** 2
    dv = K.fy * (dY[..., 1] * zs - Y[..., 1] * dY[..., 2]) / zs ** 2
    su = np.where(np.abs(ru) > KINK_TOL, np.sign(ru), 0.0)
    sv = np.where(np.abs(rv) > KINK_TOL, np.sign(rv), 0.0)
    gE = np.where(valid, (su * du + sv * dv) / M, 0.0)
    gM = np.where(valid, -l1 / M ** 2 + 1.0 / M, 0.0)
    return loss_px, gE, gM, valid


def _pair_geometry(pose_i: RigidTransform, pose_j: RigidTransform, rays):
    rel = relative_pose(pose_i, pose_j)
    return rays @ rel.rotation.T, rel.translation


def flow_loss(d_i, m_i, flow, pose_i, pose_j, K):
    """Uncertainty-weighted L1 flow reprojection loss for one pair.

    Returns ``(loss, grad_d_i, grad_m_i)``.
    """
    shape = d_i.shape
    rq, t = _pair_geometry(pose_i, pose_j, _rays(K, shape))
    target = pixel_grid(*shape) + flow
    loss_px, gE, gM, _ = _flow_terms(np.asarray(d_i, float), np.asarray(m_i, float), rq, t, target, K)
    return float(loss_px.sum()), gE, gM


class _Sampler:
    """Fixed bilinear stencil: samples at ``coords`` (..., 2) of an (H, W) raster."""

    def __init__(self, coords, shape):
        h, w = shape
        x, y = coords[..., 0], coords[..., 1]
        self.inside = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
        xs = np.where(self.inside, x, 0.0)
        ys = np.where(self.inside, y, 0.0)
        x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2 if w > 1 else 0)
        y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2 if h > 1 else 0)
        fx, fy = xs - x0, ys - y0
        x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
        self.idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
        self.wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
        self.wts *= self.inside[..., None]

    def sample(self, flat):
        """``flat`` is (..., H*W) matching the leading axes of the stencil."""
        lead = self.idx.shape[:-3]
        if lead:
            vals = np.take_along_axis(flat.reshape(lead + (-1,)), self.idx.reshape(lead + (-1,)), axis=-1)
            vals = vals.reshape(self.idx.shape)
        else:
            vals = flat.ravel()[self.idx]
        return np.sum(vals * self.wts, axis=-1)


def _temp_terms(E, M, rq, t, Ds):
    Y, dY, ok = _transform(E, rq, t)
    pz = Y[..., 2]
    valid = ok & (pz > Z_MIN) & (Ds > 0)
    pzs = np.where(valid, pz, 1.0)
    zh = 1.0 / np.where(valid, Ds, 1.0)
    delta = ratio_delta(pzs, zh)
    loss_px = np.where(valid, delta / M + np.log(M), 0.0)
    above = pzs - zh > KINK_TOL * zh
    below = zh - pzs > KINK_TOL * zh
    d_pz = np.where(above, 1.0 / zh, np.where(below, -zh / pzs ** 2, 0.0))
    d_zh = np.where(above, -pzs / zh ** 2, np.where(below, 1.0 / pzs, 0.0))
    gE = np.where(valid, d_pz * dY[..., 2] / M, 0.0)
    # zh = 1 / Ds
    gDs = np.where(valid, d_zh * (-(zh ** 2)) / M, 0.0)
    gM = np.where(valid, -delta / M ** 2 + 1.0 / M, 0.0)
    return loss_px, gE, gDs, gM, valid


def temp_loss(d_i, d_j, m_i, flow, pose_i, pose_j, K):
    """Uncertainty-weighted depth-ratio consistency between frame i and frame j.

    Compares the depth of each frame-i point seen from camera j with the depth
    read from frame j's disparity at the flow target.  Returns
    ``(loss, grad_d_i, grad_d_j, grad_m_i)``.
    """
    shape = d_i.shape
    rq, t = _pair_geometry(pose_i, pose_j, _rays(K, shape))
    sampler = _Sampler(pixel_grid(*shape) + flow, shape)
    d_j = np.asarray(d_j, float)
    Ds = sampler.sample(d_j)
    loss_px, gE, gDs, gM, _ = _temp_terms(np.asarray(d_i, float), np.asarray(m_i, float), rq, t, Ds)
    g_j = np.bincount(sampler.idx.ravel(), weights=(sampler.wts * gDs[..., None]).ravel(),
                      minlength=d_j.size).reshape(shape)
    return float(loss_px.sum()), gE, g_j, gM


# ---------------------------------------------------------------------------
# prior terms (per frame, batched over a leading frame axis)
# ---------------------------------------------------------------------------

def _log_ratio(d, d_align):
    ok = (d > 0) & (d_align > 0) & np.isfinite(d) & np.isfinite(d_align)
    R = np.where(ok, np.log(np.where(ok, d, 1.0)) - np.log(np.where(ok, d_align, 1.0)), 0.0)
    return R, ok


def prior_si_loss(d, d_align):
    """Scale-invariant log-disparity loss: variance of R = log d - log d_align."""
    d = np.asarray(d, float)
    R, ok = _log_ratio(d, d_align)
    axes = tuple(range(d.ndim - 2, d.ndim))
    n = np.maximum(ok.sum(axis=axes, keepdims=True), 1)
    s = R.sum(axis=axes, keepdims=True)
    loss = (R ** 2).sum(axis=axes, keepdims=True) / n - (s / n) ** 2
    gR = np.where(ok, 2.0 * (R - s / n) / n, 0.0)
    return float(loss.sum()), gR / np.where(ok, d, 1.0)


def _pool(x):
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _unpool(g, shape):
    """Adjoint of ``_pool`` for a raster of ``shape``."""
    out = np.zeros(shape)
    h, w = g.shape[-2] * 2, g.shape[-1] * 2
    q = 0.25 * g
    for dy in (0, 1):
        for dx in (0, 1):
            out[..., dy:h:2, dx:w:2] = q
    return out


def prior_grad_loss(d, d_align, n_scales=4, beta=5.0):
    """Gated multi-scale L1 matching of log-ratio gradients.

    At every scale (2x average pooling of R) with forward differences
    gx, gy on the interior region, each pixel contributes a * (1 - exp(-beta a))
    with a = |gx| + |gy|; the per-scale mean is summed over scales.
    """
    d = np.asarray(d, float)
    R, ok = _log_ratio(d, d_align)
    levels = [R]
    for _ in range(n_scales - 1):
        if min(levels[-1].shape[-2:]) < 4:
            raise ShapeMismatch("raster too small for the requested number of scales")
        levels.append(_pool(levels[-1]))
    total = 0.0
    grads = [None] * n_scales
    for s, Rs in enumerate(levels):
        gx = Rs[..., :-1, 1:] - Rs[..., :-1, :-1]
        gy = Rs[..., 1:, :-1] - Rs[..., :-1, :-1]
        a = np.abs(gx) + np.abs(gy)
        e = np.exp(-beta * a)
        n = a.shape[-1] * a.shape[-2]
        total += float(np.sum(a * (1.0 - e)) / n)
        da = (1.0 - e + beta * a * e) / n
        cx, cy = da * np.sign(gx), da * np.sign(gy)
        g = np.zeros_like(Rs)
        g[..., :-1, 1:] += cx
        g[..., :-1, :-1] -= cx + cy
        g[..., 1:, :-1] += cy
        grads[s] = g
    for s in range(n_scales - 1, 0, -1):
        grads[s - 1] = grads[s - 1] + _unpool(grads[s], levels[s - 1].shape)
    gR = np.where(ok, grads[0], 0.0)
    return total, gR / np.where(ok, d, 1.0)


def _normals(d, rays):
    ds = np.where(d > 0, d, 1.0)
    P = rays / ds[..., None]
    tx = P[..., :-1, 1:, :] - P[..., :-1, :-1, :]
    ty = P[..., 1:, :-1, :] - P[..., :-1, :-1, :]
    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)
    ok = (norm > _NORMAL_EPS) & (d[..., :-1, :-1] > 0) & (d[..., :-1, 1:] > 0) & (d[..., 1:, :-1] > 0)
    N = n / np.where(ok, norm, 1.0)[..., None]
    return N, n, norm, tx, ty, ok


def prior_normal_loss(d, d_align, K):
    """Sum over pixels of 1 - N(d) . N(d_align), normals from backprojected tangents."""
    d = np.asarray(d, float)
    rays = _rays(K, d.shape[-2:])
    N, n, norm, tx, ty, ok = _normals(d, rays)
    Na, _, _, _, _, ok_a = _normals(np.asarray(d_align, float), rays)
    valid = ok & ok_a
    # 1 - N.Na written as |N - Na|^2 / 2 so identical normals give exactly zero
    diff = N - Na
    loss = float(np.sum(np.where(valid, 0.5 * np.sum(diff * diff, axis=-1), 0.0)))
    gN = np.where(valid[..., None], diff, 0.0)
    normsafe = np.where(valid, norm, 1.0)[..., None]
    gn = (gN - N * np.sum(gN * N, axis=-1, keepdims=True)) / normsafe
    g_tx = np.cross(ty, gn)
    g_ty = np.cross(gn, tx)
    gP = np.zeros(d.shape + (3,))
    gP[..., :-1, 1:, :] += g_tx
    gP[..., :-1, :-1, :] -= g_tx + g_ty
    gP[..., 1:, :-1, :] += g_ty
    ds = np.where(d > 0, d, 1.0)
    gd = np.where(d > 0, np.sum(gP * (-rays / (ds ** 2)[..., None]), axis=-1), 0.0)
    return loss, gd


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

class PairCache:
    """Pair geometry and sampling stencils; fixed because cameras and flows are."""

    def __init__(self, data: CVDData, pairs):
        n, h, w = data.d_align.shape
        self.shape = (h, w)
        self.rays = _rays(data.intrinsics, (h, w))
        self.pairs = [p for p in pairs if p in data.flows]
        missing = [p for p in pairs if p not in data.flows]
        if missing:
            log.warning("no flow for %d pairs, skipped", len(missing))
        self.i = np.array([p[0] for p in self.pairs], dtype=np.int64)
        self.j = np.array([p[1] for p in self.pairs], dtype=np.int64)
        rq, ts, targets = [], [], []
        grid = pixel_grid(h, w)
        for i, j in self.pairs:
            a, b = _pair_geometry(data.poses[i], data.poses[j], self.rays)
            rq.append(a)
            ts.append(b)
            targets.append(grid + data.flows[(i, j)])
        self.rq = np.array(rq).reshape(-1, h, w, 3)
        self.t = np.array(ts).reshape(-1, 3)
        self.target = np.array(targets).reshape(-1, h, w, 2)
        self.sampler = _Sampler(self.target, (h, w))


def total_objective(E, M, config: CVDConfig, data: CVDData, cache: PairCache):
    """Weighted CVD objective and its gradients w.r.t. effective disparity and M.

    Returns ``(total, grad_E, grad_M, parts)`` with ``parts`` the unweighted
    sub-losses.
    """
    K = data.intrinsics
    n, h, w = E.shape
    gE = np.zeros_like(E)
    gM = np.zeros_like(M)
    parts = {"flow": 0.0, "temp": 0.0, "si": 0.0, "grad": 0.0, "normal": 0.0}
    if len(cache.pairs) and (config.w_flow > 0 or config.w_temp > 0):
        Ei, Mi = E[cache.i], M[cache.i]
        if config.w_flow > 0:
            lp, ge, gm, _ = _flow_terms(Ei, Mi, cache.rq, cache.t, cache.target, K)
            parts["flow"] = float(lp.sum())
            np.add.at(gE, cache.i, config.w_flow * ge)
            np.add.at(gM, cache.i, config.w_flow * gm)
        if config.w_temp > 0:
            Ds = cache.sampler.sample(E[cache.j].reshape(len(cache.pairs), -1))
            lp, ge, gds, gm, _ = _temp_terms(Ei, Mi, cache.rq, cache.t, Ds)
            parts["temp"] = float(lp.sum())
            np.add.at(gE, cache.i, config.w_temp * ge)
            np.add.at(gM, cache.i, config.w_temp * gm)
            flat = (cache.j[:, None, None, None] * (h * w) + cache.sampler.idx).ravel()
            contrib = (cache.sampler.wts * gds[..., None]).ravel()
            gE += config.w_temp * np.bincount(flat, weights=contrib, minlength=E.size).reshape(E.shape)
    if config.w_prior > 0:
        l_si, g_si = prior_si_loss(E, data.d_align)
        parts["si"] = l_si
        gE += config.w_prior * g_si
        if config.w_grad > 0:
            l_g, g_g = prior_grad_loss(E, data.d_align, config.n_scales, config.beta_grad)
            parts["grad"] = l_g
            gE += config.w_prior * config.w_grad * g_g
        if config.w_normal > 0:
            l_n, g_n = prior_normal_loss(E, data.d_align, K)
            parts["normal"] = l_n
            gE += config.w_prior * config.w_normal * g_n
    total = (config.w_flow * parts["flow"] + config.w_temp * parts["temp"]
             + config.w_prior * (parts["si"] + config.w_grad * parts["grad"] + config.w_normal * parts["normal"]))
    return total, gE, gM, parts


class _Adam:
    def __init__(self, shape, lr, b1, b2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, x, g, lr=None):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - (self.lr if lr is None else lr) * mh / (np.sqrt(vh) + self.eps)


def optimize(initial: DepthState, config: CVDConfig, data: CVDData, callback=None) -> CVDResult:
    """Two-phase Adam optimization: warm-up on scale/shift/uncertainty, then disparity."""
    state = initial.copy()
    n = len(state.disparity)
    if data.d_align.shape != state.disparity.shape:
        raise ShapeMismatch("d_align must match the disparity rasters")
    cache = PairCache(data, select_pairs(n, config.pair_offsets))
    result = CVDResult(state)
    ab = (config.adam_beta1, config.adam_beta2, config.adam_eps)
    logM = np.log(np.clip(state.uncertainty, config.m_floor, config.m_ceil))
    lo, hi = np.log(config.m_floor), np.log(config.m_ceil)

    def record(step, phase, total, parts):
        if not np.isfinite(total):
            result.trace.append({"step": step, "phase": phase, "total": total, **parts})
            raise NonFiniteLoss(f"non-finite loss at step {step} ({phase})", result.trace)
        result.trace.append({"step": step, "phase": phase, "total": total, **parts})
        if callback is not None:
            callback(step, phase, total)

    # warm-up: disparity frozen
    opt_s = _Adam(n, config.lr_warmup, *ab)
    opt_h = _Adam(n, config.lr_warmup, *ab)
    opt_m = _Adam(logM.shape, config.lr_uncertainty, *ab)
    base = state.disparity
    for step in range(config.warmup_steps):
        M = np.exp(logM)
        E = state.effective()
        total, gE, gM, parts = total_objective(E, M, config, data, cache)
        record(step, "warmup", total, parts)
        g_scale = np.sum(gE * base, axis=(1, 2))
        g_shift = np.sum(gE, axis=(1, 2))
        state.scale = opt_s.step(state.scale, g_scale)
        state.shift = opt_h.step(state.shift, g_shift)
        logM = np.clip(opt_m.step(logM, gM * M), lo, hi)
    state.disparity = np.maximum(state.effective(), D_MIN)
    state.scale = np.ones(n)
    state.shift = np.zeros(n)

    # main: disparity (log-parameterized) and uncertainty
    # multiplicative (log-space) updates applied to D directly, so a zero
    # gradient leaves D bit-identical
    D = state.disparity
    opt_d = _Adam(D.shape, config.lr_disparity, *ab)
    zero = np.zeros(D.shape)
    opt_m2 = _Adam(logM.shape, config.lr_uncertainty, *ab)
    steps = config.main_steps
    for step in range(steps):
        frac = 1.0 - (1.0 - config.lr_final_fraction) * step / max(steps - 1, 1)
        M = np.exp(logM)
        total, gE, gM, parts = total_objective(D, M, config, data, cache)
        record(config.warmup_steps + step, "main", total, parts)
        D = D * np.exp(opt_d.step(zero, gE * D, config.lr_disparity * frac))
        logM = np.clip(opt_m2.step(logM, gM * M, config.lr_uncertainty * frac), lo, hi)
    state.disparity = D
    state.uncertainty = np.exp(logM)
    final, _, _, parts = total_objective(state.disparity, state.uncertainty, config, data, cache)
    record(config.warmup_steps + steps, "final", final, parts)
    result.state = state
    return result
