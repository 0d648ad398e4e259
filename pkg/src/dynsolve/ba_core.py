"""Weighted-reprojection bundle adjustment over poses, focal and disparity.

The cost is

    C = sum_(i,j) sum_p w_ij(p) * ||target_ij(p) - u_ij(p)||^2
        + w_d * sum_i ||d_i - D_i^align||^2

with ``u_ij`` the correspondence induced by the relative pose and the
disparity of frame ``i``.  Each reprojection term touches a single
disparity unknown, so the disparity block of the Gauss-Newton matrix is
diagonal and is eliminated with a Schur complement before solving the
reduced camera (pose + focal) system.

Focal length is optimized as ``log(f / focal_norm)`` which keeps it positive;
``focal_norm`` (typically the larger image side) does not change the steps
because LM damping is proportional to the Hessian diagonal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import AllInvalid, SingularSystem
from .geometry import Intrinsics, RigidTransform, Z_MIN, hat, pixel_grid, retract

log = logging.getLogger(__name__)

D_MIN = 1e-4
LAMBDA0 = 1e-4
UP_FACTOR = 10.0
DOWN_FACTOR = 5.0
MAX_REJECTIONS = 8
_HD_TINY = 1e-300


@dataclass
class Edge:
    i: int
    j: int
    target: np.ndarray      # (h, w, 2) target coordinates in frame j
    weight: np.ndarray      # (h, w) combined weight


@dataclass
class BAProblem:
    poses: list
    disparities: np.ndarray
    intrinsics: Intrinsics
    edges: list
    prior: np.ndarray | None = None
    w_d: float = 0.0
    fixed: frozenset = frozenset({0})
    optimize_focal: bool = False
    optimize_disparity: bool = True
    frozen_disparity: frozenset = frozenset()
    focal_norm: float = 1.0

    def __post_init__(self):
        self.disparities = np.asarray(self.disparities, dtype=np.float64)
        self.fixed = frozenset(self.fixed)
        self.frozen_disparity = frozenset(self.frozen_disparity)
        if not self.intrinsics.fx > 0:
            raise ValueError("focal must be positive")

    @property
    def focal(self):
        return self.intrinsics.fx

    @property
    def n_frames(self):
        return len(self.poses)

    def copy(self, **changes):
        base = dict(poses=list(self.poses), disparities=self.disparities.copy())
        base.update(changes)
        return replace(self, **base)

    def free_poses(self):
        return [k for k in range(self.n_frames) if k not in self.fixed]

    def disparity_frames(self):
        if not self.optimize_disparity:
            return []
        return [k for k in range(self.n_frames) if k not in self.frozen_disparity]


@dataclass
class BlockSystem:
    """Gauss-Newton normal equations in camera / disparity block form.

    ``H_Gf`` and ``r_Gf`` cover the free poses (6 columns each, in
    ``free_poses`` order) followed by the focal column when enabled.  The
    coupling block is stored sparsely: for every disparity frame ``k``,
    ``E_blocks[k] = (cols, B)`` with ``B`` of shape (n_pixels, len(cols)).
    """

    H_Gf: np.ndarray
    r_Gf: np.ndarray
    H_d: np.ndarray             # (n_disp_frames, n_pixels)
    r_d: np.ndarray
    E_blocks: dict
    free_poses: list
    disp_frames: list
    focal_col: int | None
    focal_h: float = 0.0        # undamped focal diagonal entry (0 if focal is not a column)

    @property
    def n_cam(self):
        return self.H_Gf.shape[0]

    def E_dense(self):
        E = np.zeros((self.n_cam, self.H_d.size))
        P = self.H_d.shape[1]
        for r, k in enumerate(self.disp_frames):
            if k in self.E_blocks:
                cols, B = self.E_blocks[k]
                E[np.ix_(cols, np.arange(r * P, (r + 1) * P))] = B.T
        return E

    def dense(self):
        """Full (undamped) matrix and right-hand side, camera block first."""
        E = self.E_dense()
        H = np.block([[self.H_Gf, E], [E.T, np.diag(self.H_d.ravel())]])
        return H, np.concatenate([self.r_Gf, self.r_d.ravel()])


@dataclass
class DampingState:
    lam: float = LAMBDA0
    up_factor: float = UP_FACTOR
    down_factor: float = DOWN_FACTOR
    max_rejections: int = MAX_REJECTIONS

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


@dataclass
class LMResult:
    problem: BAProblem
    trace: list = field(default_factory=list)
    converged: bool = False
    no_progress: bool = False
    iterations: int = 0
    damping: DampingState | None = None

    @property
    def costs(self):
        return [t["cost"] for t in self.trace if t["accepted"]]


# ---------------------------------------------------------------------------
# residuals and Jacobians
# ---------------------------------------------------------------------------

def _rays(K: Intrinsics, shape):
    h, w = shape
    pix = pixel_grid(h, w).reshape(-1, 2)
    return np.stack([(pix[:, 0] - K.cx) / K.fx, (pix[:, 1] - K.cy) / K.fy, np.ones(len(pix))], axis=-1)


def _relative(problem, e):
    Gi, Gj = problem.poses[e.i], problem.poses[e.j]
    Ri, Rj = Gi.rotation, Gj.rotation
    R = Rj @ Ri.T
    return R, Gj.translation - R @ Gi.translation


def edge_terms(problem: BAProblem, e: Edge, jacobians=True, rays=None):
    """Per-pixel correspondences, residuals, weights and (optionally) Jacobians.

    Returns a dict with ``u`` (P, 2), ``r`` (P, 2), ``w`` (P,) where invalid
    pixels carry zero weight, and Jacobians of ``u`` w.r.t. the left twist of
    pose i (``Ji``), pose j (``Jj``), the disparity of the pixel (``Jd``) and
    the log-focal parameter (``Jf``).
    """
    K = problem.intrinsics
    shape = problem.disparities.shape[1:]
    q = _rays(K, shape) if rays is None else rays
    d = problem.disparities[e.i].ravel()
    R, t = _relative(problem, e)
    dvalid = np.isfinite(d) & (d > 0)
    dsafe = np.where(dvalid, d, 1.0)
    Xi = q / dsafe[:, None]
    Xj = Xi @ R.T + t
    z = Xj[:, 2]
    target = e.target.reshape(-1, 2)
    valid = dvalid & (z > Z_MIN) & np.all(np.isfinite(target), axis=1)
    zs = np.where(valid, z, 1.0)
    f = K.fx
    u = np.stack([f * Xj[:, 0] / zs + K.cx, f * Xj[:, 1] / zs + K.cy], axis=-1)
    w = np.where(valid, e.weight.ravel(), 0.0)
    r = np.where(valid[:, None], np.nan_to_num(target) - u, 0.0)
    out = {"u": u, "r": r, "w": w, "valid": valid}
    if not jacobians:
        return out

    P = len(d)
    Jp = np.zeros((P, 2, 3))
    Jp[:, 0, 0] = f / zs
    Jp[:, 1, 1] = f / zs
    Jp[:, 0, 2] = -f * Xj[:, 0] / zs ** 2
    Jp[:, 1, 2] = -f * Xj[:, 1] / zs ** 2

    dXj_dxj = np.concatenate([-hat(Xj), np.broadcast_to(np.eye(3), (P, 3, 3))], axis=2)
    dXi_dxi = np.concatenate([hat(Xi), -np.broadcast_to(np.eye(3), (P, 3, 3))], axis=2)
    Jj = Jp @ dXj_dxj
    Ji = Jp @ (R @ dXi_dxi)
    dXj_dd = -(Xi @ R.T) / dsafe[:, None]
    Jd = np.einsum("pab,pb->pa", Jp, dXj_dd)
    dXi_df = np.stack([-q[:, 0] / f, -q[:, 1] / f, np.zeros(P)], axis=-1) / dsafe[:, None]
    Jf = np.stack([Xj[:, 0] / zs, Xj[:, 1] / zs], axis=-1) + np.einsum("pab,pb->pa", Jp, dXi_df @ R.T)
    out.update(Ji=Ji, Jj=Jj, Jd=Jd, Jf=f * Jf)
    return out


def analytic_jacobians(problem: BAProblem):
    """Jacobian blocks for every edge, keyed by (i, j)."""
    rays = _rays(problem.intrinsics, problem.disparities.shape[1:])
    out = {}
    for e in problem.edges:
        t = edge_terms(problem, e, rays=rays)
        if not problem.optimize_focal:
            t["Jf"] = np.zeros_like(t["Jf"])
        out[(e.i, e.j)] = t
    return out


def reprojection_residuals(problem: BAProblem):
    """Residual rasters per edge and the total cost (prior term included)."""
    rays = _rays(problem.intrinsics, problem.disparities.shape[1:])
    h, w = problem.disparities.shape[1:]
    residuals = {}
    cost = 0.0
    for e in problem.edges:
        t = edge_terms(problem, e, jacobians=False, rays=rays)
        residuals[(e.i, e.j)] = t["r"].reshape(h, w, 2)
        cost += float(np.sum(t["w"] * np.sum(t["r"] ** 2, axis=1)))
    cost += prior_cost(problem)
    return residuals, cost


def prior_cost(problem: BAProblem):
    if problem.prior is None or problem.w_d == 0:
        return 0.0
    diff = np.nan_to_num(problem.disparities - problem.prior)
    return float(problem.w_d * np.sum(diff ** 2))


def total_cost(problem: BAProblem):
    return reprojection_residuals(problem)[1]


# ---------------------------------------------------------------------------
# normal equations
# ---------------------------------------------------------------------------

def build_normal_equations(problem: BAProblem, include_prior=True, jacobians=None):
    free = problem.free_poses()
    pose_col = {k: 6 * n for n, k in enumerate(free)}
    focal_col = 6 * len(free) if problem.optimize_focal else None
    n_cam = 6 * len(free) + (1 if problem.optimize_focal else 0)
    disp_frames = problem.disparity_frames()
    disp_row = {k: n for n, k in enumerate(disp_frames)}
    P = int(np.prod(problem.disparities.shape[1:]))

    H = np.zeros((n_cam, n_cam))
    g = np.zeros(n_cam)
    Hd = np.zeros((len(disp_frames), P))
    rd = np.zeros((len(disp_frames), P))
    E = {k: {} for k in disp_frames}
    focal_h = 0.0
    rays = _rays(problem.intrinsics, problem.disparities.shape[1:])

    for e in problem.edges:
        t = jacobians[(e.i, e.j)] if jacobians is not None else edge_terms(problem, e, rays=rays)
        w, r = t["w"], t["r"]
        if not np.any(w > 0):
            continue
        blocks, cols = [], []
        if e.i in pose_col:
            blocks.append(t["Ji"])
            cols.append(("pose", e.i))
        if e.j in pose_col:
            blocks.append(t["Jj"])
            cols.append(("pose", e.j))
        if focal_col is not None:
            blocks.append(t["Jf"][:, :, None])
            cols.append(("focal", None))
        focal_h += float(np.sum(w * np.sum(t["Jf"] ** 2, axis=1)))
        if blocks:
            J = np.concatenate(blocks, axis=2)                  # (P, 2, m)
            Jw = J * w[:, None, None]
            Hloc = np.einsum("pak,pal->kl", Jw, J)
            gloc = np.einsum("pak,pa->k", Jw, r)
            idx = np.concatenate([_col_range(c, pose_col, focal_col) for c in cols])
            H[np.ix_(idx, idx)] += Hloc
            g[idx] += gloc
        if e.i in disp_row:
            row = disp_row[e.i]
            Jd = t["Jd"]
            Hd[row] += w * np.sum(Jd ** 2, axis=1)
            rd[row] += w * np.sum(Jd * r, axis=1)
            if blocks:
                coup = np.einsum("pak,pa->pk", Jw, Jd)          # (P, m)
                off = 0
                for c in cols:
                    width = 6 if c[0] == "pose" else 1
                    key = c
                    blk = coup[:, off:off + width]
                    E[e.i][key] = E[e.i][key] + blk if key in E[e.i] else blk.copy()
                    off += width

    if include_prior and problem.prior is not None and problem.w_d > 0:
        for k, row in disp_row.items():
            Hd[row] += problem.w_d
            rd[row] += problem.w_d * np.nan_to_num(problem.prior[k] - problem.disparities[k]).ravel()

    E_blocks = {}
    for k, blocks in E.items():
        if not blocks:
            continue
        keys = sorted(blocks, key=lambda c: _col_range(c, pose_col, focal_col)[0])
        cols = np.concatenate([_col_range(c, pose_col, focal_col) for c in keys])
        E_blocks[k] = (cols, np.concatenate([blocks[c] for c in keys], axis=1))
    H = 0.5 * (H + H.T)
    return BlockSystem(H, g, Hd, rd, E_blocks, free, disp_frames, focal_col, focal_h)


def _col_range(c, pose_col, focal_col):
    if c[0] == "pose":
        s = pose_col[c[1]]
        return np.arange(s, s + 6)
    return np.array([focal_col])


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def damped(system: BlockSystem, lam):
    """Return (H_Gf, H_d) with LM damping ``H + lam * diag(H)`` applied."""
    H = system.H_Gf + lam * np.diag(np.diag(system.H_Gf))
    return H, system.H_d * (1.0 + lam)


def _inverse_diag(Hd):
    # unobserved disparities (zero curvature, no prior) are left unchanged
    return np.where(Hd > _HD_TINY, 1.0 / np.where(Hd > _HD_TINY, Hd, 1.0), 0.0)


def reduced_system(system: BlockSystem, lam):
    """Schur complement of the damped disparity block: (S, b, Hd_inv)."""
    H, Hd = damped(system, lam)
    Hinv = _inverse_diag(Hd)
    S = H.copy()
    b = system.r_Gf.copy()
    row = {k: n for n, k in enumerate(system.disp_frames)}
    for k, (cols, B) in system.E_blocks.items():
        hi = Hinv[row[k]]
        BH = B * hi[:, None]
        S[np.ix_(cols, cols)] -= BH.T @ B
        b[cols] -= BH.T @ system.r_d[row[k]]
    return 0.5 * (S + S.T), b, Hinv


def schur_solve(system: BlockSystem, lam):
    """Damped solve via the Schur complement; returns (d_cam, d_disp)."""
    S, b, Hinv = reduced_system(system, lam)
    if S.shape[0]:
        try:
            c, low = scipy.linalg.cho_factor(S, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"reduced camera system not positive definite: {exc}") from exc
        dx = scipy.linalg.cho_solve((c, low), b)
        if not np.all(np.isfinite(dx)):
            raise SingularSystem("non-finite camera update")
    else:
        dx = np.zeros(0)
    rhs = system.r_d.copy()
    row = {k: n for n, k in enumerate(system.disp_frames)}
    for k, (cols, B) in system.E_blocks.items():
        rhs[row[k]] -= B @ dx[cols]
    return dx, Hinv * rhs


def apply_update(problem: BAProblem, system: BlockSystem, dx, dd, d_min=D_MIN):
    new = problem.copy()
    for n, k in enumerate(system.free_poses):
        new.poses[k] = retract(problem.poses[k], dx[6 * n:6 * n + 6])
    if system.focal_col is not None:
        f = problem.focal * np.exp(dx[system.focal_col])
        new.intrinsics = problem.intrinsics.with_focal(f)
    for n, k in enumerate(system.disp_frames):
        upd = problem.disparities[k] + dd[n].reshape(problem.disparities.shape[1:])
        new.disparities[k] = np.maximum(upd, d_min)
    return new


def lm_iterate(problem: BAProblem, damping: DampingState | None = None, max_iters=50, cost_tol=1e-12,
               abs_cost_tol=1e-24, d_min=D_MIN) -> LMResult:
    """Levenberg-Marquardt with classic multiplicative damping schedule."""
    damping = replace(damping) if damping is not None else DampingState()
    cost = total_cost(problem)
    result = LMResult(problem, [{"iter": 0, "cost": cost, "lambda": damping.lam, "accepted": True}])
    if cost <= abs_cost_tol:
        result.converged = True
        result.damping = damping
        return result
    for it in range(1, max_iters + 1):
        system = build_normal_equations(problem)
        rejections = 0
        accepted = False
        while rejections <= damping.max_rejections:
            try:
                dx, dd = schur_solve(system, damping.lam)
                trial = apply_update(problem, system, dx, dd, d_min)
                c_new = total_cost(trial)
            except SingularSystem:
                c_new = np.inf
            if np.isfinite(c_new) and c_new <= cost:
                accepted = True
                break
            result.trace.append({"iter": it, "cost": c_new, "lambda": damping.lam, "accepted": False})
            damping.lam *= damping.up_factor
            rejections += 1
        result.iterations = it
        if not accepted:
            result.no_progress = True
            break
        rel = (cost - c_new) / max(cost, 1e-300)
        problem, cost = trial, c_new
        damping.lam = max(damping.lam / damping.down_factor, 1e-12)
        result.trace.append({"iter": it, "cost": cost, "lambda": damping.lam, "accepted": True})
        if rel < cost_tol or cost <= abs_cost_tol:
            result.converged = True
            break
    if result.no_progress and cost <= max(abs_cost_tol, 1e-20 * max(result.trace[0]["cost"], 1.0)):
        # stalled at the floating-point floor: that is convergence, not failure
        result.no_progress = False
        result.converged = True
    result.problem = problem
    result.damping = damping
    log.debug("LM finished after %d iterations, cost %.3e", result.iterations, cost)
    return result


def motion_only_ba(problem: BAProblem, **kwargs) -> LMResult:
    """Pose (and optionally focal) refinement with disparities held fixed."""
    res = lm_iterate(problem.copy(optimize_disparity=False), **kwargs)
    res.problem = replace(res.problem, optimize_disparity=problem.optimize_disparity)
    return res


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_disparity(grids, valid=None, target=2.0, percentile=98.0):
    """Scale all disparities so that the given percentile equals ``target``.

    Returns the scaled grids and the scale ``s``.  Translations must be
    divided by ``s`` to keep induced flow unchanged (flow depends on t * d).
    """
    g = np.asarray(grids, dtype=np.float64)
    ok = np.isfinite(g) & (g > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.any(ok):
        raise AllInvalid("no valid disparity to normalize")
    s = target / np.percentile(g[ok], percentile)
    return g * s, float(s)


def scale_translations(poses, factor):
    return [RigidTransform(T.quat, T.translation * factor) for T in poses]


def normalize_focal(f, width, height):
    if not f > 0:
        raise ValueError("focal must be positive")
    return f / max(width, height)


def denormalize_focal(f_norm, width, height):
    return f_norm * max(width, height)
