"""Lie-group camera math, pinhole projection and trajectory alignment.

Poses map world coordinates to camera coordinates.  For two cameras the
relative transform ``relative_pose(Gi, Gj) = Gj * Gi^-1`` carries points
expressed in camera ``i`` into camera ``j``.  Twists are ordered
``(wx, wy, wz, vx, vy, vz)`` and pose updates are applied on the left,
``G <- exp(dxi) * G``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, DegenerateConfiguration, InvalidDisparity

Z_MIN = 1e-6
_SMALL_ANGLE = 1e-8
_PI_MARGIN = 1e-6


# ---------------------------------------------------------------------------
# quaternion / rotation helpers (quaternions stored w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical hemisphere keeps round trips stable
    return np.where(q[..., :1] < 0, -q, q)


def quat_multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def hat(w):
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        z, -w[..., 2], w[..., 1],
        w[..., 2], z, -w[..., 0],
        -w[..., 1], w[..., 0], z,
    ], axis=-1).reshape(w.shape[:-1] + (3, 3))


def so3_exp_quat(w):
    """Quaternion of exp(hat(w)) for a single rotation vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < _SMALL_ANGLE:
        # second-order series of cos(theta/2), sin(theta/2)/theta
        return quat_normalize(np.concatenate([[1.0 - theta * theta / 8.0], (0.5 - theta * theta / 48.0) * w]))
    return quat_normalize(np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) / theta * w]))


def so3_exp_matrix(w):
    """Rodrigues formula, batched over leading axes."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = hat(w)
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    A = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(t) / t)
    B = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    return np.eye(3) + A * W + B * (W @ W)


def _left_jacobian(w):
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    return (np.eye(3) + (1 - np.cos(theta)) / theta ** 2 * W
            + (theta - np.sin(theta)) / theta ** 3 * (W @ W))


def _left_jacobian_inv(w):
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * W + c * (W @ W)


def so3_log_quat(q):
    q = quat_normalize(q)
    vec = q[1:]
    s = np.linalg.norm(vec)
    theta = 2.0 * np.arctan2(s, q[0])
    if theta >= np.pi - _PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if s < 1e-12:
        return 2.0 * vec / q[0]
    return theta * vec / s


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as unit quaternion (w, x, y, z) and translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def inverse(self):
        return inverse(self)


@dataclass(frozen=True)
class SimTransform:
    """Similarity transform x -> scale * R x + t."""

    scale: float = 1.0
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("SimTransform scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def rotation(self):
        return quat_to_matrix(self.quat)

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self):
        Rinv = self.rotation.T
        return SimTransform(1.0 / self.scale, matrix_to_quat(Rinv), -(Rinv @ self.translation) / self.scale)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_focal(cls, f, width, height, cx=None, cy=None):
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(float(f), float(f), float(cx), float(cy), int(width), int(height))

    def with_focal(self, f):
        return Intrinsics(float(f), float(f), self.cx, self.cy, self.width, self.height)

    def scaled(self, factor):
        """Intrinsics of a grid subsampled by ``factor`` (pixel centres at integer indices)."""
        w = max(1, self.width // factor)
        h = max(1, self.height // factor)
        return Intrinsics(self.fx / factor, self.fy / factor,
                          min(self.cx / factor, w - 1e-9), min(self.cy / factor, h - 1e-9), w, h)

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class DisparityGrid:
    values: np.ndarray
    valid: np.ndarray | None = None
    level: str = "low"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool) & (self.values > 0)

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------

def se3_exp(v) -> RigidTransform:
    v = np.asarray(v, dtype=np.float64).reshape(6)
    w, rho = v[:3], v[3:]
    return RigidTransform(so3_exp_quat(w), _left_jacobian(w) @ rho)


def se3_log(T: RigidTransform) -> np.ndarray:
    w = so3_log_quat(T.quat)
    return np.concatenate([w, _left_jacobian_inv(w) @ T.translation])


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    return RigidTransform(quat_multiply(A.quat, B.quat), A.rotation @ B.translation + A.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    qinv = T.quat * np.array([1.0, -1.0, -1.0, -1.0])
    return RigidTransform(qinv, -(quat_to_matrix(qinv) @ T.translation))


def relative_pose(Gi: RigidTransform, Gj: RigidTransform) -> RigidTransform:
    """Transform taking camera-i coordinates to camera-j coordinates."""
    return compose(Gj, inverse(Gi))


def retract(T: RigidTransform, dxi) -> RigidTransform:
    return compose(se3_exp(dxi), T)


def pose_geodesic_error(T: RigidTransform, G: RigidTransform) -> float:
    return float(np.linalg.norm(se3_log(compose(inverse(T), G))))


def camera_center(T: RigidTransform) -> np.ndarray:
    return -(T.rotation.T @ T.translation)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def pixel_grid(height, width):
    """(H, W, 2) array of (u, v) pixel-centre coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def project(points, K: Intrinsics, z_min=Z_MIN):
    """Project camera-frame points; returns (uv, valid) with invalid points set to NaN."""
    P = np.asarray(points, dtype=np.float64)
    z = P[..., 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * P[..., 0] / zs + K.cx, K.fy * P[..., 1] / zs + K.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def _rays(pixels, K):
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.stack([(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy,
                     np.ones(pixels.shape[:-1])], axis=-1)


def backproject(pixels, disparity, K: Intrinsics, valid=None):
    """X = K^-1 [u, v, 1] / d; raises InvalidDisparity for invalid or non-positive entries."""
    d = np.asarray(disparity, dtype=np.float64)
    ok = np.isfinite(d) & (d > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.all(ok):
        raise InvalidDisparity(f"{int((~ok).sum())} pixel(s) without valid positive disparity")
    return _rays(pixels, K) / d[..., None]


def backproject_grid(d: DisparityGrid, K: Intrinsics):
    """Point map for a whole grid; invalid pixels yield NaN points."""
    H, W = d.values.shape
    safe = np.where(d.valid, d.values, 1.0)
    X = _rays(pixel_grid(H, W), K) / safe[..., None]
    X[~d.valid] = np.nan
    return X


def induced_flow(G_ij: RigidTransform, d_i: DisparityGrid, K: Intrinsics):
    """Correspondences in frame j of every pixel of frame i; returns (coords, valid)."""
    X = backproject_grid(d_i, K)
    Xj = G_ij.apply(np.where(d_i.valid[..., None], X, 0.0))
    uv, ok = project(Xj, K)
    valid = ok & d_i.valid
    uv[~valid] = np.nan
    return uv, valid


# ---------------------------------------------------------------------------
# Sim(3) alignment
# ---------------------------------------------------------------------------

def umeyama_sim3(src, dst) -> SimTransform:
    """Least-squares similarity with dst ~ s R src + t (closed form, SVD)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or len(src) < 3:
        raise DegenerateConfiguration("need >= 3 matching 3D correspondences")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s <= 0 or sv_src[1] <= 1e-12 * max(sv_src[0], 1e-300):
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * R @ mu_s
    return SimTransform(scale, matrix_to_quat(R), t)
