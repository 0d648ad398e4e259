"""Observability from the Gauss-Newton Hessian diagonal and the gating rules.

The variance of each parameter is approximated by the inverse of the
corresponding diagonal entry of the undamped ``J^T W J`` matrix.  The
mono-depth prior is left out, so the report measures what the flows alone
constrain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .ba_core import BAProblem, BlockSystem, build_normal_equations
from .io import format_value, write_pfm

EPS = 1e-8
GAMMA_D = 1e-4
BETA_D = 0.05
TAU_F = 50.0


@dataclass
class ObservabilityReport:
    disparity_sigma: np.ndarray     # (n_frames, h, w) variance rasters
    median_hd: float
    focal_h: float
    w_d_gate: float
    focal_enabled: bool
    frames: list = field(default_factory=list)

    def as_dict(self):
        return {
            "median_hd": self.median_hd,
            "focal_h": self.focal_h,
            "w_d_gate": self.w_d_gate,
            "focal_enabled": self.focal_enabled,
            "sigma_min": float(np.min(self.disparity_sigma)),
            "sigma_median": float(np.median(self.disparity_sigma)),
            "sigma_max": float(np.max(self.disparity_sigma)),
        }

    def write(self, out_dir, name="observability"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name + ".txt"), "w") as f:
            for k, v in self.as_dict().items():
                f.write(f"{k} = {format_value(v)}\n")
        sub = os.path.join(out_dir, "sigma")
        os.makedirs(sub, exist_ok=True)
        for frame, raster in zip(self.frames, self.disparity_sigma):
            write_pfm(os.path.join(sub, f"{frame:06d}.pfm"), raster)


def epistemic_sigma(system: BlockSystem, shape=None, eps=EPS):
    """Per-parameter variances 1 / (diag(H) + eps).

    Returns a dict with ``pose`` (n_free, 6), ``focal`` (scalar or None) and
    ``disparity`` (n_disp_frames, *shape) when ``shape`` is given.
    """
    diag = np.diag(system.H_Gf)
    n_pose = 6 * len(system.free_poses)
    out = {"pose": (1.0 / (diag[:n_pose] + eps)).reshape(-1, 6),
           "focal": None if system.focal_col is None else float(1.0 / (diag[system.focal_col] + eps))}
    sd = 1.0 / (system.H_d + eps)
    out["disparity"] = sd.reshape((len(system.disp_frames),) + tuple(shape)) if shape is not None else sd
    return out


def depth_reg_weight(median_hd, gamma_d=GAMMA_D, beta_d=BETA_D):
    """Mono-depth prior weight, decaying with the median disparity curvature."""
    if median_hd < 0:
        raise ValueError("median_hd must be non-negative")
    return gamma_d * float(np.exp(-beta_d * median_hd))


def focal_gate(focal_h, tau_f=TAU_F):
    """Focal optimization stays enabled iff focal_h >= tau_f."""
    if focal_h < 0:
        raise ValueError("focal_h must be non-negative")
    return bool(focal_h >= tau_f)


def focal_information(system: BlockSystem, problem: BAProblem):
    """Diagonal curvature for the normalized focal per unit of observation weight.

    ``system.focal_h`` is taken w.r.t. log-focal; dividing by ``f_norm^2``
    converts it to the normalized focal ``f / focal_norm``.
    """
    total_w = sum(float(np.sum(e.weight)) for e in problem.edges)
    if total_w <= 0:
        return 0.0
    f_norm = problem.focal / problem.focal_norm
    return system.focal_h / (f_norm ** 2) / total_w


def observability_report(problem: BAProblem, gamma_d=GAMMA_D, beta_d=BETA_D, tau_f=TAU_F, eps=EPS,
                         frames=None):
    """Undamped, prior-free Hessian analysis of the current state."""
    p = problem.copy(optimize_disparity=True, frozen_disparity=frozenset())
    system = build_normal_equations(p, include_prior=False)
    shape = problem.disparities.shape[1:]
    sig = epistemic_sigma(system, shape, eps)
    med = float(np.median(system.H_d))
    fh = focal_information(system, p)
    return ObservabilityReport(
        disparity_sigma=sig["disparity"], median_hd=med, focal_h=fh,
        w_d_gate=depth_reg_weight(med, gamma_d, beta_d), focal_enabled=focal_gate(fh, tau_f),
        frames=list(frames) if frames is not None else list(range(problem.n_frames)),
    )
