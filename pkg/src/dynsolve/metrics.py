"""Trajectory and depth evaluation metrics."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration, DegenerateTrajectory, EmptyOverlap
from .geometry import RigidTransform, camera_center, quat_to_matrix, relative_pose, umeyama_sim3

MAX_DEPTH = 100.0


def _align_pose(T: RigidTransform, S):
    """Express a world->camera pose in the frame x' = S(x), keeping camera units."""
    R_align = quat_to_matrix(S.quat)
    R = T.rotation @ R_align.T
    c = S.apply(camera_center(T)[None])[0]
    return RigidTransform.from_rt(R, -R @ c)


def _rotation_angle(R):
    # atan2 form stays accurate near 0 and pi
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, 0.5 * (np.trace(R) - 1.0)))


def ate_rte_rre(estimated, gt):
    """ATE / RTE (RMSE, GT normalized to unit path length) and RRE (mean, degrees).

    The estimate is aligned to the normalized ground truth with a Sim(3)
    fitted on camera centres.  Relative errors use consecutive frame pairs.
    """
    if len(estimated) != len(gt):
        raise DegenerateTrajectory(f"frame count mismatch: {len(estimated)} vs {len(gt)}")
    if len(gt) < 3:
        raise DegenerateTrajectory("need at least three poses")
    c_gt = np.array([camera_center(T) for T in gt])
    length = float(np.sum(np.linalg.norm(np.diff(c_gt, axis=0), axis=1)))
    if not length > 0:
        raise DegenerateTrajectory("ground-truth trajectory has zero length")
    gt_n = [RigidTransform(T.quat, T.translation / length) for T in gt]
    c_gt = c_gt / length
    c_est = np.array([camera_center(T) for T in estimated])
    try:
        S = umeyama_sim3(c_est, c_gt)
    except DegenerateConfiguration as exc:
        raise DegenerateTrajectory(str(exc)) from exc
    aligned = [_align_pose(T, S) for T in estimated]
    c_al = np.array([camera_center(T) for T in aligned])
    ate = float(np.sqrt(np.mean(np.sum((c_al - c_gt) ** 2, axis=1))))

    t_err, r_err = [], []
    for k in range(len(gt) - 1):
        rel_e = relative_pose(aligned[k], aligned[k + 1])
        rel_g = relative_pose(gt_n[k], gt_n[k + 1])
        t_err.append(np.sum((rel_e.translation - rel_g.translation) ** 2))
        r_err.append(_rotation_angle(rel_e.rotation @ rel_g.rotation.T))
    rte = float(np.sqrt(np.mean(t_err)))
    rre = float(np.degrees(np.mean(r_err)))
    return {"ATE": ate, "RTE": rte, "RRE": rre}


def fit_disparity_affine(est_disp, gt_disp):
    """Least-squares (scale, shift) with scale * est + shift ~ gt."""
    A = np.stack([est_disp, np.ones_like(est_disp)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, gt_disp, rcond=None)
    return float(a), float(b)


def depth_metrics(estimated, gt, valid=None, fit=True, max_depth=MAX_DEPTH):
    """abs-rel, log-RMSE and delta<1.25 (percent) between depth rasters.

    With ``fit`` a single global scale and shift is fitted in disparity space
    over all frames before comparing depths.  GT beyond ``max_depth`` is
    excluded.
    """
    est = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(gt, dtype=np.float64)
    if est.shape != ref.shape:
        raise EmptyOverlap(f"shape mismatch {est.shape} vs {ref.shape}")
    ok = np.isfinite(est) & np.isfinite(ref) & (est > 0) & (ref > 0) & (ref <= max_depth)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.any(ok):
        raise EmptyOverlap("no pixel valid in both rasters")
    d_gt = ref[ok]
    d_est = est[ok]
    scale, shift = 1.0, 0.0
    if fit:
        scale, shift = fit_disparity_affine(1.0 / d_est, 1.0 / d_gt)
        disp = scale / d_est + shift
        keep = disp > 0
        if not np.any(keep):
            raise EmptyOverlap("fitted disparity is non-positive everywhere")
        d_gt, d_est = d_gt[keep], 1.0 / disp[keep]
    ratio = np.maximum(d_est / d_gt, d_gt / d_est)
    return {
        "abs_rel": float(np.mean(np.abs(d_est - d_gt) / d_gt)),
        "log_rmse": float(np.sqrt(np.mean((np.log(d_est) - np.log(d_gt)) ** 2))),
        "delta_1.25": float(100.0 * np.mean(ratio < 1.25)),
        "scale": scale,
        "shift": shift,
    }
