"""Command-line entry point.

    dynsolve synth SPEC --out DIR
    dynsolve solve DATASET --out DIR [--config CFG]
    dynsolve cvd DATASET SOLVE_DIR --out DIR [--config CFG]
    dynsolve eval-traj EST GT [--out DIR]
    dynsolve eval-depth EST_DIR GT_DIR [--out DIR] [--disparity]

Exit codes: 0 ok, 1 other error, 2 invalid spec/config, 3 tracking lost,
4 numerical failure.  Heavy modules are imported after ``--threads`` has
been applied to the BLAS thread pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

EXIT_OK, EXIT_ERROR, EXIT_SPEC, EXIT_TRACKING, EXIT_NUMERIC = 0, 1, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("dynsolve")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _parse_field(name, default, text):
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{name}: expected true/false, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


class RunConfig:
    """Flat key-value configuration covering the solver and the depth refinement."""

    EXTRA = {"init_from_motion": True}

    def __init__(self, **values):
        from .cvd import CVDConfig
        from .pipeline import PipelineConfig
        self.pipeline = PipelineConfig()
        self.cvd = CVDConfig()
        self.extra = dict(self.EXTRA)
        for k, v in values.items():
            self.set(k, v)

    def _target(self, key):
        if key in self.extra:
            return None
        for obj in (self.pipeline, self.cvd):
            if hasattr(obj, key):
                return obj
        raise KeyError(key)

    def set(self, key, value):
        try:
            obj = self._target(key)
        except KeyError:
            raise ValueError(f"unknown config key: {key}") from None
        if obj is None:
            default = self.EXTRA[key]
            self.extra[key] = _parse_field(key, default, value) if isinstance(value, str) else value
        else:
            default = getattr(obj, key)
            setattr(obj, key, _parse_field(key, default, value) if isinstance(value, str) else value)

    @classmethod
    def load(cls, path=None):
        from .io import read_keyvalue
        cfg = cls()
        if path:
            for k, v in read_keyvalue(path).items():
                cfg.set(k, v)
        cfg.cvd.__post_init__()
        return cfg

    def items(self):
        from dataclasses import asdict
        out = {}
        out.update(asdict(self.pipeline))
        out.update(asdict(self.cvd))
        out.update(self.extra)
        return out


def _spec_from_file(path, seed=None):
    from .io import read_keyvalue
    from .synth import Mover, SceneSpec
    raw = read_keyvalue(path)
    defaults = SceneSpec()
    kwargs, movers = {}, []
    for key, text in raw.items():
        if key.startswith("mover"):
            v = [float(x) for x in text.split(",")]
            if len(v) != 12:
                raise ValueError(f"{key}: expected 12 comma-separated numbers")
            movers.append((key, Mover(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), tuple(v[9:12]))))
            continue
        if not hasattr(defaults, key) or key == "movers":
            raise ValueError(f"unknown spec key: {key}")
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            kwargs[key] = tuple(float(x) for x in text.split(","))
        else:
            kwargs[key] = _parse_field(key, default, text)
    kwargs["movers"] = [m for _, m in sorted(movers, key=lambda kv: kv[0])]
    if seed is not None:
        kwargs["seed"] = seed
    return SceneSpec(**kwargs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.marks = {}

    def __call__(self, name, t0):
        self.marks[name] = time.perf_counter() - t0


def _write_manifest(out, command, args, cfg=None, extra=None, timer=None):
    from .io import write_keyvalue
    items = {"command": command, "seed": args.seed if args.seed is not None else 0}
    for k in ("dataset", "solve_dir", "spec"):
        if getattr(args, k, None) is not None:
            # recorded as given: relative invocations from twin directories stay byte-identical
            items[k] = getattr(args, k)
    if cfg is not None:
        items.update({f"config.{k}": v for k, v in cfg.items().items()})
    if extra:
        items.update(extra)
    write_keyvalue(os.path.join(out, "manifest.txt"), items)
    if timer is not None:
        # wall-clock values live in their own file so all other outputs stay reproducible
        write_keyvalue(os.path.join(out, "timings.txt"), {f"seconds.{k}": v for k, v in timer.marks.items()})


def cmd_synth(args):
    from .io import frame_name, write_dataset, write_pfm
    from .synth import generate
    timer = _Timer()
    t0 = time.perf_counter()
    spec = _spec_from_file(args.spec, args.seed)
    bundle = generate(spec)
    write_dataset(args.out, bundle.to_dataset())
    gt = os.path.join(args.out, "gt")
    for sub in ("disp_low", "disp_full") if bundle.disp_full is not None else ("disp_low",):
        os.makedirs(os.path.join(gt, sub), exist_ok=True)
    for i in range(spec.n_frames):
        write_pfm(os.path.join(gt, "disp_low", frame_name(i) + ".pfm"), bundle.disp_low[i])
        if bundle.disp_full is not None:
            write_pfm(os.path.join(gt, "disp_full", frame_name(i) + ".pfm"), bundle.disp_full[i])
    timer("synth", t0)
    args.seed = spec.seed
    _write_manifest(os.path.join(args.out, "gt"), "synth", args, timer=timer)
    return EXIT_OK


def cmd_solve(args):
    import numpy as np
    from .io import frame_name, read_dataset, write_intrinsics, write_keyvalue, write_pfm, write_trajectory
    from .pipeline import backend_global, frontend_track, initialize
    cfg = RunConfig.load(args.config)
    timer = _Timer()
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    data = read_dataset(args.dataset)
    timer("read", t0)
    t0 = time.perf_counter()
    state, nxt = initialize(data, cfg.pipeline)
    timer("initialize", t0)
    t0 = time.perf_counter()
    for f in range(nxt, data.n_frames):
        frontend_track(state, f)
    timer("frontend", t0)
    t0 = time.perf_counter()
    backend_global(state)
    timer("backend", t0)

    poses, disp, focal = state.export()
    write_trajectory(os.path.join(args.out, "trajectory.txt"), poses)
    write_intrinsics(os.path.join(args.out, "intrinsics.txt"), data.intrinsics.with_focal(focal))
    os.makedirs(os.path.join(args.out, "disparity"), exist_ok=True)
    for i in range(data.n_frames):
        write_pfm(os.path.join(args.out, "disparity", frame_name(i) + ".pfm"), disp[i])
    state.report.write(args.out)
    extra = {
        "keyframes": state.keyframes, "alpha": state.alpha, "beta": state.beta,
        "disparity_scale": state.scale, "w_d": state.w_d, "focal_enabled": state.focal_enabled,
        "focal": focal, "tracking_lost": state.tracking_lost,
    }
    _write_manifest(args.out, "solve", args, cfg, extra, timer)
    write_keyvalue(os.path.join(args.out, "report.txt"), state.report.as_dict() | {"w_d": state.w_d})
    if not np.all(np.isfinite(disp)):
        return EXIT_NUMERIC
    return EXIT_TRACKING if state.tracking_lost else EXIT_OK


def cmd_cvd(args):
    import numpy as np
    from .cvd import CVDData, DepthState, init_uncertainty, optimize
    from .errors import NonFiniteLoss
    from .io import frame_name, read_dataset, read_intrinsics, read_keyvalue, read_trajectory, write_pfm
    cfg = RunConfig.load(args.config)
    timer = _Timer()
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    data = read_dataset(args.dataset, full_resolution=True)
    solved = read_keyvalue(os.path.join(args.solve_dir, "manifest.txt"))
    K = read_intrinsics(os.path.join(args.solve_dir, "intrinsics.txt"))
    _, poses = read_trajectory(os.path.join(args.solve_dir, "trajectory.txt"))
    alpha, beta = float(solved["alpha"]), float(solved["beta"])
    d_align = np.maximum(alpha * data.full_disp_rel + beta, 1e-4)
    flows = {e: data.full_flows[e] for e in data.full_edges}
    cdata = CVDData(poses, K, flows, d_align)
    motion = data.full_motion if cfg.extra["init_from_motion"] else None
    init = DepthState(d_align.copy(), init_uncertainty(d_align.shape, motion, cfg.cvd.m_floor))
    timer("read", t0)
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        res = optimize(init, cfg.cvd, cdata)
        state, trace = res.state, res.trace
    except NonFiniteLoss as exc:
        from .cvd import CVDResult
        res = CVDResult(init, exc.trace)
        state, trace, code = init, exc.trace, EXIT_NUMERIC
    timer("optimize", t0)
    res.write_trace(os.path.join(args.out, "loss_trace.csv"))
    for sub, arr in (("disparity", state.disparity), ("uncertainty", state.uncertainty)):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
        for i in range(len(arr)):
            write_pfm(os.path.join(args.out, sub, frame_name(i) + ".pfm"), arr[i])
    extra = {"steps": len(trace), "final_loss": trace[-1]["total"] if trace else float("nan"),
             "status": "ok" if code == EXIT_OK else "non-finite loss"}
    _write_manifest(args.out, "cvd", args, cfg, extra, timer)
    return code


def _emit_table(out, name, metrics):
    rows = [(k, v) for k, v in metrics.items()]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:.6g}")
    if out:
        import csv
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, name), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([k for k, _ in rows])
            w.writerow([repr(float(v)) for _, v in rows])


def cmd_eval_traj(args):
    from .io import read_trajectory
    from .metrics import ate_rte_rre
    _, est = read_trajectory(args.est)
    _, gt = read_trajectory(args.gt)
    _emit_table(args.out, "traj_metrics.csv", ate_rte_rre(est, gt))
    return EXIT_OK


def _read_rasters(path):
    import numpy as np
    from .io import read_pfm
    names = sorted(n for n in os.listdir(path) if n.endswith(".pfm"))
    if not names:
        raise FileNotFoundError(f"no .pfm rasters in {path}")
    return names, np.stack([read_pfm(os.path.join(path, n)).astype(np.float64) for n in names])


def cmd_eval_depth(args):
    import numpy as np
    from .metrics import depth_metrics
    n_est, est = _read_rasters(args.est)
    n_gt, gt = _read_rasters(args.gt)
    if n_est != n_gt:
        raise FileNotFoundError("estimate and ground-truth directories list different frames")
    if args.disparity:
        with np.errstate(divide="ignore"):
            est, gt = 1.0 / est, 1.0 / gt
    m = depth_metrics(est, gt, fit=not args.no_fit)
    _emit_table(args.out, "depth_metrics.csv", {k: m[k] for k in ("abs_rel", "log_rmse", "delta_1.25")})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dynsolve", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value run configuration file")
    common.add_argument("--seed", type=int, default=None, help="random seed (recorded in the manifest)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("spec")
    s.set_defaults(func=cmd_synth, need_out=True)

    s = sub.add_parser("solve", parents=[common], help="estimate cameras and low-res disparity")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_solve, need_out=True)

    s = sub.add_parser("cvd", parents=[common], help="refine full-resolution video depth")
    s.add_argument("dataset")
    s.add_argument("solve_dir")
    s.set_defaults(func=cmd_cvd, need_out=True)

    s = sub.add_parser("eval-traj", parents=[common], help="ATE / RTE / RRE against a reference trajectory")
    s.add_argument("est")
    s.add_argument("gt")
    s.set_defaults(func=cmd_eval_traj, need_out=False)

    s = sub.add_parser("eval-depth", parents=[common], help="depth metrics between raster directories")
    s.add_argument("est")
    s.add_argument("gt")
    s.add_argument("--disparity", action="store_true", help="rasters hold disparity instead of depth")
    s.add_argument("--no-fit", action="store_true", help="skip the global scale/shift fit")
    s.set_defaults(func=cmd_eval_depth, need_out=False)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(max(1, args.threads))
    if args.need_out and not args.out:
        print(f"error: {args.command} requires --out", file=sys.stderr)
        return EXIT_SPEC
    from . import errors
    try:
        return args.func(args)
    except errors.SpecInfeasible as exc:
        print(f"error: infeasible spec: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except (errors.TrackingLost, errors.InsufficientMotion) as exc:
        print(f"error: tracking failed: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (errors.NonFiniteLoss, errors.SingularSystem) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (errors.DynSolveError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
