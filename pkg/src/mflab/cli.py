"""Command-line runner.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 a self-check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

import mflab
from mflab import analysis, checks, storage
from mflab.config import ExperimentConfig, build_experiment, load_config, parse_config
from mflab.errors import ConfigError, FitFailure, InsufficientData, NonFinite, StepFailure
from mflab.flow import run_flow

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4

_NUMERICAL = (NonFinite, StepFailure, FitFailure, InsufficientData, FloatingPointError)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg is not None and cfg.io.out:
        out = cfg.base_dir / cfg.io.out
    elif os.environ.get("MFLAB_OUT"):
        out = Path(os.environ["MFLAB_OUT"])
    else:
        out = Path("mflab-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "model", None):
        doc = cfg.to_dict()
        doc["model"] = {"kind": args.model, "d": cfg.model.d}
        cfg = parse_config(doc, cfg.base_dir)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_json(file: Path, obj) -> None:
    file.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _manifest(out: Path, command: str, cfg: ExperimentConfig | None, extra=None) -> None:
    import numba
    import scipy
    manifest = {
        "command": command,
        "mflab_version": mflab.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.to_dict(),
    }
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def cmd_run(args) -> int:
    cfg = _config(args)
    exp = build_experiment(cfg)
    out = _out_dir(args, cfg)
    every = cfg.io.snapshot_every
    trace = run_flow(exp.model, exp.path0, exp.data, cfg.flow, exp.loss, snapshot_every=every)
    storage.write_trace_csv(trace, out / "trace.csv")
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for i, snap in zip(trace.snapshot_index, trace.snapshots):
        storage.save_snapshot(snap, snap_dir / f"record_{i:08d}.mflb")
    ac = cfg.analysis
    report = analysis.analysis_report(trace, ac.gap_floor, ac.tail_fraction, ac.alpha_tol)
    report.update(stop_reason=trace.stop_reason, steps=trace.steps,
                  final_J=float(trace.J[-1]), final_slope=float(trace.slope[-1]))
    _write_json(out / "report.json", report)
    _manifest(out, "run", cfg)
    print(f"run: {trace.steps} steps, stop={trace.stop_reason}, J={trace.J[-1]:.10g}, "
          f"slope={trace.slope[-1]:.3g} -> {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _config(args)
    exp = build_experiment(cfg)
    res = checks.gradient_check(exp.model, exp.path0, exp.data, cfg.flow.lam,
                                cfg.flow.steps_per_layer, perturb=args.perturb_gradient)
    status = "PASS" if res.passed else "FAIL"
    print(f"grad-check {exp.model.kind}: max rel error {res.max_rel_error:.3e} over "
          f"{res.n_coordinates} coordinates (tol {res.tol:g}) {status}")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_w2_selftest(args) -> int:
    seed = 0 if args.seed is None else args.seed
    res = checks.w2_selftest(seed, args.instances)
    status = "PASS" if res.passed else "FAIL"
    print(f"w2-selftest: {res.instances} instances, max |w2 - brute force| = "
          f"{res.max_error:.3e} {status}")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_rate_fit(args) -> int:
    trace = storage.read_trace_csv(args.trace)
    report = analysis.analysis_report(trace, args.gap_floor, args.tail_fraction)
    fit_failed = [c for c in report["checks"] if c["name"] == "fit"]
    if fit_failed:
        raise InsufficientData(fit_failed[0]["detail"])
    out = _out_dir(args)
    _write_json(out / "report.json", report)
    _manifest(out, "rate-fit", None, {"trace": str(args.trace)})
    print(f"rate-fit: branch={report['branch']} alpha={report['alpha']:.4f} "
          f"R2={report['R2']:.6f} j_star={report['j_star']:.10g}")
    return EXIT_OK


def cmd_convexity_probe(args) -> int:
    cfg = _config(args)
    exp = build_experiment(cfg)
    if args.geodesics < 1 or args.grid_points < 2:
        raise ConfigError("--geodesics must be >= 1 and --grid-points >= 2")
    rng = np.random.default_rng(exp.aux_seed)
    pc = cfg.path
    survey = analysis.convexity_survey(
        exp.model, exp.data, cfg.flow.lam, rng, args.geodesics, pc.L, pc.N, pc.init_scale,
        pc.smoothing, cfg.flow.steps_per_layer, np.linspace(0.0, 1.0, args.grid_points),
        exp.loss)
    finite = bool(np.all(np.isfinite(survey.lipschitz)))
    report = {"geodesics": args.geodesics, "grid_points": args.grid_points,
              "max_lipschitz": survey.max_lipschitz, "min_lambda_est": survey.min_lambda,
              "median_lipschitz": float(np.median(survey.lipschitz)), "finite": finite}
    out = _out_dir(args, cfg)
    _write_json(out / "convexity.json", report)
    _manifest(out, "convexity-probe", cfg)
    print(f"convexity-probe: max Lip(h) = {survey.max_lipschitz:.6g}, "
          f"min lambda_est = {survey.min_lambda:.6g} over {args.geodesics} geodesics")
    return EXIT_OK if finite else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads")
    common.add_argument("--out", default=None, help="output directory (else $MFLAB_OUT)")

    parser = argparse.ArgumentParser(prog="mflab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mflab {mflab.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the flow and analyse the trace")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grad-check", parents=[common], help="adjoint vs finite differences")
    p.add_argument("--config", default=None)
    p.add_argument("--model", default=None, help="override [model].kind")
    p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("w2-selftest", parents=[common], help="exact OT vs brute force")
    p.add_argument("--instances", type=int, default=200)
    p.set_defaults(func=cmd_w2_selftest)

    p = sub.add_parser("rate-fit", parents=[common], help="fit convergence rates to a trace CSV")
    p.add_argument("trace")
    p.add_argument("--gap-floor", type=float, default=1e-12)
    p.add_argument("--tail-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_rate_fit)

    p = sub.add_parser("convexity-probe", parents=[common],
                       help="Lipschitz constant of the derivative along random geodesics")
    p.add_argument("--config", default=None)
    p.add_argument("--geodesics", type=int, default=100)
    p.add_argument("--grid-points", type=int, default=11)
    p.set_defaults(func=cmd_convexity_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"mflab {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERICAL as exc:
        print(f"mflab {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
