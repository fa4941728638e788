"""Command-line entry point: calibration, solving, simulation and accuracy sweeps.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DataError,
    fit_ou,
    fit_power_law,
    impact_curve,
    read_lob_csv,
    read_series,
    rolling_kappa,
    synth_lob,
    vol_path,
    write_lob_csv,
    write_series,
)
from .first_order import build_first_order
from .hjb import StabilityError, accuracy_sweep, default_grid, solve_hjb, sweep_params
from .leading_order import z0_closed_form_phi1
from .model import CONFIG_KEYS, ModelParams, ParameterError, load_params, reference_params
from .simulation import STRATEGIES, ExperimentConfig, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("fastexec")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunManifest:
    """Records what a command read and wrote; written as ``manifest.json`` in the output directory."""

    def __init__(self, command: str, config: dict, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: list[str] = []
        self.outputs: list[Path] = []
        self.timings: dict = {}
        self.checks: dict = {}
        self._t0 = time.perf_counter()

    @property
    def digest(self) -> str:
        blob = json.dumps({"command": self.command, "config": self.config}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def add(self, path) -> Path:
        path = Path(path)
        self.outputs.append(path)
        return path

    def write(self, out_dir: Path) -> Path:
        self.timings["total_seconds"] = time.perf_counter() - self._t0
        doc = {
            "command": self.command,
            "config": self.config,
            "config_digest": self.digest,
            "seed": self.seed,
            "version": __version__,
            "inputs": self.inputs,
            "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.outputs],
            "checks": self.checks,
            "timings": self.timings,
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
        return path


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("EXEC_FAST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"EXEC_FAST_THREADS must be an integer, got {env!r}")
    return 1


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in CONFIG_KEYS:
            raise UsageError(f"unknown parameter {k!r}")
        try:
            out[k] = float(v)
        except ValueError:
            raise UsageError(f"parameter {k} needs a number, got {v!r}")
    return out


def _params(args, default=reference_params) -> ModelParams:
    base = load_params(args.config) if getattr(args, "config", None) else default()
    over = _parse_overrides(getattr(args, "param", None))
    data = base.to_dict()
    data.update(over)
    return ModelParams.from_dict(data)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth_lob(args) -> int:
    man = RunManifest("synth-lob", {"kappa": args.kappa, "phi": args.phi, "price": args.price, "n": args.n,
                                    "noise": args.noise, "interval_ms": args.interval_ms}, args.seed)
    out = _out_dir(args)
    ts = np.arange(args.n, dtype=np.int64) * args.interval_ms
    books = synth_lob(np.full(args.n, args.kappa), args.phi, np.full(args.n, args.price), seed=args.seed,
                      noise=args.noise, ts_ms=ts)
    write_lob_csv(man.add(out / "lob.csv"), books)
    man.write(out)
    print(f"wrote {len(books)} snapshots to {out / 'lob.csv'}")
    return EXIT_OK


def cmd_impact_fit(args) -> int:
    src = Path(args.lob)
    if not src.exists():
        raise FileNotFoundError(f"LOB file {src} not found")
    if src.stat().st_size == 0:
        raise UsageError(f"LOB file {src} is empty")
    man = RunManifest("impact-fit", {"lob_sha256": _sha256(src), "M": args.M, "N": args.N, "w": args.w,
                                     "grid": args.grid}, args.seed)
    man.inputs.append(str(src))
    out = _out_dir(args)
    books = read_lob_csv(src)
    t0 = time.perf_counter()
    fit = fit_power_law(books, args.M, args.N, args.seed, args.grid)
    man.timings["fit_seconds"] = time.perf_counter() - t0
    fit.to_json(man.add(out / "power_law_fit.json"))
    books = sorted(books, key=lambda b: b.ts_ms)
    curves = [impact_curve(b) for b in books]
    series = rolling_kappa(curves, fit.phi_hat, args.w)
    write_series(man.add(out / "kappa.csv"), [t for t, _ in series], [k for _, k in series])
    man.checks["phi_hat"] = fit.phi_hat
    man.write(out)
    print(f"phi_hat = {fit.phi_hat:.6f} +/- {fit.phi_std:.6f} (M={args.M}, N={args.N}, w={args.w})")
    return EXIT_OK


def cmd_tsrv(args) -> int:
    src = Path(args.prices)
    ts, vals = read_series(src)
    window = tuple(_float_list(args.omega_window)) if args.omega_window else None
    man = RunManifest("tsrv", {"prices_sha256": _sha256(src), "delta": args.delta, "K": args.K,
                               "omega2": args.omega2, "omega_window": window, "adjust": not args.no_adjust})
    man.inputs.append(str(src))
    out = _out_dir(args)
    vp = vol_path(np.column_stack([ts, vals]), args.delta, args.K, args.omega2, window, not args.no_adjust)
    vp.to_csv(man.add(out / "sigma.csv"))
    man.checks.update({"omega2": vp.omega2, "gaps": len(vp.gaps)})
    man.write(out)
    print(f"omega^2 = {vp.omega2:.6f}; {vp.sigma.size} volatility values, {len(vp.gaps)} skipped windows")
    return EXIT_OK


def cmd_ou_fit(args) -> int:
    src = Path(args.series)
    ts, vals = read_series(src)
    if args.dt is not None:
        dt = args.dt / 86400.0
    else:
        steps = np.diff(ts)
        if steps.size == 0 or np.any(steps != steps[0]):
            raise DataError("series is not uniformly sampled; pass --dt")
        dt = steps[0] / 86_400_000.0
    x = np.log(vals) if args.log else vals
    man = RunManifest("ou-fit", {"series_sha256": _sha256(src), "dt_days": dt, "log": args.log})
    man.inputs.append(str(src))
    out = _out_dir(args)
    fit = fit_ou(x, dt)
    fit.to_json(man.add(out / "ou_fit.json"))
    man.write(out)
    print(f"lambda = {fit.lambda_hat:.6g}, m = {fit.m_hat:.6g}, eta = {fit.eta_hat:.6g}")
    return EXIT_OK


def cmd_solve(args) -> int:
    params = _params(args)
    man = RunManifest("solve", {"params": params.to_dict(), "n_steps": args.steps, "poisson_n": args.poisson_n})
    out = _out_dir(args)
    t0 = time.perf_counter()
    b = build_first_order(params, args.steps, args.poisson_n)
    man.timings["solve_seconds"] = time.perf_counter() - t0
    b.curve.to_csv(man.add(out / "z0.csv"))
    b.curve.gain_to_csv(man.add(out / "gain.csv"), params.kappa(params.factors.m1))
    b.phi0.to_csv(man.add(out / "phi0.csv"))
    man.add(out / "phi0.json")
    b.phi1.to_csv(man.add(out / "phi1.csv"))
    man.add(out / "phi1.json")
    b.layer.to_csv(man.add(out / "layer.csv"))
    fp = params.factors
    sd1 = fp.eta1 / np.sqrt(2 * fp.lambda1)
    sd2 = fp.eta2 / np.sqrt(2 * fp.lambda2)
    b.field.lattice_to_csv(man.add(out / "zbar1.csv"), np.linspace(0, params.T, 11),
                           fp.m1 + sd1 * np.linspace(-2, 2, 5), fp.m2 + sd2 * np.linspace(-2, 2, 5))
    man.checks["c_at_T"] = float(b.layer.c[-1])
    man.checks["z0_at_T"] = float(b.curve.values[-1])
    man.checks["coefficients"] = {
        "avg_kappa_neg": b.coeffs.avg_kappa_neg, "avg_sigma_pow": b.coeffs.avg_sigma_pow,
        "avg_phi0_over_kappa": b.coeffs.avg_phi0_over_kappa, "avg_phi1_over_kappa": b.coeffs.avg_phi1_over_kappa,
        "nodes": b.coeffs.nodes,
    }
    if params.phi == 1 and params.gamma > 0:
        err = float(np.abs(b.curve.values - z0_closed_form_phi1(params, b.coeffs, b.curve.times)).max())
        man.checks["phi1_closed_form_sup_error"] = err
    finite = all(np.all(np.isfinite(a)) for a in (b.curve.values, b.phi0.values, b.phi1.values, b.layer.c))
    man.checks["all_finite"] = bool(finite)
    (out / "params.json").write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")
    man.add(out / "params.json")
    man.write(out)
    print(f"z0(0) = {b.curve.values[0]:.10g}, c(0) = {b.layer.c[0]:.6g}; artifacts in {out}")
    return EXIT_OK


def cmd_hjb(args) -> int:
    params = _params(args, sweep_params)
    man = RunManifest("hjb", {"params": params.to_dict(), "mode": args.mode, "n": args.n, "width": args.width,
                              "steps": args.steps})
    out = _out_dir(args)
    grid = default_grid(params, args.mode, args.n, args.width)
    sol = solve_hjb(params, grid, args.steps, args.mode)
    cols = [c.ravel() for c in grid.mesh()]
    path = man.add(out / "z_t0.csv")
    header = ["y1", "y2"][: grid.dims] if args.mode == "2d" else (["y1"] if args.mode == "1d_kappa" else ["y2"])
    with path.open("w") as fh:
        fh.write(",".join(header + ["z"]) + "\n")
        for row in zip(*cols, sol.values[0]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    (out / "hjb.json").write_text(json.dumps(sol.meta, indent=2, sort_keys=True) + "\n")
    man.add(out / "hjb.json")
    man.write(out)
    print(f"solved {args.mode} on {grid.size} nodes, {args.steps} steps; z(0, mean) = "
          f"{sol.values[0][grid.size // 2]:.8g}")
    return EXIT_OK


def cmd_accuracy(args) -> int:
    eps = _float_list(args.eps)
    if len(eps) < 3:
        raise UsageError("need >= 3 epsilons")
    params = _params(args, sweep_params)
    delta = args.delta if args.delta is not None else 0.1 * params.T
    cfg = {"params": params.to_dict(), "eps": eps, "order": args.order, "mode": args.mode, "delta": delta,
           "n": args.n, "steps": args.steps}
    man = RunManifest("accuracy", cfg)
    out = _out_dir(args)
    res = accuracy_sweep(params, eps, args.order, delta, args.mode, n=args.n, n_time_steps=args.steps)
    seconds = res.meta.pop("seconds")
    man.timings["per_eps_seconds"] = seconds
    res.to_csv(man.add(out / "sweep.csv"))
    res.to_json(man.add(out / "sweep.json"))
    man.checks["fitted_slope"] = res.fitted_slope
    man.write(out)
    for row in res.rows():
        print("eps=%-8g error_order0=%.6e error_order1=%.6e" % row[:3])
    print(f"fitted slope (order {args.order}) = {res.fitted_slope:.4f}")
    if not res.monotone:
        print(f"warning: {res.meta['warning']}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = _params(args)
    exp = {}
    if args.experiment:
        exp = json.loads(Path(args.experiment).read_text())
    if args.paths is not None:
        exp["n_paths"] = args.paths
    if args.steps is not None:
        exp["n_steps"] = args.steps
    if args.seed is not None:
        exp["seed"] = args.seed
    if args.gammas is not None:
        exp["gammas"] = _float_list(args.gammas)
    if args.strategies is not None:
        exp["strategies"] = [s for s in args.strategies.split(",") if s]
    try:
        config = ExperimentConfig.from_dict(exp)
    except ValueError as exc:
        raise UsageError(str(exc))
    if config.n_paths < 1:
        raise UsageError("--paths must be >= 1")
    if args.solved:
        sm = Path(args.solved) / "manifest.json"
        if not sm.exists():
            raise DataError(f"missing solved artifacts in {args.solved}; run "
                            f"`fastexec solve --config <params> --out {args.solved}` first")
        solved = json.loads(sm.read_text())
        if solved.get("command") != "solve" or solved["config"]["params"] != params.to_dict():
            raise DataError(f"artifacts in {args.solved} were solved for different parameters; rerun "
                            f"`fastexec solve --out {args.solved}` with this config")
    man = RunManifest("simulate", {"params": params.to_dict(), "experiment": config.to_dict()}, config.seed)
    out = _out_dir(args)
    report = run_experiment(params, config, threads=_threads(args))
    report.to_json(man.add(out / "report.json"))
    if args.per_path:
        report.per_path_csv(man.add(out / "paths.csv"))
    report.trajectories_csv(man.add(out / "trajectories.csv"))
    man.write(out)
    for row in report.aggregate["comparisons"]:
        print(f"gamma={row['gamma']:<8g} {row['strategy']:>11} vs {row['benchmark']}@{row['benchmark_gamma']:g}: "
              f"{row['mean_bps']:+.6g} bps (se {row['se_bps']:.3g}), improvement {row['improvement_rate']:.4f}, "
              f"P(X>)={row['p_cash_higher']:.4f}, P(Q<)={row['p_inventory_lower']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fastexec", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=None, help="worker cap (default: $EXEC_FAST_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--config", help="JSON/YAML parameter file")
        p.add_argument("--param", action="append", metavar="KEY=VALUE", help="override one parameter")

    p = sub.add_parser("synth-lob", help="write a synthetic power-law LOB file")
    p.add_argument("--kappa", type=float, default=0.38)
    p.add_argument("--phi", type=float, default=0.2833)
    p.add_argument("--price", type=float, default=16676.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--interval-ms", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_lob)

    p = sub.add_parser("impact-fit", help="bagged power-law fit and rolling kappa")
    p.add_argument("--lob", required=True)
    p.add_argument("--M", type=int, default=20)
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--w", type=float, default=1.0, help="rolling lookback in seconds")
    p.add_argument("--grid", choices=("boundaries", "full"), default="boundaries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impact_fit)

    p = sub.add_parser("tsrv", help="TSRV volatility path from a ts_ms,value price series")
    p.add_argument("--prices", required=True)
    p.add_argument("--delta", type=float, default=60.0, help="lookback in seconds")
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--omega2", type=float, default=None)
    p.add_argument("--omega-window", default=None, help="start_ms,end_ms for the omega^2 estimate")
    p.add_argument("--no-adjust", action="store_true", help="skip the small-sample TSRV factor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tsrv)

    p = sub.add_parser("ou-fit", help="ARMA(1,1) fit mapped to OU parameters")
    p.add_argument("--series", required=True)
    p.add_argument("--dt", type=float, default=None, help="sampling step in seconds (default: inferred)")
    p.add_argument("--log", action="store_true", help="fit the log of the series (exp-OU)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ou_fit)

    p = sub.add_parser("solve", help="leading-order curve, correctors and boundary layer")
    model_args(p)
    p.add_argument("--steps", type=int, default=4096)
    p.add_argument("--poisson-n", type=int, default=201)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("hjb", help="finite-difference solution of the full PDE")
    model_args(p)
    p.add_argument("--mode", choices=("1d_kappa", "1d_sigma", "2d"), default="1d_kappa")
    p.add_argument("--n", type=int, default=201)
    p.add_argument("--width", type=float, default=6.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hjb)

    p = sub.add_parser("simulate", help="Monte Carlo strategy comparison")
    model_args(p)
    p.add_argument("--experiment", help="experiment JSON (gammas, strategies, n_paths, n_steps, seed, init)")
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--gammas", default=None)
    p.add_argument("--strategies", default=None, help=f"subset of {','.join(STRATEGIES)}")
    p.add_argument("--solved", default=None, help="directory written by `fastexec solve` to validate against")
    p.add_argument("--per-path", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("accuracy", help="epsilon sweep against the PDE solver")
    model_args(p)
    p.add_argument("--order", type=int, choices=(0, 1), default=0)
    p.add_argument("--eps", default="0.1,0.05,0.025")
    p.add_argument("--mode", choices=("1d_kappa", "1d_sigma", "2d"), default="1d_kappa")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--n", type=int, default=201)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_accuracy)
    return ap


NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, StabilityError, RuntimeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParameterError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining value errors are invalid inputs (grid too small, bad shapes)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
