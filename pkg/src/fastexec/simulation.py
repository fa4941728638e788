"""Seeded Monte Carlo of factors, price, inventory and cash under the feedback strategies.

Each path owns a Philox stream keyed by ``(seed, path index)`` and paths are
processed in fixed-size chunks, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .first_order import FirstOrderBundle, NegativityError, build_first_order
from .leading_order import Z0Curve, ac_curve
from .model import ModelParams, kappa_map, ou_transition, sigma_map

STRATEGIES = ("ac", "order0", "order1", "order1_mean")
DEFAULT_STRATEGIES = ("ac", "order0", "order1")
CHUNK = 500


@dataclass(frozen=True)
class InitialState:
    X0: float = 0.0
    Q0: float = 10000.0
    S0: float = 16676.0
    y0: tuple = (0.3782, 4.7810)

    @classmethod
    def from_dict(cls, d: dict) -> "InitialState":
        return cls(float(d.get("X0", 0.0)), float(d.get("Q0", 10000.0)), float(d.get("S0", 16676.0)),
                   tuple(float(v) for v in d.get("y0", (0.3782, 4.7810))))

    def to_dict(self) -> dict:
        return {"X0": self.X0, "Q0": self.Q0, "S0": self.S0, "y0": list(self.y0)}


@dataclass
class PathBundle:
    times: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    kappa: np.ndarray
    sigma: np.ndarray
    S: np.ndarray
    init: InitialState
    path_index: np.ndarray
    Q: dict = field(default_factory=dict)
    X: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]


def path_rng(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path)])))


def simulate_paths(params: ModelParams, init: InitialState, n_steps: int, n_paths: int, seed: int,
                   first_path: int = 0) -> PathBundle:
    """Factor and price paths for path indices ``first_path .. first_path + n_paths - 1``.

    Factors move by the exact joint OU transition; the price is an arithmetic
    Brownian motion with volatility ``sigma(y2)`` frozen over each step and noise
    independent of the factor noise.
    """
    if n_steps < 100:
        raise ValueError("n_steps must be at least 100")
    if not np.all(np.isfinite(init.y0)):
        raise ValueError("initial factor values must be finite")
    T = params.T
    dt = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    idx = np.arange(first_path, first_path + n_paths)
    noise = np.stack([path_rng(seed, i).standard_normal((n_steps, 3)) for i in idx]) if n_paths else np.zeros((0, n_steps, 3))
    fp = params.factors
    decay, cov = ou_transition(fp, dt, params.epsilon)
    chol = np.linalg.cholesky(cov) if np.all(np.diag(cov) > 0) else np.zeros((2, 2))
    fac = noise[..., :2] @ chol.T
    ys = []
    for k, m in enumerate((fp.m1, fp.m2)):
        # x_{j+1} = decay x_j + e_j, x = y - m
        e = np.concatenate([np.zeros((n_paths, 1)), fac[..., k]], axis=1)
        x0 = np.full((n_paths, 1), init.y0[k] - m)
        x, _ = lfilter([1.0], [1.0, -decay[k]], e[:, 1:], axis=1, zi=decay[k] * x0)
        ys.append(m + np.concatenate([x0, x], axis=1))
    y1, y2 = ys
    sig = sigma_map(y2, params)
    dS = sig[:, :-1] * np.sqrt(dt) * noise[..., 2]
    S = init.S0 + np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dS, axis=1)], axis=1)
    return PathBundle(times, y1, y2, kappa_map(y1, params), sig, S, init, idx)


@dataclass
class StrategyInputs:
    """Time-aligned inputs for one risk-aversion level; curves share the simulation grid."""

    params: ModelParams
    ac: Z0Curve
    first: FirstOrderBundle

    @classmethod
    def build(cls, params: ModelParams, n_steps: int, poisson_n: int = 201) -> "StrategyInputs":
        return cls(params, ac_curve(params, n_steps), build_first_order(params, n_steps, poisson_n))


def _gains(bundle: PathBundle, strategy: str, inputs: StrategyInputs, clamp_count: list | None = None):
    """Feedback gains ``-nu/q`` at the left endpoint of each step, shape ``(paths, n_steps)``."""
    params = inputs.params
    p = params.phi
    t = bundle.times[:-1]
    k = bundle.kappa[:, :-1]
    if strategy == "ac":
        z = inputs.ac(t)
        return np.broadcast_to((-z / params.factors.m1) ** (1 / p), k.shape)
    fo = inputs.first
    if strategy == "order0":
        z = fo.curve(t)[None, :]
        return (-z / k) ** (1 / p)
    fld = fo.field
    _, slope, base = fld.time_parts(t)
    if strategy == "order1_mean":
        # Pi-average of zbar1 over the factors: the correctors have zero mean
        return (-base[None, :] / k) ** (1 / p)
    if strategy != "order1":
        raise ValueError(f"unknown strategy {strategy!r}")
    y1, y2 = bundle.y1[:, :-1], bundle.y2[:, :-1]
    g0, g1 = fld.phi0.grid, fld.phi1.grid
    if clamp_count is not None:
        clamp_count[0] += int(np.count_nonzero((y1 < g0.lo[0]) | (y1 > g0.hi[0])))
        if params.gamma:
            clamp_count[0] += int(np.count_nonzero((y2 < g1.lo[0]) | (y2 > g1.hi[0])))
    z = base[None, :] + slope[None, :] * fld.phi0.interp(y1)
    if params.gamma:
        z = z + fld.epsilon * params.gamma * fld.phi1.interp(y2)
    if np.any(z >= 0):
        raise NegativityError("correction breaks negativity: zbar1 >= 0 on a simulated path")
    return (-z / k) ** (1 / p)


def run_strategy(bundle: PathBundle, strategy: str, inputs: StrategyInputs, name: str | None = None,
                 keep_paths: bool = True, clamp_count: list | None = None, overshoot_count: list | None = None):
    """Explicit Euler for inventory and cash under one feedback rule.

    ``nu_k = -G_k Q_k``, ``Q_{k+1} = Q_k + nu_k dt`` and
    ``X_{k+1} = X_k - (S_k nu_k + kappa_k |nu_k|^(1+phi)) dt``.
    Returns terminal ``(X_T, Q_T)``; full paths are stored on the bundle when
    ``keep_paths``.
    """
    params = inputs.params
    dt = params.T / (bundle.times.size - 1)
    G = _gains(bundle, strategy, inputs, clamp_count)
    if not np.all(np.isfinite(G)):
        step = int(np.argwhere(~np.isfinite(G))[0][1])
        raise FloatingPointError(f"non-finite rate at step {step}")
    factor = G * dt
    if overshoot_count is not None:
        overshoot_count[0] += int(np.count_nonzero(factor >= 1))
    if factor.size and factor.max() >= 1:
        warnings.warn(f"per-step liquidation factor reaches {factor.max():.3g} >= 1; "
                      "increase n_steps to keep inventory sign", RuntimeWarning, stacklevel=2)
    Q0 = bundle.init.Q0
    Q = Q0 * np.concatenate([np.ones((bundle.n_paths, 1)), np.cumprod(1 - factor, axis=1)], axis=1)
    nu = -G * Q[:, :-1]
    spend = (bundle.S[:, :-1] * nu + bundle.kappa[:, :-1] * np.abs(nu) ** (1 + params.phi)) * dt
    X = bundle.init.X0 - np.concatenate([np.zeros((bundle.n_paths, 1)), np.cumsum(spend, axis=1)], axis=1)
    if keep_paths:
        key = name or strategy
        bundle.Q[key] = Q
        bundle.X[key] = X
    return X[:, -1].copy(), Q[:, -1].copy()


def terminal_wealth(X_T, Q_T, S_T, A: float, phi: float):
    """Liquidation-adjusted wealth ``X_T + Q_T (S_T - A |Q_T|^phi sgn Q_T)``."""
    return X_T + Q_T * (S_T - A * np.abs(Q_T) ** phi * np.sign(Q_T))


def _stats(x):
    n = x.size
    mean = float(np.mean(x)) if n else float("nan")
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    return mean, sd, sd / np.sqrt(n) if n > 1 else 0.0


def compare(a: dict, b: dict, S_T, A: float, phi: float) -> dict:
    """Relative performance of run ``a`` against benchmark run ``b`` (dicts with ``X_T``, ``Q_T``)."""
    Wa = terminal_wealth(a["X_T"], a["Q_T"], S_T, A, phi)
    Wb = terminal_wealth(b["X_T"], b["Q_T"], S_T, A, phi)
    ok = Wb > 0
    rel = (Wa[ok] - Wb[ok]) / Wb[ok] * 1e4
    mean, sd, se = _stats(rel)
    return {
        "mean_bps": mean, "sd_bps": sd, "se_bps": se,
        "ci95_bps": [mean - 1.96 * se, mean + 1.96 * se],
        "improvement_rate": float(np.mean(rel > 0)) if rel.size else 0.0,
        "p_cash_higher": float(np.mean(a["X_T"] > b["X_T"])),
        "p_inventory_lower": float(np.mean(a["Q_T"] < b["Q_T"])),
        "excluded_paths": int((~ok).sum()),
    }


def strategy_summary(run: dict, init: InitialState) -> dict:
    return {
        "mean_cash_fraction": float(np.mean(run["X_T"]) / (init.Q0 * init.S0)) if init.Q0 else float("nan"),
        "mean_inventory_fraction": float(np.mean(run["Q_T"]) / init.Q0) if init.Q0 else float("nan"),
        "mean_abs_inventory": float(np.mean(np.abs(run["Q_T"]))),
        "se_abs_inventory": _stats(np.abs(run["Q_T"]))[2],
    }


@dataclass(frozen=True)
class ExperimentConfig:
    gammas: tuple = (0.0,)
    strategies: tuple = DEFAULT_STRATEGIES
    n_paths: int = 10000
    n_steps: int = 5000
    seed: int = 7
    init: InitialState = InitialState()
    poisson_n: int = 201

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"gammas", "strategies", "n_paths", "n_steps", "seed", "init", "poisson_n"}
        if unknown:
            raise ValueError(f"unknown experiment keys: {', '.join(sorted(unknown))}")
        strategies = tuple(d.get("strategies", DEFAULT_STRATEGIES))
        bad = set(strategies) - set(STRATEGIES)
        if bad:
            raise ValueError(f"unknown strategies: {', '.join(sorted(bad))}")
        return cls(
            gammas=tuple(float(g) for g in d.get("gammas", (0.0,))),
            strategies=strategies,
            n_paths=int(d.get("n_paths", 10000)),
            n_steps=int(d.get("n_steps", 5000)),
            seed=int(d.get("seed", 7)),
            init=InitialState.from_dict(d.get("init", {})),
            poisson_n=int(d.get("poisson_n", 201)),
        )

    def to_dict(self) -> dict:
        return {"gammas": list(self.gammas), "strategies": list(self.strategies), "n_paths": self.n_paths,
                "n_steps": self.n_steps, "seed": self.seed, "init": self.init.to_dict(), "poisson_n": self.poisson_n}


@dataclass
class SimReport:
    config: dict
    params: dict
    digest: str
    terminal: dict  # label -> {"X_T": array, "Q_T": array}
    S_T: np.ndarray
    aggregate: dict
    sample_paths: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        doc = {"config": self.config, "params": self.params, "digest": self.digest, "aggregate": self.aggregate}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def per_path_csv(self, path) -> None:
        """``path,strategy,X_T,Q_T,W`` rows in path order."""
        A, phi = self.params["A"], self.params["phi"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "strategy", "X_T", "Q_T", "W"])
            for label in sorted(self.terminal):
                run = self.terminal[label]
                W = terminal_wealth(run["X_T"], run["Q_T"], self.S_T, A, phi)
                for i, (x, q, v) in enumerate(zip(run["X_T"], run["Q_T"], W)):
                    w.writerow([i, label, repr(float(x)), repr(float(q)), repr(float(v))])

    def trajectories_csv(self, path) -> None:
        """Plot-ready ``t,path,strategy,Q,X`` for the stored sample paths."""
        times = self.sample_paths.get("times")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "path", "strategy", "Q", "X"])
            for label in sorted(k for k in self.sample_paths if k != "times"):
                Q, X = self.sample_paths[label]
                for i in range(Q.shape[0]):
                    for t, q, x in zip(times, Q[i], X[i]):
                        w.writerow([repr(float(t)), i, label, repr(float(q)), repr(float(x))])


def config_digest(params: ModelParams, config: ExperimentConfig) -> str:
    blob = json.dumps({"params": params.to_dict(), "config": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _label(strategy: str, gamma: float) -> str:
    return f"{strategy}@gamma={gamma!r}"


def run_experiment(params: ModelParams, config: ExperimentConfig, threads: int = 1, n_sample_paths: int = 3,
                   inputs: dict | None = None) -> SimReport:
    """Run every (gamma, strategy) pair on shared innovations and aggregate the comparisons.

    For each gamma: order0 vs ac, order1 vs order0, order1 vs ac, and order0
    against the risk-neutral ac benchmark.
    """
    gammas = list(config.gammas)
    if inputs is None:
        inputs = {}
    for g in set(gammas) | ({0.0} if "ac" in config.strategies else set()):
        if g not in inputs:
            inputs[g] = StrategyInputs.build(params.with_(gamma=g), config.n_steps, config.poisson_n)
    runs = [(g, s) for g in gammas for s in config.strategies]
    if "ac" in config.strategies and 0.0 not in gammas:
        runs.append((0.0, "ac"))
    starts = list(range(0, config.n_paths, CHUNK))

    def work(start):
        n = min(CHUNK, config.n_paths - start)
        bundle = simulate_paths(params, config.init, config.n_steps, n, config.seed, start)
        clamps, overshoots = [0], [0]
        out = {}
        with warnings.catch_warnings():
            # counted and reported once in the aggregate instead
            warnings.simplefilter("ignore", RuntimeWarning)
            for g, s in runs:
                out[_label(s, g)] = run_strategy(bundle, s, inputs[g], _label(s, g), keep_paths=start == 0,
                                                 clamp_count=clamps, overshoot_count=overshoots)
        sample = {}
        if start == 0:
            m = min(n_sample_paths, n)
            sample = {k: (bundle.Q[k][:m].copy(), bundle.X[k][:m].copy()) for k in bundle.Q}
            sample["times"] = bundle.times
        return out, bundle.S[:, -1].copy(), (clamps[0], overshoots[0]), sample

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, starts))
    else:
        results = [work(s) for s in starts]

    terminal = {}
    for label in (results[0][0] if results else {}):
        terminal[label] = {
            "X_T": np.concatenate([r[0][label][0] for r in results]),
            "Q_T": np.concatenate([r[0][label][1] for r in results]),
        }
    S_T = np.concatenate([r[1] for r in results]) if results else np.zeros(0)
    clamped = sum(r[2][0] for r in results)
    overshoot = sum(r[2][1] for r in results)
    if overshoot:
        warnings.warn(f"{overshoot} strategy steps had a per-step liquidation factor >= 1; "
                      "inventory may change sign on those paths", RuntimeWarning, stacklevel=2)
    sample = results[0][3] if results else {}

    agg = {"strategies": {}, "comparisons": [], "clamped_factor_values": clamped,
           "steps_factor_ge_1": overshoot, "n_paths": config.n_paths}
    for label, run in terminal.items():
        agg["strategies"][label] = strategy_summary(run, config.init)
    pairs = []
    for g in gammas:
        have = set(config.strategies)
        if {"order0", "ac"} <= have:
            pairs.append((("order0", g), ("ac", g)))
            if g != 0.0:
                pairs.append((("order0", g), ("ac", 0.0)))
        if {"order1", "order0"} <= have:
            pairs.append((("order1", g), ("order0", g)))
        if {"order1", "ac"} <= have:
            pairs.append((("order1", g), ("ac", g)))
        if {"order1_mean", "order0"} <= have:
            pairs.append((("order1_mean", g), ("order0", g)))
    for (sa, ga), (sb, gb) in pairs:
        row = compare(terminal[_label(sa, ga)], terminal[_label(sb, gb)], S_T, params.A, params.phi)
        row.update({"strategy": sa, "gamma": ga, "benchmark": sb, "benchmark_gamma": gb})
        agg["comparisons"].append(row)
    return SimReport(config.to_dict(), params.to_dict(), config_digest(params, config), terminal, S_T, agg, sample)


def find_comparison(report: SimReport, strategy: str, benchmark: str, gamma: float, benchmark_gamma=None) -> dict:
    bg = gamma if benchmark_gamma is None else benchmark_gamma
    for row in report.aggregate["comparisons"]:
        if (row["strategy"], row["benchmark"], row["gamma"], row["benchmark_gamma"]) == (strategy, benchmark, gamma, bg):
            return row
    raise KeyError(f"no comparison {strategy} vs {benchmark} at gamma={gamma}")
