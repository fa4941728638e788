"""Finite-difference solver for the full value-factor PDE

    dz/dt + (1/eps) L z + phi kappa^(-1/phi) |z|^(1+1/phi) - gamma sigma^(1+phi) = 0,  z(T) = -A,

used as ground truth for the asymptotic expansions, plus epsilon sweeps.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .leading_order import solve_z0
from .model import (
    AveragedCoefficients,
    ModelParams,
    OUFactorParams,
    kappa_map,
    ou_transition,
    sigma_map,
    stationary_covariance,
)
from .poisson import OU1D, FactorGrid, build_generator, solve_poisson_direct, stationary_weights
from .first_order import layer_coefficients, boundary_layer

MODES = ("1d_kappa", "1d_sigma", "2d")


class BracketError(ArithmeticError):
    pass


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class FactorProblem:
    """Discrete factor problem: generator, node coordinates and coefficient values."""

    factors: object
    grid: FactorGrid
    kappa: np.ndarray
    sigma: np.ndarray
    mode: str


def factor_problem(params: ModelParams, grid: FactorGrid, mode: str) -> FactorProblem:
    """Generator inputs and nodal kappa/sigma for one of the solver modes.

    ``1d_kappa`` freezes sigma at ``exp(m2)``; ``1d_sigma`` freezes kappa at ``m1``.
    """
    fp = params.factors
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "2d":
        if grid.dims != 2:
            raise ValueError("2d mode needs a 2D grid")
        Y1, Y2 = grid.mesh()
        return FactorProblem(fp, grid, kappa_map(Y1, params).ravel(), sigma_map(Y2, params).ravel(), mode)
    if grid.dims != 1:
        raise ValueError(f"{mode} mode needs a 1D grid")
    y = grid.axis(0)
    if mode == "1d_kappa":
        ou = OU1D(fp.lambda1, fp.m1, fp.eta1)
        return FactorProblem(ou, grid, kappa_map(y, params), np.full(y.size, sigma_map(fp.m2, params)), mode)
    ou = OU1D(fp.lambda2, fp.m2, fp.eta2)
    return FactorProblem(ou, grid, np.full(y.size, kappa_map(fp.m1, params)), sigma_map(y, params), mode)


def default_grid(params: ModelParams, mode: str, n: int = 201, width: float = 6.0) -> FactorGrid:
    gauss = stationary_covariance(params.factors)
    sd = gauss.sd
    if mode == "2d":
        return FactorGrid.around(gauss.mean, sd, n, width)
    k = 0 if mode == "1d_kappa" else 1
    return FactorGrid.around([gauss.mean[k]], [sd[k]], n, width)


def _explicit_envelope(kneg, spow, params, times):
    """Scalar constant-coefficient solution with the same explicit nonlinear step as the PDE solver."""
    p = params.phi
    u = np.empty(times.size)
    u[-1] = -params.A
    for i in range(times.size - 1, 0, -1):
        dt = times[i] - times[i - 1]
        u[i - 1] = u[i] + dt * (p * kneg * abs(u[i]) ** (1 + 1 / p) - params.gamma * spow)
    return u


@dataclass
class HJBGridSolution:
    times: np.ndarray
    grid: FactorGrid
    values: np.ndarray  # shape (len(times), grid.size)
    envelope: tuple
    meta: dict = field(default_factory=dict)

    def at(self, i: int) -> np.ndarray:
        return self.values[i].reshape(self.grid.shape)


def solve_hjb(params: ModelParams, grid: FactorGrid, n_time_steps: int, mode: str = "1d_kappa",
              scheme: str = "hybrid", bracket_tol: float = 1e-10) -> HJBGridSolution:
    """IMEX backward stepping ``(I - dt/eps L) z^n = z^{n+1} + dt N(z^{n+1})``.

    The generator is treated implicitly (one sparse LU for the whole run), the
    nonlinearity explicitly. Each step is checked against the constant-coefficient
    envelopes built from the extreme nodal kappa and sigma, which bound -z by
    discrete comparison.
    """
    prob = factor_problem(params, grid, mode)
    p, eps = params.phi, params.epsilon
    T = params.T
    times = np.linspace(0.0, T, n_time_steps + 1)
    dt = T / n_time_steps
    kneg = prob.kappa ** (-1 / p)
    spow = prob.sigma ** (1 + p)
    # -z is largest for the most liquid/most volatile corner and smallest for the opposite one
    upper = -_explicit_envelope(kneg.min(), spow.max(), params, times)
    lower = -_explicit_envelope(kneg.max(), spow.min(), params, times)
    lip = (1 + p) * kneg.max() * max(upper.max(), params.A) ** (1 / p)
    if dt * lip >= 0.5:
        need = int(np.ceil(2 * T * lip)) + 1
        raise StabilityError(f"explicit nonlinear step unstable: dt*Lip = {dt * lip:.3g} >= 0.5; "
                             f"use at least {need} time steps")
    L = build_generator(prob.factors, grid, scheme)
    lu = spla.splu(sp.csc_matrix(sp.identity(grid.size) - (dt / eps) * L))
    z = np.full(grid.size, -params.A)
    values = np.empty((times.size, grid.size))
    values[-1] = z
    src = params.gamma * spow
    for i in range(n_time_steps, 0, -1):
        z = lu.solve(z + dt * (p * kneg * np.abs(z) ** (1 + 1 / p) - src))
        lo_b, hi_b = lower[i - 1], upper[i - 1]
        tol = bracket_tol * max(1.0, hi_b)
        bad = (-z < lo_b - tol) | (-z > hi_b + tol) | (z >= 0)
        if bad.any():
            k = int(np.argmax(bad))
            raise BracketError(f"envelope violated at t={times[i - 1]:.6g}, node {k}: -z={-z[k]:.6g} "
                               f"outside [{lo_b:.6g}, {hi_b:.6g}]")
        values[i - 1] = z
    meta = {"mode": mode, "epsilon": eps, "n_time_steps": n_time_steps, "dt_lipschitz": dt * lip,
            "grid": {"lo": list(grid.lo), "hi": list(grid.hi), "n": list(grid.n)}, "scheme": scheme}
    return HJBGridSolution(times, grid, values, (lower, upper), meta)


@dataclass(frozen=True)
class DiscreteExpansion:
    """Leading and first-order approximations built from the discrete generator on one grid."""

    times: np.ndarray
    z0: np.ndarray
    c: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray
    coeffs: AveragedCoefficients

    def order0(self) -> np.ndarray:
        return np.repeat(self.z0[:, None], self.phi0.size, axis=1)

    def order1(self, params: ModelParams) -> np.ndarray:
        p, eps = params.phi, params.epsilon
        slope = p * np.abs(self.z0) ** (1 + 1 / p)
        spatial = slope[:, None] * self.phi0[None, :] + params.gamma * self.phi1[None, :]
        return self.z0[:, None] + eps * (spatial + self.c[:, None])


def discrete_expansion(params: ModelParams, grid: FactorGrid, mode: str, n_time_steps: int,
                       scheme: str = "hybrid") -> DiscreteExpansion:
    """Expansion whose averages use the invariant vector of the discrete generator.

    Against a finite-difference solution this isolates the epsilon-asymptotics
    from the spatial discretization error.
    """
    prob = factor_problem(params, grid, mode)
    p = params.phi
    L = build_generator(prob.factors, grid, scheme)
    pi = stationary_weights(L)
    kneg = prob.kappa ** (-1 / p)
    spow = prob.sigma ** (1 + p)
    K, S = float(pi @ kneg), float(pi @ spow)
    f0 = K - kneg
    f1 = spow - S
    phi0 = solve_poisson_direct(f0 - pi @ f0, prob.factors, grid, weights=pi, scheme=scheme).values.ravel()
    phi1 = solve_poisson_direct(f1 - pi @ f1, prob.factors, grid, weights=pi, scheme=scheme).values.ravel()
    coeffs = AveragedCoefficients(K, S, float(pi @ (phi0 * kneg)), float(pi @ (phi1 * kneg)))
    curve = solve_z0(params, coeffs, n_time_steps)
    layer = boundary_layer(curve, coeffs, params)
    return DiscreteExpansion(curve.times, curve.values, layer.c, phi0, phi1, coeffs)


def bulk_mask(params: ModelParams, grid: FactorGrid, mode: str, n_sd: float = 2.0) -> np.ndarray:
    gauss = stationary_covariance(params.factors)
    if mode == "2d":
        Y1, Y2 = grid.mesh()
        m = (np.abs(Y1 - gauss.mean[0]) <= n_sd * gauss.sd[0]) & (np.abs(Y2 - gauss.mean[1]) <= n_sd * gauss.sd[1])
        return m.ravel()
    k = 0 if mode == "1d_kappa" else 1
    return np.abs(grid.axis(0) - gauss.mean[k]) <= n_sd * gauss.sd[k] * (1 + 1e-12)


@dataclass
class SweepResult:
    eps: list
    error_order0: list
    error_order1: list
    slope_order0: float
    slope_order1: float
    order: int
    monotone: bool
    meta: dict

    @property
    def fitted_slope(self) -> float:
        return self.slope_order0 if self.order == 0 else self.slope_order1

    def rows(self):
        return [(e, a, b, self.fitted_slope) for e, a, b in zip(self.eps, self.error_order0, self.error_order1)]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "error_order0", "error_order1", "fitted_slope"])
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])

    def to_json(self, path) -> None:
        doc = {
            "eps": self.eps, "error_order0": self.error_order0, "error_order1": self.error_order1,
            "slope_order0": self.slope_order0, "slope_order1": self.slope_order1, "order": self.order,
            "monotone": self.monotone, "meta": self.meta,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def sweep_params(**overrides) -> ModelParams:
    """Moderate test problem for epsilon sweeps: smooth clamps away from the bulk, O(1) rates."""
    base = dict(
        phi=0.5, gamma=0.0, A=1.0, T=1.0, epsilon=0.1,
        kappa_lo=0.2, kappa_hi=3.0, sigma_lo=-3.0, sigma_hi=3.0,
        lambda1=10.0, lambda2=10.0, m1=1.0, m2=0.0, eta1=1.3416, eta2=1.3416, rho=0.0,
    )
    base.update(overrides)
    return ModelParams.from_dict(base)


def accuracy_sweep(params: ModelParams, eps_list, order: int = 0, delta: float | None = None,
                   mode: str = "1d_kappa", n: int = 201, width: float = 6.0, n_time_steps: int = 2000,
                   richardson: bool = True, n_sd: float = 2.0) -> SweepResult:
    """Sup-norm error of the order-0 and order-1 approximations against the PDE solution.

    Errors are taken over ``t <= T - delta`` and nodes within ``n_sd`` stationary
    standard deviations. With ``richardson`` the PDE solution is extrapolated
    from ``n_time_steps`` and ``2 n_time_steps`` to remove the first-order time
    error.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise ValueError("need >= 3 epsilons")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    if delta is None:
        delta = 0.1 * params.T
    if order == 1 and not delta > 0:
        raise ValueError("order 1 needs a positive terminal standoff delta")
    grid = default_grid(params, mode, n, width)
    bulk = bulk_mask(params, grid, mode, n_sd)
    e0, e1, timing = [], [], []
    for eps in eps_list:
        t0 = time.perf_counter()
        pe = params.with_(epsilon=eps)
        coarse = solve_hjb(pe, grid, n_time_steps, mode)
        if richardson:
            fine = solve_hjb(pe, grid, 2 * n_time_steps, mode)
            z = 2 * fine.values[::2] - coarse.values
        else:
            z = coarse.values
        exp = discrete_expansion(pe, grid, mode, n_time_steps)
        window = exp.times <= params.T - delta + 1e-12
        sub = np.ix_(window, bulk)
        e0.append(float(np.abs(z - exp.order0())[sub].max()))
        e1.append(float(np.abs(z - exp.order1(pe))[sub].max()))
        timing.append(time.perf_counter() - t0)
    errs = e0 if order == 0 else e1
    monotone = all(b < a for a, b in zip(errs, errs[1:]))
    meta = {"mode": mode, "delta": delta, "n_sd": n_sd, "n_time_steps": n_time_steps, "richardson": richardson,
            "grid": {"lo": list(grid.lo), "hi": list(grid.hi), "n": list(grid.n)}, "seconds": timing,
            "params": params.to_dict()}
    if not monotone:
        meta["warning"] = f"non-monotone error sequence {errs}"
    return SweepResult(eps_list, e0, e1, loglog_slope(eps_list, e0), loglog_slope(eps_list, e1),
                       order, monotone, meta)


@dataclass(frozen=True)
class ErgodicRow:
    eps: float
    estimate: float
    std_error: float
    bound: float


def ergodic_average_check(factors: OUFactorParams, g, eps_list, t0: float, T: float, y0, n_paths: int,
                          seed: int) -> list[ErgodicRow]:
    """Monte Carlo ``E[g(y_T)]`` from ``y_t0 = y0`` under exact OU transitions.

    ``bound`` is the conditional-mean bound for the linear test function
    ``y1 - m1`` plus two standard errors.
    """
    rows = []
    y0 = np.asarray(y0, float)
    for k, eps in enumerate(eps_list):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        decay, cov = ou_transition(factors, T - t0, eps)
        mean = factors.means + decay * (y0 - factors.means)
        draws = mean + rng.standard_normal((n_paths, 2)) @ np.linalg.cholesky(cov).T
        vals = np.asarray(g(draws[:, 0], draws[:, 1]), float)
        vals = np.broadcast_to(vals, (n_paths,))
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        bound = float(decay[0] * abs(y0[0] - factors.m1) + 2 * se)
        rows.append(ErgodicRow(float(eps), est, se, bound))
    return rows
