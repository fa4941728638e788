"""Leading-order value factor z0(t) from the averaged Riccati-type ODE and its feedback rate."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .model import AveragedCoefficients, ModelParams, constant_coefficients, kappa_map


class BracketViolation(ArithmeticError):
    pass


def stationary_level(params: ModelParams, coeffs: AveragedCoefficients) -> float:
    """Magnitude of the equilibrium of the z0 ODE: ``(gamma <s> / (phi <k>))^(phi/(1+phi))``."""
    p = params.phi
    return (params.gamma * coeffs.avg_sigma_pow / (p * coeffs.avg_kappa_neg)) ** (p / (p + 1))


def z0_rhs(z, params: ModelParams, coeffs: AveragedCoefficients):
    """Time derivative of z0: ``gamma <sigma^(1+phi)> - phi <kappa^(-1/phi)> |z|^(1+1/phi)``."""
    p = params.phi
    return params.gamma * coeffs.avg_sigma_pow - p * coeffs.avg_kappa_neg * np.abs(z) ** (1 + 1 / p)


@dataclass(frozen=True)
class Z0Curve:
    times: np.ndarray
    values: np.ndarray
    stationary_level: float
    coeffs: AveragedCoefficients
    phi: float
    A: float

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def to_csv(self, path) -> None:
        _write_columns(path, ["t", "z0"], [self.times, self.values])

    def gain_to_csv(self, path, kappa_ref: float) -> None:
        """``t,gain`` with gain ``(-z0/kappa_ref)^(1/phi)``."""
        _write_columns(path, ["t", "gain"], [self.times, (-self.values / kappa_ref) ** (1 / self.phi)])


def _write_columns(path, header, cols):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def solve_z0(params: ModelParams, coeffs: AveragedCoefficients, n_steps: int = 4096) -> Z0Curve:
    """Integrate the z0 ODE backward from ``z0(T) = -A`` with classical RK4 and a fixed step."""
    if n_steps < 16:
        raise ValueError("n_steps must be at least 16")
    if not (np.isfinite(coeffs.avg_kappa_neg) and np.isfinite(coeffs.avg_sigma_pow)):
        raise ValueError("averaged coefficients must be finite")
    T, A = params.T, params.A
    level = stationary_level(params, coeffs)
    lo, hi = min(A, level), max(A, level)
    slack = 1e-12 * hi
    times = np.linspace(0.0, T, n_steps + 1)
    h = T / n_steps
    # plain floats: this loop is the hot path of every parameter sweep
    g = float(params.gamma * coeffs.avg_sigma_pow)
    k = float(params.phi * coeffs.avg_kappa_neg)
    e = 1.0 + 1.0 / params.phi
    lo_b, hi_b = lo - slack, hi + slack
    z = [0.0] * (n_steps + 1)
    v = -float(A)
    z[-1] = v
    for i in range(n_steps, 0, -1):
        try:
            k1 = g - k * abs(v) ** e
            w = v - 0.5 * h * k1
            k2 = g - k * abs(w) ** e
            w = v - 0.5 * h * k2
            k3 = g - k * abs(w) ** e
            w = v - h * k3
            k4 = g - k * abs(w) ** e
            v = v - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        except OverflowError:
            v = float("inf")
        if not lo_b <= -v <= hi_b:
            raise BracketViolation(
                f"ODE bracket violation at t={times[i - 1]:.6g}: -z0={-v:.6g} outside [{lo:.6g}, {hi:.6g}]"
            )
        z[i - 1] = v
    z = np.array(z)
    return Z0Curve(times, z, level, coeffs, params.phi, A)


def z0_closed_form_gamma0(params: ModelParams, coeffs: AveragedCoefficients, t):
    """Risk-neutral solution ``-(A^(-1/phi) + <kappa^(-1/phi)> (T - t))^(-phi)``."""
    p = params.phi
    return -(params.A ** (-1 / p) + coeffs.avg_kappa_neg * (params.T - np.asarray(t))) ** (-p)


def z0_closed_form_phi1(params: ModelParams, coeffs: AveragedCoefficients, t):
    """Linear-impact (phi = 1) solution of the z0 ODE.

    With ``s = sqrt(gamma <sigma^2> / <1/kappa>)`` and ``zeta = sqrt(gamma <sigma^2> <1/kappa>)``
    the solution is ``-s (e^{2 zeta tau} + r) / (e^{2 zeta tau} - r)``, ``tau = T - t``,
    ``r = (A - s) / (A + s)``. ``r = 0`` (A = s) gives the stationary value.
    """
    if params.phi != 1:
        raise ValueError("closed form requires phi = 1")
    if params.gamma <= 0:
        raise ValueError("closed form requires gamma > 0")
    g = params.gamma * coeffs.avg_sigma_pow
    k = coeffs.avg_kappa_neg
    s = np.sqrt(g / k)
    zeta = np.sqrt(g * k)
    r = (params.A - s) / (params.A + s)
    tau = params.T - np.asarray(t, dtype=float)
    # divide through by e^{2 zeta tau} to stay finite for long horizons
    d = np.exp(-2 * zeta * tau)
    return -s * (1 + r * d) / (1 - r * d)


def z0_by_quadrature(params: ModelParams, coeffs: AveragedCoefficients, t: float) -> float:
    """Invert ``F(xi) = T - t`` with ``F(xi) = -int_{-A}^{xi} du / z0_rhs(u)`` (adaptive quad + root finding)."""
    tau = params.T - t
    A = params.A
    level = stationary_level(params, coeffs)
    if tau == 0 or level == A:
        return -A
    F = lambda xi: -quad(lambda u: 1.0 / z0_rhs(u, params, coeffs), -A, xi,
                         epsabs=1e-15, epsrel=1e-13, limit=500)[0]
    g = lambda xi: F(xi) - tau
    # F blows up at -level, so walk towards it until the root is bracketed
    for k in range(1, 200):
        b = -level + (level - A) * 2.0 ** -k
        if g(b) > 0:
            break
    else:
        raise ValueError("could not bracket F^-1")
    return brentq(g, -A, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def nu0(t, q, y, curve: Z0Curve, params: ModelParams):
    """Leading-order feedback rate ``-(-z0(t)/kappa(y1))^(1/phi) q``."""
    y1 = y[0]
    return -(-curve(t) / kappa_map(y1, params)) ** (1 / params.phi) * q


def ac_curve(params: ModelParams, n_steps: int = 4096) -> Z0Curve:
    """Benchmark curve with liquidity and volatility frozen at ``m1`` and ``exp(m2)``."""
    fp = params.factors
    return solve_z0(params, constant_coefficients(fp.m1, np.exp(fp.m2), params.phi), n_steps)


def nu_ac(t, q, curve: Z0Curve, params: ModelParams):
    """Almgren-Chriss-type benchmark rate ``-(-z_AC(t)/m1)^(1/phi) q``."""
    return -(-curve(t) / params.factors.m1) ** (1 / params.phi) * q
