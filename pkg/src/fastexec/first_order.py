"""First-order correction of the value factor: correctors, boundary layer and feedback rate."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .leading_order import Z0Curve, solve_z0
from .model import (
    DEFAULT_QUAD_NODES,
    AveragedCoefficients,
    ModelParams,
    averaged_coefficients,
    kappa_map,
    pi_average_1d,
    stationary_covariance,
    marginal,
)
from .poisson import PoissonSolution, solve_corrector

log = logging.getLogger(__name__)


class NegativityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BoundaryLayer:
    times: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    c: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.times, self.c)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "b0", "b1", "c"])
            for row in zip(self.times, self.b0, self.b1, self.c):
                w.writerow([repr(float(v)) for v in row])


def layer_coefficients(z0, coeffs: AveragedCoefficients, params: ModelParams):
    """``b0`` and ``b1`` as functions of the leading-order value ``z0``."""
    p, g = params.phi, params.gamma
    a = np.abs(z0) ** (1 / p)
    b0 = -(1 + p) * a * coeffs.avg_kappa_neg
    b1 = (1 + p) * a * (p * z0 * a * coeffs.avg_phi0_over_kappa - g * coeffs.avg_phi1_over_kappa)
    return b0, b1


def boundary_layer(curve: Z0Curve, coeffs: AveragedCoefficients, params: ModelParams) -> BoundaryLayer:
    """Solve ``c' + b0 c + b1 = 0``, ``c(T) = 0`` backward with RK4 on the z0 time grid.

    Half-step values of z0 come from a cubic spline through the curve nodes.
    """
    t = curve.times
    spline = CubicSpline(t, curve.values)
    b0, b1 = layer_coefficients(curve.values, coeffs, params)
    c = np.zeros_like(t)

    def rhs(s, v):
        B0, B1 = layer_coefficients(spline(s), coeffs, params)
        return -B0 * v - B1

    for i in range(t.size - 1, 0, -1):
        h = t[i] - t[i - 1]
        s, v = t[i], c[i]
        k1 = -b0[i] * v - b1[i]
        k2 = rhs(s - h / 2, v - h / 2 * k1)
        k3 = rhs(s - h / 2, v - h / 2 * k2)
        k4 = -b0[i - 1] * (v - h * k3) - b1[i - 1]
        c[i - 1] = v - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    c[-1] = 0.0
    return BoundaryLayer(t.copy(), b0, b1, c)


def boundary_layer_trapezoid(curve: Z0Curve, coeffs: AveragedCoefficients, params: ModelParams,
                             refine: int = 16) -> np.ndarray:
    """Integral form ``c(t) = int_t^T exp(int_t^u b0) b1(u) du`` by the trapezoid rule.

    The z0 grid is refined ``refine`` times through a cubic spline; returns c on
    the original nodes.
    """
    t = curve.times
    fine = np.linspace(t[0], t[-1], (t.size - 1) * refine + 1)
    b0, b1 = layer_coefficients(CubicSpline(t, curve.values)(fine), coeffs, params)
    dt = np.diff(fine)
    B = np.concatenate([[0.0], np.cumsum(0.5 * dt * (b0[1:] + b0[:-1]))])
    # shift the exponent by its value at T to keep the weights bounded
    g = np.exp(B - B[-1]) * b1
    G = np.concatenate([[0.0], np.cumsum(0.5 * dt * (g[1:] + g[:-1]))])
    c = np.exp(B[-1] - B) * (G[-1] - G)
    return c[::refine]


@dataclass(frozen=True)
class FirstOrderField:
    z0curve: Z0Curve
    phi0: PoissonSolution
    phi1: PoissonSolution
    layer: BoundaryLayer
    epsilon: float
    phi: float
    gamma: float

    def spatial(self, y1, y2):
        """Corrector values ``phi0(y1)``, ``phi1(y2)`` with edge clamping (flagged in the log)."""
        g0, g1 = self.phi0.grid, self.phi1.grid
        y1 = np.asarray(y1, float)
        y2 = np.asarray(y2, float)
        if np.any((y1 < g0.lo[0]) | (y1 > g0.hi[0]) | (y2 < g1.lo[0]) | (y2 > g1.hi[0])):
            log.warning("factor value outside the corrector grid; clamped to the grid edge")
        return self.phi0.interp(y1), self.phi1.interp(y2)

    def time_parts(self, t):
        """``(z0(t), eps * phi |z0|^(1+1/phi), z0(t) + eps * c(t))`` for fast repeated evaluation."""
        z0 = self.z0curve(t)
        slope = self.epsilon * self.phi * np.abs(z0) ** (1 + 1 / self.phi)
        return z0, slope, z0 + self.epsilon * self.layer(t)

    def __call__(self, t, y1, y2):
        return zbar1(t, (y1, y2), self)

    def lattice_to_csv(self, path, times, y1s, y2s) -> None:
        """Sample ``zbar1`` on a ``(t, y1, y2)`` lattice: ``t,y1,y2,zbar1``."""
        T, Y1, Y2 = np.meshgrid(times, y1s, y2s, indexing="ij")
        vals = zbar1(T, (Y1, Y2), self)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y1", "y2", "zbar1"])
            for row in zip(T.ravel(), Y1.ravel(), Y2.ravel(), vals.ravel()):
                w.writerow([repr(float(v)) for v in row])


def zbar1(t, y, field: FirstOrderField):
    """``z0(t) + eps (phi |z0|^(1+1/phi) phi0(y1) + gamma phi1(y2) + c(t))``."""
    f0, f1 = field.spatial(y[0], y[1])
    z0, slope, base = field.time_parts(t)
    return base + slope * f0 + field.epsilon * field.gamma * f1


def nu1(t, q, y, field: FirstOrderField, params: ModelParams):
    """First-order feedback rate ``-(-zbar1(t, y)/kappa(y1))^(1/phi) q``."""
    z = np.asarray(zbar1(t, y, field))
    if np.any(z >= 0):
        raise NegativityError("correction breaks negativity: zbar1 >= 0, epsilon is outside the asymptotic regime")
    return -(-z / kappa_map(y[0], params)) ** (1 / params.phi) * q


def center_under_pi(sol: PoissonSolution, mean: float, sd: float, nodes: int = DEFAULT_QUAD_NODES) -> PoissonSolution:
    """Copy of a 1D corrector shifted so its interpolant has zero Gauss-Hermite mean."""
    shift = pi_average_1d(sol.interp, mean, sd, nodes)
    return PoissonSolution(
        grid=sol.grid, values=sol.values - shift, residual_sup=sol.residual_sup, pi_mean=sol.pi_mean - shift,
        iterations=sol.iterations, multiplier=sol.multiplier, source_shift=sol.source_shift,
    )


@dataclass(frozen=True)
class FirstOrderBundle:
    """Everything the strategies need: coefficients, z0 curve, correctors, layer, field."""

    coeffs: AveragedCoefficients
    curve: Z0Curve
    phi0: PoissonSolution
    phi1: PoissonSolution
    layer: BoundaryLayer
    field: FirstOrderField


def build_first_order(params: ModelParams, n_steps: int = 4096, poisson_n: int = 201, width: float = 5.0,
                      nodes: int = DEFAULT_QUAD_NODES, method: str = "direct") -> FirstOrderBundle:
    """Solve both correctors, the averaged ODE and the boundary layer for ``params``.

    The correctors are shifted to zero Gauss-Hermite mean of their interpolants
    so that the terminal centering holds to quadrature precision.
    """
    gauss = stationary_covariance(params.factors)
    raw0 = solve_corrector("phi0", params, n=poisson_n, width=width, method=method)
    raw1 = solve_corrector("phi1", params, n=poisson_n, width=width, method=method)
    phi0 = center_under_pi(raw0, *marginal(gauss, 0), nodes)
    phi1 = center_under_pi(raw1, *marginal(gauss, 1), nodes)
    coeffs = averaged_coefficients(params, phi0, phi1, nodes)
    curve = solve_z0(params, coeffs, n_steps)
    layer = boundary_layer(curve, coeffs, params)
    field = FirstOrderField(curve, phi0, phi1, layer, params.epsilon, params.phi, params.gamma)
    return FirstOrderBundle(coeffs, curve, phi0, phi1, layer, field)
