"""Model parameters, clamped liquidity/volatility maps and averages against the
stationary law of the two-factor Ornstein-Uhlenbeck driver."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

CONFIG_KEYS = (
    "phi", "gamma", "A", "T", "epsilon",
    "kappa_lo", "kappa_hi", "sigma_lo", "sigma_hi",
    "lambda1", "lambda2", "m1", "m2", "eta1", "eta2", "rho",
)

DEFAULT_QUAD_NODES = 64


class ParameterError(ValueError):
    """Raised when a parameter record violates its invariants."""


@dataclass(frozen=True)
class OUFactorParams:
    """Two-factor OU driver ``dy_i = lambda_i (m_i - y_i) dt + eta_i dB_i`` (epsilon = 1 scale)."""

    lambda1: float
    lambda2: float
    m1: float
    m2: float
    eta1: float
    eta2: float
    rho: float = 0.0

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ParameterError("mean-reversion speeds must be positive")
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ParameterError("diffusion coefficients must be positive")
        if not abs(self.rho) < 1:
            raise ParameterError("correlation must satisfy |rho| < 1")

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2])

    @property
    def means(self) -> np.ndarray:
        return np.array([self.m1, self.m2])

    @property
    def etas(self) -> np.ndarray:
        return np.array([self.eta1, self.eta2])


@dataclass(frozen=True)
class ModelParams:
    phi: float
    gamma: float
    A: float
    T: float
    epsilon: float
    kappa_lo: float
    kappa_hi: float
    sigma_lo: float
    sigma_hi: float
    factors: OUFactorParams

    def __post_init__(self):
        if not 0 < self.phi <= 1:
            raise ParameterError("phi must lie in (0, 1]")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not self.A > 0:
            raise ParameterError("terminal penalty A must be positive")
        if not self.T > 0:
            raise ParameterError("horizon T must be positive")
        if not 0 < self.kappa_lo <= self.kappa_hi:
            raise ParameterError("need 0 < kappa_lo <= kappa_hi")
        if not self.sigma_lo <= self.sigma_hi:
            raise ParameterError("need sigma_lo <= sigma_hi")
        if not self.gamma >= 0:
            raise ParameterError("gamma must be non-negative")

    def kappa(self, y1):
        return kappa_map(y1, self)

    def sigma(self, y2):
        return sigma_map(y2, self)

    def with_(self, **changes) -> "ModelParams":
        """Copy with top-level or factor fields replaced."""
        factor_keys = {k: changes.pop(k) for k in list(changes) if k in OUFactorParams.__dataclass_fields__}
        factors = replace(self.factors, **factor_keys) if factor_keys else self.factors
        return replace(self, factors=factors, **changes)

    def to_dict(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k != "factors"}
        flat.update(asdict(self.factors))
        return {k: float(flat[k]) for k in CONFIG_KEYS}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        missing = [k for k in CONFIG_KEYS if k not in data]
        if missing:
            raise ParameterError(f"missing config keys: {', '.join(missing)}")
        unknown = sorted(set(data) - set(CONFIG_KEYS))
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        factors = OUFactorParams(**{k: float(data[k]) for k in OUFactorParams.__dataclass_fields__})
        top = {k: float(data[k]) for k in CONFIG_KEYS if k not in OUFactorParams.__dataclass_fields__}
        return cls(factors=factors, **top)


def reference_params(**overrides) -> ModelParams:
    """Reference BTCUSDT calibration: clamp bounds, factor dynamics, exponent and epsilon.

    ``A`` is not reported alongside the simulation tables; 2.4 reproduces the
    reported leading-order terminal inventory fraction (about 0.5%).
    """
    base = dict(
        phi=0.2833, gamma=0.0, A=2.4, T=0.25, epsilon=0.0008,
        kappa_lo=0.01, kappa_hi=1.1, sigma_lo=2.0, sigma_hi=7.0,
        lambda1=1905.2180, lambda2=1279.7954, m1=0.3782, m2=4.7810,
        eta1=4.0134, eta2=19.0326, rho=0.2096,
    )
    base.update(overrides)
    return ModelParams.from_dict(base)


def load_params(path) -> ModelParams:
    """Read a JSON (or YAML, by suffix) parameter file with the flat key set."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return ModelParams.from_dict(data)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


def kappa_map(y1, params: ModelParams):
    """Impact coefficient: the factor clamped to ``[kappa_lo, kappa_hi]``."""
    return np.clip(y1, params.kappa_lo, params.kappa_hi)


def sigma_map(y2, params: ModelParams):
    """Volatility: ``exp`` of the factor clamped to ``[sigma_lo, sigma_hi]``."""
    return np.exp(np.clip(y2, params.sigma_lo, params.sigma_hi))


@dataclass(frozen=True)
class InvariantGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def sqrt_cov(self) -> np.ndarray:
        """Symmetric square root of the covariance."""
        w, v = np.linalg.eigh(self.cov)
        return (v * np.sqrt(w)) @ v.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n)


def stationary_covariance(factors: OUFactorParams, rtol: float = 1e-12) -> InvariantGaussian:
    """Stationary law of the OU driver; covariance solves ``Lam A + A Lam = eta eta^T``."""
    l1, l2 = factors.lambda1, factors.lambda2
    e1, e2, rho = factors.eta1, factors.eta2, factors.rho
    c12 = rho * e1 * e2 / (l1 + l2)
    cov = np.array([[e1 ** 2 / (2 * l1), c12], [c12, e2 ** 2 / (2 * l2)]])
    lam = np.diag([l1, l2])
    vol = np.array([[e1, 0.0], [rho * e2, np.sqrt(1 - rho ** 2) * e2]])
    target = vol @ vol.T
    resid = np.abs(lam @ cov + cov @ lam - target).max()
    if resid > rtol * np.abs(target).max():
        raise ArithmeticError(f"Lyapunov residual {resid:.3e} exceeds tolerance")
    return InvariantGaussian(mean=factors.means.copy(), cov=cov)


def marginal(gauss: InvariantGaussian, axis: int) -> tuple[float, float]:
    """Mean and standard deviation of one coordinate."""
    return float(gauss.mean[axis]), float(np.sqrt(gauss.cov[axis, axis]))


def _gh(n: int):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / np.sqrt(2 * np.pi)


def pi_average(f: Callable, gauss: InvariantGaussian, nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Tensor Gauss-Hermite average of ``f(y1, y2)`` under ``gauss``.

    Nodes are decorrelated with the symmetric square root of the covariance.
    """
    if nodes < 2:
        raise ValueError("need at least 2 quadrature nodes per axis")
    x, w = _gh(nodes)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    S = gauss.sqrt_cov()
    y1 = gauss.mean[0] + S[0, 0] * X1 + S[0, 1] * X2
    y2 = gauss.mean[1] + S[1, 0] * X1 + S[1, 1] * X2
    vals = np.broadcast_to(np.asarray(f(y1, y2), dtype=float), y1.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FloatingPointError(
            f"non-finite integrand at {bad.sum()} nodes, first at y=({y1[i, j]:.6g}, {y2[i, j]:.6g})"
        )
    return float(np.sum(W * vals))


def pi_average_1d(f: Callable, mean: float, sd: float, nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Gauss-Hermite average of ``f(y)`` under N(mean, sd^2)."""
    x, w = _gh(nodes)
    vals = np.asarray(f(mean + sd * x), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite integrand at quadrature nodes")
    return float(np.dot(w, vals))


@dataclass(frozen=True)
class AveragedCoefficients:
    avg_kappa_neg: float
    avg_sigma_pow: float
    avg_phi0_over_kappa: float = 0.0
    avg_phi1_over_kappa: float = 0.0
    nodes: int = DEFAULT_QUAD_NODES
    meta: dict = field(default_factory=dict, compare=False)


def base_averages(params: ModelParams, nodes: int = DEFAULT_QUAD_NODES) -> AveragedCoefficients:
    """``<kappa^(-1/phi)>`` and ``<sigma^(1+phi)>``; the Poisson brackets are left at zero."""
    gauss = stationary_covariance(params.factors)
    p = params.phi
    m1, s1 = marginal(gauss, 0)
    m2, s2 = marginal(gauss, 1)
    k_neg = pi_average_1d(lambda y: kappa_map(y, params) ** (-1 / p), m1, s1, nodes)
    s_pow = pi_average_1d(lambda y: sigma_map(y, params) ** (1 + p), m2, s2, nodes)
    return AveragedCoefficients(k_neg, s_pow, nodes=nodes)


def averaged_coefficients(params: ModelParams, phi0, phi1, nodes: int = DEFAULT_QUAD_NODES,
                          coverage_sd: float = 5.0) -> AveragedCoefficients:
    """All four Pi-averages entering the leading-order ODE and the boundary layer.

    ``phi0`` lives on a y1 grid and ``phi1`` on a y2 grid (1D ``PoissonSolution``).
    Quadrature nodes beyond a grid edge take the edge value; the grids must
    cover ``coverage_sd`` stationary standard deviations of their factor.
    """
    gauss = stationary_covariance(params.factors)
    for sol, axis, name in ((phi0, 0, "phi0"), (phi1, 1, "phi1")):
        m, s = marginal(gauss, axis)
        lo, hi = sol.grid.lo[0], sol.grid.hi[0]
        if lo > m - coverage_sd * s * (1 - 1e-9) or hi < m + coverage_sd * s * (1 - 1e-9):
            raise ValueError(
                f"{name} grid [{lo:.6g}, {hi:.6g}] does not cover +/-{coverage_sd} sd "
                f"around {m:.6g} (sd {s:.6g}); enlarge the Poisson grid"
            )
    base = base_averages(params, nodes)
    p = params.phi
    kn = lambda y1: kappa_map(y1, params) ** (-1 / p)
    a0 = pi_average(lambda y1, y2: phi0.interp(y1) * kn(y1), gauss, nodes)
    a1 = pi_average(lambda y1, y2: phi1.interp(y2) * kn(y1), gauss, nodes)
    return AveragedCoefficients(base.avg_kappa_neg, base.avg_sigma_pow, a0, a1, nodes=nodes)


def constant_coefficients(kappa: float, sigma: float, phi: float) -> AveragedCoefficients:
    """Averages for frozen liquidity/volatility (the Almgren-Chriss benchmark)."""
    return AveragedCoefficients(kappa ** (-1 / phi), sigma ** (1 + phi))


def ou_transition(factors: OUFactorParams, dt: float, epsilon: float = 1.0):
    """Exact transition of the fast OU driver over ``dt``.

    Returns ``(decay, cov)``: ``y' = m + decay * (y - m) + N(0, cov)`` with speeds
    ``lambda/epsilon`` and diffusion ``eta/sqrt(epsilon)``.
    """
    lam = factors.lambdas / epsilon
    decay = np.exp(-lam * dt)
    e1, e2, rho = factors.eta1, factors.eta2, factors.rho
    corr = np.array([[1.0, rho], [rho, 1.0]])
    etas = np.array([e1, e2])
    s = lam[:, None] + lam[None, :]
    # -expm1 keeps accuracy for tiny lambda dt / epsilon
    cov = corr * np.outer(etas, etas) / epsilon * (-np.expm1(-s * dt)) / s
    return decay, cov
