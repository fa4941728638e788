"""Centered Poisson equations ``L phi = f``, ``<phi> = 0`` for OU generators on 1D/2D grids.

Two solvers are provided: a direct bordered solve (the production path) and the
shifted fixed-point iteration ``(L + eta) phi^{k+1} = f + eta phi^k``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from .model import (
    DEFAULT_QUAD_NODES,
    ModelParams,
    OUFactorParams,
    kappa_map,
    pi_average_1d,
    sigma_map,
    stationary_covariance,
)


class SourceNotCentered(ValueError):
    pass


class PoissonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OU1D:
    """Scalar OU generator ``L = 0.5 eta^2 d^2 + lam (m - y) d``."""

    lam: float
    m: float
    eta: float

    @property
    def sd(self) -> float:
        return self.eta / np.sqrt(2 * self.lam)


@dataclass(frozen=True)
class FactorGrid:
    lo: tuple
    hi: tuple
    n: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or len(self.lo) != len(self.n) or len(self.n) not in (1, 2):
            raise ValueError("grid must be 1D or 2D with matching lo/hi/n")
        for lo, hi, n in zip(self.lo, self.hi, self.n):
            if not hi > lo:
                raise ValueError("grid bounds must satisfy hi > lo")
            if n < 3 or n % 2 == 0:
                raise ValueError("node counts must be odd and >= 3 (center node on the mean)")

    @property
    def dims(self) -> int:
        return len(self.n)

    @property
    def spacing(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lo, self.hi, self.n))

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def shape(self) -> tuple:
        return tuple(self.n)

    def axis(self, k: int = 0) -> np.ndarray:
        return np.linspace(self.lo[k], self.hi[k], self.n[k])

    def mesh(self):
        if self.dims == 1:
            return (self.axis(0),)
        return tuple(np.meshgrid(self.axis(0), self.axis(1), indexing="ij"))

    @classmethod
    def around(cls, means: Sequence[float], sds: Sequence[float], n, width: float = 5.0) -> "FactorGrid":
        """Grid covering ``mean +/- width * sd`` per axis."""
        means = np.atleast_1d(means).astype(float)
        sds = np.atleast_1d(sds).astype(float)
        n = tuple(np.broadcast_to(np.atleast_1d(n), means.shape).astype(int).tolist())
        return cls(tuple((means - width * sds).tolist()), tuple((means + width * sds).tolist()), n)


def _axis_operator(lam, m, eta, y, h, scheme):
    """1D generator matrix with zero second derivative at the two boundary nodes."""
    n = y.size
    D = 0.5 * eta ** 2
    b = lam * (m - y)
    lower = np.zeros(n)  # coefficient on i-1
    upper = np.zeros(n)  # coefficient on i+1
    inner = slice(1, n - 1)
    bi = b[inner]
    diff = D / h ** 2
    if scheme == "central":
        central = np.ones(bi.size, bool)
    elif scheme == "upwind":
        central = np.zeros(bi.size, bool)
    elif scheme == "hybrid":
        # central differencing keeps non-negative off-diagonals while the cell Peclet number is <= 1
        central = np.abs(bi) * h <= 2 * D
    else:
        raise ValueError(f"unknown drift scheme {scheme!r}")
    lo_c = np.where(central, diff - bi / (2 * h), diff + np.maximum(-bi, 0) / h)
    up_c = np.where(central, diff + bi / (2 * h), diff + np.maximum(bi, 0) / h)
    lower[inner] = lo_c
    upper[inner] = up_c
    # boundary rows: drift only, one-sided towards the interior
    upper[0] = b[0] / h
    lower[-1] = -b[-1] / h
    diag = -(lower + upper)
    return sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], shape=(n, n), format="csr")


def build_generator(factors, grid: FactorGrid, scheme: str = "hybrid") -> sp.csr_matrix:
    """Finite-difference OU generator on ``grid`` (epsilon = 1 form).

    ``factors`` is an ``OU1D`` for 1D grids and ``OUFactorParams`` for 2D grids.
    Drift uses central differences where the cell Peclet number is at most one
    and upwinding elsewhere; the mixed derivative uses the centered cross stencil
    on interior nodes. Boundary rows carry no second derivative in the normal
    direction.
    """
    if grid.dims == 1:
        if not isinstance(factors, OU1D):
            raise TypeError("1D grid needs OU1D factors")
        return _axis_operator(factors.lam, factors.m, factors.eta, grid.axis(0), grid.spacing[0], scheme)
    if not isinstance(factors, OUFactorParams):
        raise TypeError("2D grid needs OUFactorParams")
    n1, n2 = grid.n
    h1, h2 = grid.spacing
    L1 = _axis_operator(factors.lambda1, factors.m1, factors.eta1, grid.axis(0), h1, scheme)
    L2 = _axis_operator(factors.lambda2, factors.m2, factors.eta2, grid.axis(1), h2, scheme)
    L = sp.kron(L1, sp.identity(n2)) + sp.kron(sp.identity(n1), L2)
    if factors.rho != 0.0:
        c = factors.rho * factors.eta1 * factors.eta2 / (4 * h1 * h2)
        I, J = np.meshgrid(np.arange(1, n1 - 1), np.arange(1, n2 - 1), indexing="ij")
        I, J = I.ravel(), J.ravel()
        rows = np.repeat(I * n2 + J, 4)
        di = np.tile([1, 1, -1, -1], I.size)
        dj = np.tile([1, -1, 1, -1], I.size)
        cols = (np.repeat(I, 4) + di) * n2 + np.repeat(J, 4) + dj
        vals = c * di * dj
        L = L + sp.csr_matrix((vals, (rows, cols)), shape=L.shape)
    return sp.csr_matrix(L)


def gaussian_weights(factors, grid: FactorGrid) -> np.ndarray:
    """Stationary Gaussian density at the nodes, normalized to a probability vector."""
    if grid.dims == 1:
        y = grid.axis(0)
        w = np.exp(-0.5 * ((y - factors.m) / factors.sd) ** 2)
    else:
        gauss = stationary_covariance(factors)
        Y1, Y2 = grid.mesh()
        d = np.stack([Y1 - gauss.mean[0], Y2 - gauss.mean[1]], axis=-1)
        prec = np.linalg.inv(gauss.cov)
        w = np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, prec, d)).ravel()
    return w / w.sum()


def stationary_weights(L: sp.spmatrix) -> np.ndarray:
    """Invariant probability vector of the discrete generator: ``pi^T L = 0``."""
    n = L.shape[0]
    ones = np.ones((n, 1))
    M = sp.bmat([[L.T, ones], [ones.T, None]], format="csc")
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi = spla.spsolve(M, rhs)[:n]
    return pi / pi.sum()


def interior_mask(grid: FactorGrid) -> np.ndarray:
    mask = np.zeros(grid.shape, bool)
    if grid.dims == 1:
        mask[1:-1] = True
    else:
        mask[1:-1, 1:-1] = True
    return mask.ravel()


@dataclass
class PoissonSolution:
    grid: FactorGrid
    values: np.ndarray
    residual_sup: float
    pi_mean: float
    iterations: int = 0
    multiplier: float = 0.0
    increments: list = field(default_factory=list)
    raw_means: list = field(default_factory=list)
    iterate_means: list = field(default_factory=list)
    source_shift: float = 0.0

    def interp(self, *y):
        """Evaluate off-grid by (bi)linear interpolation, holding edge values outside."""
        if self.grid.dims == 1:
            return np.interp(y[0], self.grid.axis(0), self.values)
        fn = RegularGridInterpolator((self.grid.axis(0), self.grid.axis(1)), self.values.reshape(self.grid.shape))
        y1 = np.clip(y[0], self.grid.lo[0], self.grid.hi[0])
        y2 = np.clip(y[1], self.grid.lo[1], self.grid.hi[1])
        y1, y2 = np.broadcast_arrays(y1, y2)
        return fn(np.stack([y1, y2], axis=-1))

    def metadata(self) -> dict:
        return {
            "residual_sup": self.residual_sup,
            "pi_mean": self.pi_mean,
            "iterations": self.iterations,
            "multiplier": self.multiplier,
            "source_shift": self.source_shift,
            "grid": {"lo": list(self.grid.lo), "hi": list(self.grid.hi), "n": list(self.grid.n)},
        }

    def to_csv(self, path) -> None:
        """Write ``y1[,y2],phi`` plus a JSON sidecar with diagnostics."""
        path = Path(path)
        cols = [c.ravel() for c in self.grid.mesh()]
        header = ["y1", "y2"][: self.grid.dims] + ["phi"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*cols, self.values.ravel()):
                w.writerow([repr(float(v)) for v in row])
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")


def _check_centered(f, w, tol):
    mean = float(w @ f)
    scale = max(1.0, float(w @ np.abs(f)))
    if abs(mean) > tol * scale:
        raise SourceNotCentered(f"source not centered: <f> = {mean:.3e} (tolerance {tol * scale:.1e})")
    return mean


def solve_poisson_direct(f, factors, grid: FactorGrid, weights=None, scheme: str = "hybrid",
                         center_tol: float = 1e-8) -> PoissonSolution:
    """Centered solution of ``L phi = f`` through a bordered system.

    The unknown constant ``mu`` in ``L phi + mu = f, w . phi = 0`` absorbs the
    discrete solvability defect, so ``mu`` is zero whenever ``f`` is centered
    against the discrete invariant measure.
    """
    f = np.asarray(f, dtype=float).ravel()
    if f.size != grid.size:
        raise ValueError("source does not match grid size")
    L = build_generator(factors, grid, scheme)
    w = gaussian_weights(factors, grid) if weights is None else np.asarray(weights, float)
    _check_centered(f, w, center_tol)
    n = grid.size
    M = sp.bmat([[L, np.ones((n, 1))], [w[None, :], None]], format="csc")
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:  # singular factorization
        cond = spla.norm(M, 1)
        raise np.linalg.LinAlgError(f"bordered Poisson system is singular (||M||_1 = {cond:.3e})") from exc
    x = lu.solve(np.append(f, 0.0))
    phi, mu = x[:n], x[n]
    phi = phi - w @ phi
    res = L @ phi - f
    return PoissonSolution(
        grid=grid,
        values=phi.reshape(grid.shape),
        residual_sup=float(np.abs(res[interior_mask(grid)]).max()),
        pi_mean=float(w @ phi),
        multiplier=float(mu),
    )


def solve_poisson_iterative(f, factors, grid: FactorGrid, eta: float | None = None, tol: float = 1e-10,
                            max_iter: int = 500, weights=None, scheme: str = "hybrid",
                            center_tol: float = 1e-8) -> PoissonSolution:
    """Shifted fixed-point iteration ``(L + eta) phi^{k+1} = f + eta phi^k`` from ``phi^0 = 0``.

    Every iterate is re-centered; iteration stops once the L2(Pi) norm of the
    increment drops below ``tol``. ``raw_means`` keeps the weighted mean of each
    iterate before re-centering.
    """
    f = np.asarray(f, dtype=float).ravel()
    lams = [factors.lam] if isinstance(factors, OU1D) else [factors.lambda1, factors.lambda2]
    if eta is None:
        eta = 0.1 * min(lams)
    if not eta > 0:
        raise ValueError("shift eta must be positive")
    if eta >= 0.5 * min(lams):
        warnings.warn(f"shift eta={eta:g} is not small against the mean-reversion speeds; "
                      "the iteration may fail to contract", RuntimeWarning, stacklevel=2)
    L = build_generator(factors, grid, scheme)
    w = gaussian_weights(factors, grid) if weights is None else np.asarray(weights, float)
    _check_centered(f, w, center_tol)
    try:
        lu = spla.splu(sp.csc_matrix(L + eta * sp.identity(grid.size)))
    except RuntimeError as exc:
        raise np.linalg.LinAlgError("shifted operator L + eta I is singular") from exc
    phi = np.zeros(grid.size)
    increments, raw, means = [], [], []
    for k in range(1, max_iter + 1):
        new = lu.solve(f + eta * phi)
        raw.append(float(w @ new))
        new -= raw[-1]
        means.append(float(w @ new))
        inc = float(np.sqrt(w @ (new - phi) ** 2))
        increments.append(inc)
        phi = new
        if inc < tol:
            break
    else:
        raise PoissonConvergenceError(f"no convergence in {max_iter} iterations; last increment {inc:.3e}")
    res = L @ phi - f
    return PoissonSolution(
        grid=grid,
        values=phi.reshape(grid.shape),
        residual_sup=float(np.abs(res[interior_mask(grid)]).max()),
        pi_mean=float(w @ phi),
        iterations=k,
        multiplier=float(w @ (f - L @ phi)),
        increments=increments,
        raw_means=raw,
        iterate_means=means,
    )


def reduce_to_1d(which: str, params: ModelParams, nodes: int = DEFAULT_QUAD_NODES) -> tuple[OU1D, Callable]:
    """Marginal 1D OU generator and centered source for the phi0 or phi1 corrector.

    ``phi0``: ``<kappa^(-1/phi)> - kappa^(-1/phi)`` on y1;
    ``phi1``: ``sigma^(1+phi) - <sigma^(1+phi)>`` on y2.
    """
    fp = params.factors
    p = params.phi
    if which == "phi0":
        ou = OU1D(fp.lambda1, fp.m1, fp.eta1)
        g = lambda y: kappa_map(y, params) ** (-1 / p)
        avg = pi_average_1d(g, ou.m, ou.sd, nodes)
        return ou, (lambda y: avg - g(y))
    if which == "phi1":
        ou = OU1D(fp.lambda2, fp.m2, fp.eta2)
        g = lambda y: sigma_map(y, params) ** (1 + p)
        avg = pi_average_1d(g, ou.m, ou.sd, nodes)
        return ou, (lambda y: g(y) - avg)
    raise ValueError("which must be 'phi0' or 'phi1'")


def solve_corrector(which: str, params: ModelParams, n: int = 201, width: float = 5.0,
                    method: str = "direct", weights: str = "gaussian", **kwargs) -> PoissonSolution:
    """Solve the 1D Poisson problem for ``phi0``/``phi1`` on a grid around the factor mean.

    The source is re-centered against the grid measure before solving; the
    removed constant (a grid-truncation effect) is kept in ``source_shift``.
    """
    ou, src = reduce_to_1d(which, params)
    grid = FactorGrid.around([ou.m], [ou.sd], n, width)
    f = src(grid.axis(0))
    if weights == "gaussian":
        w = gaussian_weights(ou, grid)
    elif weights == "discrete":
        w = stationary_weights(build_generator(ou, grid))
    else:
        raise ValueError("weights must be 'gaussian' or 'discrete'")
    shift = float(w @ f)
    f = f - shift
    solver = solve_poisson_direct if method == "direct" else solve_poisson_iterative
    sol = solver(f, ou, grid, weights=w, **kwargs)
    sol.source_shift = shift
    return sol


def zero_solution(grid: FactorGrid) -> PoissonSolution:
    return PoissonSolution(grid=grid, values=np.zeros(grid.shape), residual_sup=0.0, pi_mean=0.0)
