"""Calibration from level-2 book data: impact power law, rolling impact coefficient,
two-scale realized variance, volatility path and OU/ARMA(1,1) parameter fits.
Also a synthetic book generator used for round-trip tests.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

LEVELS = 25
MS_PER_DAY = 86_400_000.0


class DataError(ValueError):
    """Malformed or insufficient market data."""


@dataclass(frozen=True)
class LobSnapshot:
    ts_ms: int
    bids: np.ndarray  # (k, 2) price, quantity; prices strictly decreasing
    asks: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        for side, name, sign in ((self.bids, "bid", -1), (self.asks, "ask", 1)):
            side = np.asarray(side, float).reshape(-1, 2)
            object.__setattr__(self, name + "s", side)
            if side.shape[0] > LEVELS:
                raise DataError(f"more than {LEVELS} {name} levels")
            if np.any(side[:, 1] <= 0):
                raise DataError(f"{name} quantities must be positive")
            if side.shape[0] > 1 and not np.all(sign * np.diff(side[:, 0]) > 0):
                raise DataError(f"{name} prices must be strictly {'de' if sign < 0 else 'in'}creasing")
        if self.bids.shape[0] == 0:
            raise DataError("snapshot needs at least one bid level")
        if self.asks.shape[0] and self.bids[0, 0] >= self.asks[0, 0]:
            raise DataError("crossed book: best bid >= best ask")

    @property
    def best_bid(self) -> float:
        return float(self.bids[0, 0])

    @property
    def depth(self) -> float:
        return float(self.bids[:, 1].sum())

    def key(self) -> tuple:
        return (self.ts_ms, self.bids.tobytes(), self.asks.tobytes())


@dataclass(frozen=True)
class ImpactCurve:
    ts_ms: int
    best_bid: float
    nu: np.ndarray
    impact: np.ndarray

    @property
    def points(self):
        return list(zip(self.nu.tolist(), self.impact.tolist()))


def lob_header() -> list[str]:
    cols = ["ts_ms"]
    for side in ("bid", "ask"):
        cols += [f"{side}_px_{i}" for i in range(1, LEVELS + 1)]
        cols += [f"{side}_qty_{i}" for i in range(1, LEVELS + 1)]
    return cols


def write_lob_csv(path, books: Sequence[LobSnapshot]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(lob_header())
        for b in books:
            row = [str(int(b.ts_ms))]
            for side in (b.bids, b.asks):
                px = [repr(float(v)) for v in side[:, 0]] + [""] * (LEVELS - side.shape[0])
                qty = [repr(float(v)) for v in side[:, 1]] + [""] * (LEVELS - side.shape[0])
                row += px + qty
            w.writerow(row)


def read_lob_csv(path) -> list[LobSnapshot]:
    """Parse the 101-column book file; errors name the offending line."""
    books = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty LOB file")
        if [h.strip() for h in header] != lob_header():
            raise DataError("line 1: unexpected LOB header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(lob_header()):
                raise DataError(f"line {lineno}: expected {len(lob_header())} fields, got {len(row)}")
            try:
                ts = int(row[0])
                sides = []
                for s in range(2):
                    base = 1 + s * 2 * LEVELS
                    px, qty = row[base:base + LEVELS], row[base + LEVELS:base + 2 * LEVELS]
                    lv = [(float(p), float(q)) for p, q in zip(px, qty) if p.strip() and q.strip()]
                    sides.append(np.array(lv, float).reshape(-1, 2))
                books.append(LobSnapshot(ts, sides[0], sides[1]))
            except (ValueError, DataError) as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
    if not books:
        raise DataError("LOB file has no rows")
    return books


def default_nu_grid(book: LobSnapshot, n_interior: int = 32) -> np.ndarray:
    """Cumulative depth boundaries plus log-spaced points on ``[v_t, V_t]``."""
    cum = np.cumsum(book.bids[:, 1])
    if cum.size == 1:
        return cum.copy()
    inner = np.geomspace(cum[0], cum[-1], n_interior + 2)[1:-1]
    return np.unique(np.concatenate([cum, inner]))


def impact_curve(book: LobSnapshot, grid=None) -> ImpactCurve:
    """Walk the bid side: ``I(nu) = best_bid - VWAP`` of selling ``nu`` into the book."""
    nu = default_nu_grid(book) if grid is None else np.asarray(grid, float)
    px, qty = book.bids[:, 0], book.bids[:, 1]
    cum = np.cumsum(qty)
    V = cum[-1]
    if np.any(nu <= 0):
        raise ValueError("trade sizes must be positive")
    if np.any(nu > V * (1 + 1e-12)):
        raise ValueError(f"trade size {nu.max():.6g} exceeds displayed depth {V:.6g}")
    # shortfall relative to the best bid, accumulated level by level
    short = np.concatenate([[0.0], np.cumsum(qty * (px[0] - px))])
    prev = np.concatenate([[0.0], cum])
    j = np.minimum(np.searchsorted(cum, nu, side="left"), px.size - 1)
    total = short[j] + (nu - prev[j]) * (px[0] - px[j])
    return ImpactCurve(book.ts_ms, float(px[0]), nu, np.maximum(total / nu, 0.0))


def synth_lob(kappa_path, phi: float, price_path, levels: int = LEVELS, seed: int = 0, noise: float = 0.0,
              ts_ms=None, first_depth: float = 0.02, second_depth: float = 0.5, ratio: float = 1.3,
              spread: float = 0.01) -> list[LobSnapshot]:
    """Books whose bid walk gives ``I(V_k) = kappa V_k^phi`` at every depth boundary ``V_k``, ``k >= 2``.

    Depths are ``V_1 = first_depth`` and ``V_k = second_depth * ratio^(k-2)``.
    ``noise`` multiplies each price gap by ``exp(noise * xi)``; asks mirror the bids
    above ``best_bid + spread``.
    """
    kappa_path = np.atleast_1d(np.asarray(kappa_path, float))
    price_path = np.atleast_1d(np.asarray(price_path, float))
    kappa_path, price_path = np.broadcast_arrays(kappa_path, price_path)
    if np.any(kappa_path <= 0) or np.any(price_path <= 0):
        raise ValueError("kappa and price paths must be positive")
    if not 0 < phi <= 1 or levels < 2:
        raise ValueError("need 0 < phi <= 1 and at least two levels")
    ts = np.arange(kappa_path.size) * 1000 if ts_ms is None else np.asarray(ts_ms, dtype=np.int64)
    V = np.concatenate([[first_depth], second_depth * ratio ** np.arange(levels - 1)])
    if not np.all(np.diff(V) > 0):
        raise ValueError("depth boundaries must increase")
    qty = np.diff(np.concatenate([[0.0], V]))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
    books = []
    for k, p0, t in zip(kappa_path, price_path, ts):
        D = k * V ** (1 + phi)
        D[0] = 0.0
        # cumulative shortfall D_k = sum_j q_j gap_j, gap_j = p0 - p_j
        gaps = np.concatenate([[0.0], np.diff(D) / qty[1:]])
        steps = np.diff(gaps)
        if np.any(steps <= 0):
            raise ValueError("depth profile gives non-monotone prices; increase ratio or lower first_depth")
        if noise:
            steps = steps * np.exp(noise * rng.standard_normal(steps.size))
        gaps = np.concatenate([[0.0], np.cumsum(steps)])
        bids = np.column_stack([p0 - gaps, qty])
        asks = np.column_stack([p0 + spread + gaps, qty])
        books.append(LobSnapshot(int(t), bids, asks))
    return books


@dataclass
class PowerLawFit:
    phi_hat: float
    phi_std: float
    per_trial: list
    M: int
    N: int
    seed: int
    skipped: list = field(default_factory=list)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _fit_one(nu, imp):
    pos = imp > 0
    if pos.sum() < 2:
        return None
    slope, icept = np.polyfit(np.log(nu[pos]), np.log(imp[pos]), 1)
    x0 = np.array([np.exp(icept), np.clip(slope, 1e-3, 1.0)])
    res = least_squares(lambda x: x[0] * nu ** x[1] - imp, x0, bounds=([0.0, 1e-6], [np.inf, 1.0]),
                        method="trf", x_scale="jac", xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return float(res.x[0]), float(res.x[1])


def fit_power_law(dataset: Sequence[LobSnapshot], M: int = 20, N: int = 2000, seed: int = 0,
                  grid: str = "boundaries") -> PowerLawFit:
    """Bagged nonlinear least squares of ``I = kappa nu^phi``.

    Each of the ``M`` trials resamples ``N`` snapshots with replacement and fits
    all their curve points with ``v_t < nu <= V_t``. ``grid`` is ``"boundaries"``
    (cumulative depths, where the book pins the cost exactly) or ``"full"``
    (boundaries plus log-spaced interior points). Snapshots are put in a
    canonical order first, so the result does not depend on the input order.
    """
    if grid not in ("boundaries", "full"):
        raise ValueError("grid must be 'boundaries' or 'full'")
    if not dataset:
        raise DataError("empty dataset")
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")
    books = sorted(dataset, key=LobSnapshot.key)
    curves = []
    for b in books:
        c = impact_curve(b, np.cumsum(b.bids[:, 1]) if grid == "boundaries" else None)
        v_t = b.bids[0, 1]
        keep = c.nu > v_t * (1 + 1e-12)
        curves.append((c.nu[keep], c.impact[keep]))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed)])))
    trials, skipped = [], []
    for m in range(M):
        pick = rng.integers(0, len(curves), size=N)
        nu = np.concatenate([curves[i][0] for i in pick])
        imp = np.concatenate([curves[i][1] for i in pick])
        fit = _fit_one(nu, imp)
        if fit is None:
            skipped.append(m)
            continue
        trials.append(fit)
    if not trials:
        raise DataError("all bagging trials are degenerate (no positive impact)")
    phis = np.array([t[1] for t in trials])
    return PowerLawFit(float(phis.mean()), float(phis.std(ddof=1)) if phis.size > 1 else 0.0,
                       [list(t) for t in trials], M, N, int(seed), skipped)


def rolling_kappa(curves: Sequence[ImpactCurve], phi_hat: float, w: float) -> list[tuple[int, float]]:
    """Through-origin regression of ``I`` on ``nu^phi`` over ``[(t - w)_+, t]`` (``w`` in seconds)."""
    if w < 0:
        raise ValueError("lookback must be non-negative")
    ts = np.array([c.ts_ms for c in curves], dtype=np.int64)
    if np.any(np.diff(ts) < 0):
        raise ValueError("curves must be time-sorted")
    num = np.array([float(np.sum(c.impact * c.nu ** phi_hat)) for c in curves])
    den = np.array([float(np.sum(c.nu ** (2 * phi_hat))) for c in curves])
    cnum = np.concatenate([[0.0], np.cumsum(num)])
    cden = np.concatenate([[0.0], np.cumsum(den)])
    wms = w * 1000.0
    out, last = [], None
    for i, t in enumerate(ts):
        lo = np.searchsorted(ts, max(t - wms, 0), side="left")
        hi = np.searchsorted(ts, t, side="right")
        d = cden[hi] - cden[lo]
        if d > 0:
            last = (cnum[hi] - cnum[lo]) / d
        elif last is None:
            raise DataError("first regression window is empty")
        out.append((int(t), float(last)))
    return out


def dedupe(prices) -> tuple[np.ndarray, np.ndarray]:
    """Drop consecutive repeated prices; returns (ts_ms, price)."""
    arr = np.asarray(prices, float).reshape(-1, 2)
    if arr.shape[0] == 0:
        return arr[:, 0], arr[:, 1]
    keep = np.concatenate([[True], np.diff(arr[:, 1]) != 0])
    return arr[keep, 0], arr[keep, 1]


def tsrv_detail(prices, K: int = 5, adjust: bool = False) -> tuple[float, bool]:
    """Two-scale realized variance and whether the bias correction had to be floored.

    ``adjust`` applies the small-sample factor ``(1 - nbar/n)^-1``, which removes
    the ``1 - 1/K`` downward bias of the plain two-scale difference.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    _, p = dedupe(prices)
    if p.size == 1:
        return 0.0, False  # the price never moved
    if p.size < K + 2:
        raise DataError(f"insufficient observations: {p.size} distinct prices, need {K + 2}")
    n = p.size - 1
    rv_all = float(np.sum(np.diff(p) ** 2))
    if K == 1:
        return rv_all, False
    rv_avg = sum(float(np.sum(np.diff(p[k::K]) ** 2)) for k in range(K)) / K
    nbar = (n - K + 1) / K
    val = rv_avg - nbar / n * rv_all
    if adjust:
        val /= 1 - nbar / n
    return (val, False) if val >= 0 else (0.0, True)


def tsrv(prices, K: int = 5, adjust: bool = False) -> float:
    """Two-scale realized variance of a ``(ts_ms, price)`` sequence; subsample strides 1..K."""
    return tsrv_detail(prices, K, adjust)[0]


def _windows(ts, delta_ms):
    lo = np.searchsorted(ts, np.maximum(ts - delta_ms, ts[0]), side="left")
    return lo


def z_statistics(prices, delta_s: float = 60.0, K: int = 5, adjust: bool = True) -> np.ndarray:
    """``Z_t = (p_t - p_(t-Delta)) / Sigma_t`` at every distinct price update."""
    ts, p = dedupe(prices)
    lo = _windows(ts, delta_s * 1000.0)
    z = []
    for i in range(ts.size):
        seg = np.column_stack([ts[lo[i]:i + 1], p[lo[i]:i + 1]])
        if seg.shape[0] < K + 2 or ts[i] - ts[0] < delta_s * 1000.0:
            continue
        var, floored = tsrv_detail(seg, K, adjust)
        if floored or var <= 0:
            continue
        z.append((p[i] - p[lo[i]]) / np.sqrt(var))
    return np.asarray(z)


@dataclass
class VolPath:
    ts_ms: np.ndarray
    sigma: np.ndarray
    omega2: float
    gaps: list

    def to_csv(self, path) -> None:
        write_series(path, self.ts_ms, self.sigma)


def vol_path(prices, delta_s: float = 60.0, K: int = 5, omega2: float | None = None,
             omega_window_ms: tuple | None = None, adjust: bool = True) -> VolPath:
    """``sigma_t = sqrt(omega^2 Sigma_t^2 / Delta)`` with ``Delta`` in days.

    ``omega2`` defaults to the sample variance of the Z statistics restricted to
    ``omega_window_ms`` (the whole sample when None). Windows with too few
    distinct prices are skipped and listed in ``gaps``.
    """
    if not delta_s > 0:
        raise ValueError("Delta must be positive")
    ts, p = dedupe(prices)
    if omega2 is None:
        sub = np.column_stack([ts, p])
        if omega_window_ms is not None:
            sel = (ts >= omega_window_ms[0]) & (ts <= omega_window_ms[1])
            sub = sub[sel]
        z = z_statistics(sub, delta_s, K, adjust)
        omega2 = float(np.var(z, ddof=1)) if z.size > 1 else 1.0
    lo = _windows(ts, delta_s * 1000.0)
    delta_days = delta_s * 1000.0 / MS_PER_DAY
    out_t, out_s, gaps = [], [], []
    for i in range(ts.size):
        seg = np.column_stack([ts[lo[i]:i + 1], p[lo[i]:i + 1]])
        try:
            var = tsrv(seg, K, adjust)
        except DataError:
            gaps.append(int(ts[i]))
            continue
        out_t.append(int(ts[i]))
        out_s.append(np.sqrt(omega2 * var / delta_days))
    return VolPath(np.array(out_t, dtype=np.int64), np.array(out_s), float(omega2), gaps)


def write_series(path, ts_ms, values) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ts_ms", "value"])
        for t, v in zip(ts_ms, values):
            w.writerow([int(t), repr(float(v))])


def read_series(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``ts_ms,value`` rows."""
    ts, vals = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("empty series file")
        if [h.strip() for h in header] != ["ts_ms", "value"]:
            raise DataError("line 1: expected header ts_ms,value")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts.append(int(float(row[0])))
                vals.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
    return np.array(ts, dtype=np.int64), np.array(vals)


@dataclass
class OUFitResult:
    lambda_hat: float
    m_hat: float
    eta_hat: float
    a: float
    b: float
    c: float
    gamma_resid: float
    dt: float

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def ou_mapping(a: float, b: float, c: float, gamma: float, dt: float) -> tuple[float, float, float]:
    """ARMA(1,1) coefficients to ``(lambda, m, eta)``."""
    if not 0 < b < 1:
        raise ValueError(f"non-mean-reverting fit: b = {b:.6g} outside (0, 1)")
    lb = np.log(b)
    lam = -lb / dt
    m = a / (1 - b)
    eta = gamma * np.sqrt(-2 * (b + b * c ** 2 + b ** 2 * c + c) * lb / (dt * (1 - b ** 2) * b))
    return float(lam), float(m), float(eta)


def arma_residuals(x, a, b, c):
    """CSS residuals ``e_t = x_t - a - b x_{t-1} - c e_{t-1}`` with ``e_0 = 0``."""
    return lfilter([1.0], [1.0, c], x[1:] - a - b * x[:-1])


def fit_ou(series, dt: float) -> OUFitResult:
    """Conditional-sum-of-squares ARMA(1,1) fit of a uniformly sampled series, mapped to OU parameters."""
    x = np.asarray(series, float)
    if x.ndim == 2:
        x = x[:, 1]
    if x.size < 50:
        raise DataError("need at least 50 observations")
    # AR(1) least squares as the starting point
    X = np.column_stack([np.ones(x.size - 1), x[:-1]])
    a0, b0 = np.linalg.lstsq(X, x[1:], rcond=None)[0]
    res = least_squares(lambda th: arma_residuals(x, *th), [a0, b0, 0.0],
                        bounds=([-np.inf, -np.inf, -0.999], [np.inf, np.inf, 0.999]),
                        method="trf", x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    if not res.success:
        raise RuntimeError(f"ARMA optimizer did not converge: {res.message}; last iterate {res.x.tolist()}")
    a, b, c = (float(v) for v in res.x)
    e = arma_residuals(x, a, b, c)
    gamma = float(np.std(e, ddof=0))
    lam, m, eta = ou_mapping(a, b, c, gamma, dt)
    return OUFitResult(lam, m, eta, a, b, c, gamma, dt)


def simulate_ou(lam: float, m: float, eta: float, dt: float, n: int, rng: np.random.Generator, x0=None) -> np.ndarray:
    """Exact-transition OU samples; starts from the stationary law unless ``x0`` is given."""
    b = np.exp(-lam * dt)
    sd_stat = eta / np.sqrt(2 * lam)
    sd = sd_stat * np.sqrt(1 - b ** 2)
    start = m + sd_stat * rng.standard_normal() if x0 is None else x0
    e = sd * rng.standard_normal(n - 1)
    x, _ = lfilter([1.0], [1.0, -b], e, zi=[b * (start - m)])
    return m + np.concatenate([[start - m], x])
