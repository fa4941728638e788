import json

import numpy as np
import pytest

from fastexec.hjb import (
    BracketError,
    StabilityError,
    accuracy_sweep,
    default_grid,
    ergodic_average_check,
    factor_problem,
    loglog_slope,
    solve_hjb,
    sweep_params,
)
from fastexec.leading_order import solve_z0
from fastexec.model import base_averages, kappa_map, pi_average, stationary_covariance
from fastexec.poisson import FactorGrid


def test_degenerate_clamps_collapse_to_ode():
    p = sweep_params(kappa_lo=1.0, kappa_hi=1.0)
    grid = default_grid(p, "1d_kappa", 51)
    n = 2000
    coarse = solve_hjb(p, grid, n)
    fine = solve_hjb(p, grid, 2 * n)
    # first-order IMEX error removed by Richardson extrapolation
    z = 2 * fine.values[::2] - coarse.values
    ode = solve_z0(p, base_averages(p), n).values
    assert np.abs(z - ode[:, None]).max() <= 1e-6
    assert np.ptp(coarse.values, axis=1).max() <= 1e-12


def test_terminal_and_negativity():
    p = sweep_params(gamma=0.5)
    sol = solve_hjb(p, default_grid(p, "1d_kappa", 51), 500)
    assert np.all(sol.values[-1] == -p.A)
    assert np.all(sol.values < 0)
    lower, upper = sol.envelope
    assert np.all(-sol.values <= upper[:, None] + 1e-10)
    assert np.all(-sol.values >= lower[:, None] - 1e-10)


def test_time_refinement_first_order():
    p = sweep_params(gamma=0.2)
    grid = default_grid(p, "1d_kappa", 51)
    z = [solve_hjb(p, grid, n).values for n in (4000, 8000, 16000)]
    d1 = np.abs(z[0] - z[1][::2]).max()
    d2 = np.abs(z[1] - z[2][::2]).max()
    # the observed order approaches one from below as dt lambda / eps shrinks
    assert np.log2(d1 / d2) >= 0.9


def test_stability_error():
    p = sweep_params()
    with pytest.raises(StabilityError, match="time steps"):
        solve_hjb(p, default_grid(p, "1d_kappa", 51), 2)


def test_bracket_error_reports_node():
    p = sweep_params()
    with pytest.raises(BracketError, match="node"):
        solve_hjb(p, default_grid(p, "1d_kappa", 51), 200, bracket_tol=-1.0)


def test_modes():
    p = sweep_params(gamma=0.3, rho=0.4, epsilon=0.2)
    with pytest.raises(ValueError):
        factor_problem(p, default_grid(p, "2d", 11), "1d_kappa")
    with pytest.raises(ValueError):
        factor_problem(p, default_grid(p, "1d_kappa", 11), "2d")
    with pytest.raises(ValueError):
        factor_problem(p, default_grid(p, "1d_kappa", 11), "3d")
    s = solve_hjb(p, default_grid(p, "1d_sigma", 41), 1200, mode="1d_sigma")
    assert np.all(np.isfinite(s.values))
    s2 = solve_hjb(p, default_grid(p, "2d", 21), 1200, mode="2d")
    assert s2.values.shape == (1201, 441) and np.all(s2.values < 0)


def test_epsilon_halving_ratio():
    p = sweep_params()
    r = accuracy_sweep(p, [0.1, 0.05, 0.025], order=0, n=101, n_time_steps=1000)
    ratio = r.error_order0[0] / r.error_order0[1]
    assert 1.5 <= ratio <= 2.5
    assert r.monotone


def test_sweep_validation():
    p = sweep_params()
    with pytest.raises(ValueError, match="need >= 3 epsilons"):
        accuracy_sweep(p, [0.1])
    with pytest.raises(ValueError, match="decreasing"):
        accuracy_sweep(p, [0.1, 0.2, 0.05])
    with pytest.raises(ValueError, match="standoff"):
        accuracy_sweep(p, [0.1, 0.05, 0.025], order=1, delta=0.0)


def test_sweep_exports(tmp_path):
    p = sweep_params()
    r = accuracy_sweep(p, [0.2, 0.1, 0.05], order=0, n=51, n_time_steps=300, richardson=False)
    r.to_csv(tmp_path / "s.csv")
    r.to_json(tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "eps,error_order0,error_order1,fitted_slope" and len(lines) == 4
    assert json.loads((tmp_path / "s.json").read_text())["meta"]["richardson"] is False


def test_loglog_slope():
    x = np.array([0.1, 0.05, 0.025])
    assert loglog_slope(x, 3 * x ** 2) == pytest.approx(2.0)


def test_ergodic_zero_function(reference):
    rows = ergodic_average_check(reference.factors, lambda a, b: 0.0, [0.1, 0.05, 0.025], 0.0, 1e-3,
                                 (0.5, 4.0), 1000, seed=1)
    assert all(r.estimate == 0.0 for r in rows)


def test_ergodic_linear_decay(reference):
    fp = reference.factors
    eps = [1.0, 0.5, 0.25]
    rows = ergodic_average_check(fp, lambda a, b: a - fp.m1, eps, 0.0, 1e-3, (fp.m1 + 0.2, fp.m2),
                                 20000, seed=2)
    for r in rows:
        assert abs(r.estimate) <= r.bound
    assert abs(rows[-1].estimate) < abs(rows[0].estimate)


def test_ergodic_kappa_function(reference):
    fp = reference.factors
    gauss = stationary_covariance(fp)
    f = lambda a, b: kappa_map(a, reference) ** (-1 / reference.phi)
    avg = pi_average(f, gauss)
    g = lambda a, b: f(a, b) - avg
    # start one standard deviation low over a horizon of about eps / lambda1 at the largest epsilon
    y0 = (fp.m1 - gauss.sd[0], fp.m2)
    rows = ergodic_average_check(fp, g, [0.1, 0.01, 0.001], 0.0, 5e-5, y0, 100_000, seed=3)
    assert abs(rows[0].estimate) > 2 * rows[0].std_error
    assert abs(rows[-1].estimate) <= 3 * rows[-1].std_error
    assert abs(rows[-1].estimate) < abs(rows[0].estimate)
