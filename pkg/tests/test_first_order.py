import csv

import numpy as np
import pytest

from fastexec.first_order import (
    BoundaryLayer,
    FirstOrderField,
    NegativityError,
    boundary_layer,
    boundary_layer_trapezoid,
    build_first_order,
    layer_coefficients,
    nu1,
    zbar1,
)
from fastexec.leading_order import Z0Curve, nu0
from fastexec.model import AveragedCoefficients, stationary_covariance
from fastexec.poisson import zero_solution


@pytest.fixture(scope="module")
def bundle():
    from fastexec.model import reference_params

    return build_first_order(reference_params(), n_steps=4096)


def with_field(field, **kw):
    d = dict(z0curve=field.z0curve, phi0=field.phi0, phi1=field.phi1, layer=field.layer,
             epsilon=field.epsilon, phi=field.phi, gamma=field.gamma)
    d.update(kw)
    return FirstOrderField(**d)


def test_layer_terminal_and_sign(bundle):
    lay = bundle.layer
    assert lay.c[-1] == 0.0
    assert np.all(lay.b0 < 0)
    assert np.all(np.isfinite(lay.c))


def test_layer_crude_bound(bundle, reference):
    lay = bundle.layer
    bound = np.abs(lay.b1).max() * reference.T * np.exp(np.abs(lay.b0).max() * reference.T)
    assert np.abs(lay.c).max() <= bound


def test_layer_trapezoid_crosscheck(bundle, reference):
    trap = boundary_layer_trapezoid(bundle.curve, bundle.coeffs, reference)
    assert np.abs(trap - bundle.layer.c).max() <= 1e-6


def test_layer_homogeneous(bundle, reference):
    c0 = AveragedCoefficients(bundle.coeffs.avg_kappa_neg, bundle.coeffs.avg_sigma_pow, 0.0, 0.0)
    lay = boundary_layer(bundle.curve, c0, reference)
    assert np.all(lay.c == 0)


def test_layer_constant_coefficients(reference):
    coeffs = AveragedCoefficients(3.0, 1.0, 0.7, 0.4)
    p = reference.with_(gamma=2.0)
    t = np.linspace(0, p.T, 1025)
    curve = Z0Curve(t, np.full(t.size, -1.5), 1.5, coeffs, p.phi, 1.5)
    lay = boundary_layer(curve, coeffs, p)
    b0, b1 = layer_coefficients(-1.5, coeffs, p)
    exact = b1 / b0 * (np.exp(b0 * (p.T - t)) - 1)
    assert np.abs(lay.c - exact).max() <= 1e-8


def test_epsilon_zero_is_leading_order(bundle, rng):
    f = with_field(bundle.field, epsilon=0.0)
    t = rng.uniform(0, 0.25, 20)
    y1 = rng.normal(0.3782, 0.06, 20)
    y2 = rng.normal(4.78, 0.3, 20)
    np.testing.assert_array_equal(zbar1(t, (y1, y2), f), bundle.curve(t))


def test_gamma_zero_drops_phi1(bundle):
    f = with_field(bundle.field, gamma=0.0)
    a = zbar1(0.1, (0.38, 3.0), f)
    b = zbar1(0.1, (0.38, 6.0), f)
    assert a == b


def test_epsilon_linearity(bundle):
    t, y = 0.05, (0.36, 4.9)
    z0 = bundle.curve(t)
    d = [zbar1(t, y, with_field(bundle.field, epsilon=e)) - z0 for e in (1e-3, 2e-3, 3e-3)]
    assert d[1] == pytest.approx(2 * d[0], rel=1e-12)
    assert d[2] == pytest.approx(3 * d[0], rel=1e-12)


def test_terminal_centering(bundle, reference):
    from fastexec.model import pi_average

    f = with_field(bundle.field, gamma=1e-3)
    gauss = stationary_covariance(reference.factors)
    T = reference.T
    mean = pi_average(lambda a, b: zbar1(T, (a, b), f) - bundle.curve(T), gauss)
    assert abs(mean) <= 1e-8


def test_recomposition_from_exports(bundle, reference, tmp_path):
    f = with_field(bundle.field, gamma=1e-3)
    bundle.phi0.to_csv(tmp_path / "phi0.csv")
    bundle.phi1.to_csv(tmp_path / "phi1.csv")
    bundle.layer.to_csv(tmp_path / "layer.csv")
    bundle.curve.to_csv(tmp_path / "z0.csv")

    def load(name):
        with (tmp_path / name).open() as fh:
            rows = list(csv.reader(fh))
        return np.array(rows[1:], float).T

    y0, p0 = load("phi0.csv")
    y1, p1 = load("phi1.csv")
    lt, _, _, lc = load("layer.csv")
    zt, zv = load("z0.csv")
    m1, m2 = reference.factors.m1, reference.factors.m2
    z0 = zv[0]
    expected = z0 + reference.epsilon * (reference.phi * abs(z0) ** (1 + 1 / reference.phi) * np.interp(m1, y0, p0)
                                     + 1e-3 * np.interp(m2, y1, p1) + lc[0])
    assert zbar1(0.0, (m1, m2), f) == pytest.approx(expected, abs=1e-6)


def test_nu1_basics(bundle, reference):
    y = (reference.factors.m1, reference.factors.m2)
    assert nu1(0.1, 0.0, y, bundle.field, reference) == 0.0
    f0 = with_field(bundle.field, epsilon=0.0)
    for t in (0.0, 0.1, 0.2):
        assert nu1(t, 5.0, y, f0, reference) == nu0(t, 5.0, y, bundle.curve, reference)


def test_nu1_reduction_with_zero_parts(bundle, reference, rng):
    lay = bundle.layer
    zero_layer = BoundaryLayer(lay.times, lay.b0, np.zeros_like(lay.b1), np.zeros_like(lay.c))
    f = with_field(bundle.field, phi0=zero_solution(bundle.phi0.grid), phi1=zero_solution(bundle.phi1.grid),
                   layer=zero_layer, gamma=1e-3)
    for _ in range(20):
        t, q = rng.uniform(0, reference.T), rng.uniform(-50, 50)
        y = (rng.normal(0.38, 0.06), rng.normal(4.8, 0.3))
        assert nu1(t, q, y, f, reference) == pytest.approx(nu0(t, q, y, bundle.curve, reference), rel=1e-14)


def test_nu1_negativity_guard(bundle, reference):
    f = with_field(bundle.field, epsilon=50.0)
    with pytest.raises(NegativityError, match="correction breaks negativity"):
        nu1(0.0, 1.0, (0.06, 4.78), f, reference)


def test_clamp_is_logged(bundle, caplog):
    with caplog.at_level("WARNING"):
        zbar1(0.0, (5.0, 4.78), bundle.field)
    assert "clamped" in caplog.text


def test_exports(bundle, tmp_path):
    bundle.layer.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("t,b0,b1,c\n")
    bundle.field.lattice_to_csv(tmp_path / "z.csv", [0.0, 0.1], [0.3, 0.4], [4.5, 5.0, 5.5])
    lines = (tmp_path / "z.csv").read_text().splitlines()
    assert lines[0] == "t,y1,y2,zbar1" and len(lines) == 13


def test_front_loading_pattern(reference):
    # the corrected rule trades faster early and slower near the horizon (median over 100 paths)
    import warnings

    from fastexec.simulation import InitialState, StrategyInputs, _gains, run_strategy, simulate_paths

    n = 5000
    inputs = StrategyInputs.build(reference, n)
    b = simulate_paths(reference, InitialState(), n, 100, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for s in ("order0", "order1"):
            run_strategy(b, s, inputs)
    r0 = _gains(b, "order0", inputs) * b.Q["order0"][:, :-1]
    r1 = _gains(b, "order1", inputs) * b.Q["order1"][:, :-1]
    med = np.median((r1 - r0) / r0, axis=0)
    t = b.times[:-1] / reference.T
    assert np.all(med[t < 0.9] > 0)
    assert np.all(med[t > 0.97] < 0)
