import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastexec.calibration import (
    DataError,
    ImpactCurve,
    LobSnapshot,
    fit_ou,
    fit_power_law,
    impact_curve,
    ou_mapping,
    read_lob_csv,
    read_series,
    rolling_kappa,
    simulate_ou,
    synth_lob,
    tsrv,
    tsrv_detail,
    vol_path,
    write_lob_csv,
    write_series,
    z_statistics,
)

PHI = 0.2833


def book(levels):
    return LobSnapshot(0, np.array(levels, float))


def brownian_ticks(rng, sigma, n, dt_s=1.0, noise=0.0):
    ts = np.arange(n) * int(dt_s * 1000)
    p = 1000 + np.cumsum(sigma * np.sqrt(dt_s / 86400) * rng.standard_normal(n))
    return np.column_stack([ts, p + noise * rng.standard_normal(n)])


def test_snapshot_validation():
    with pytest.raises(DataError):
        book([(100.0, 1.0), (101.0, 1.0)])
    with pytest.raises(DataError):
        book([(100.0, 0.0)])
    with pytest.raises(DataError):
        LobSnapshot(0, np.zeros((0, 2)))
    with pytest.raises(DataError, match="crossed"):
        LobSnapshot(0, np.array([[100.0, 1.0]]), np.array([[99.0, 1.0]]))
    with pytest.raises(DataError):
        book([(100.0 - i, 1.0) for i in range(26)])


def test_impact_examples():
    assert impact_curve(book([(100.0, 5.0)]), [3.0]).impact[0] == 0.0
    c = impact_curve(book([(100.0, 1.0), (99.0, 1.0)]), [2.0])
    assert c.impact[0] == pytest.approx(0.5)
    with pytest.raises(ValueError, match="exceeds displayed depth"):
        impact_curve(book([(100.0, 1.0)]), [1.5])


def test_synthetic_book_matches_generator():
    b = synth_lob(0.38, PHI, 16676.0)[0]
    V = np.cumsum(b.bids[:, 1])
    c = impact_curve(b, V)
    np.testing.assert_allclose(c.impact[1:], 0.38 * V[1:] ** PHI, rtol=0, atol=1e-9)
    b = synth_lob(0.2, 0.3, 500.0)[0]
    V = np.cumsum(b.bids[:, 1])
    np.testing.assert_allclose(impact_curve(b, V).impact[1:], 0.2 * V[1:] ** 0.3, atol=1e-9)


def test_synth_lob_constant_paths_and_errors():
    books = synth_lob(np.full(3, 0.38), PHI, np.full(3, 100.0))
    assert all(np.array_equal(books[0].bids, b.bids) for b in books)
    with pytest.raises(ValueError):
        synth_lob(-1.0, PHI, 100.0)
    with pytest.raises(ValueError):
        synth_lob(0.38, PHI, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 5.0), st.floats(0.01, 10.0)), min_size=1, max_size=25))
def test_impact_monotone(levels):
    px = 1000.0 - np.cumsum([g for g, _ in levels])
    b = book(list(zip(px, [q for _, q in levels])))
    c = impact_curve(b)
    assert np.all(c.impact >= 0)
    assert np.all(np.diff(c.impact) >= -1e-9)


def test_lob_csv_roundtrip(tmp_path):
    books = synth_lob(np.array([0.3, 0.4]), PHI, np.array([100.0, 101.0]), noise=0.05, seed=3)
    write_lob_csv(tmp_path / "lob.csv", books)
    back = read_lob_csv(tmp_path / "lob.csv")
    assert len(back) == 2
    for a, b in zip(books, back):
        assert a.ts_ms == b.ts_ms and np.array_equal(a.bids, b.bids) and np.array_equal(a.asks, b.asks)


def test_lob_csv_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(DataError, match="empty"):
        read_lob_csv(tmp_path / "empty.csv")
    write_lob_csv(tmp_path / "lob.csv", synth_lob(0.38, PHI, 100.0))
    text = (tmp_path / "lob.csv").read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join(text + ["1,2,3"]) + "\n")
    with pytest.raises(DataError, match="line 3"):
        read_lob_csv(tmp_path / "bad.csv")
    bad_row = text[1].split(",")
    bad_row[1] = "oops"
    (tmp_path / "bad2.csv").write_text("\n".join([text[0], ",".join(bad_row)]) + "\n")
    with pytest.raises(DataError, match="line 2"):
        read_lob_csv(tmp_path / "bad2.csv")


def test_power_law_noiseless():
    kap = np.exp(np.random.default_rng(1).normal(np.log(0.38), 0.2, 50))
    books = synth_lob(kap, PHI, np.full(50, 16676.0))
    fit = fit_power_law(books, M=5, N=50, seed=1)
    assert abs(fit.phi_hat - PHI) <= 1e-3
    assert len(fit.per_trial) == 5 and not fit.skipped


def test_power_law_single_book_zero_variance():
    books = synth_lob(0.38, PHI, 100.0)
    fit = fit_power_law(books, M=4, N=3, seed=0)
    phis = [t[1] for t in fit.per_trial]
    assert max(phis) - min(phis) <= 1e-12 and fit.phi_std <= 1e-12


def test_power_law_permutation_invariant(rng):
    kap = np.exp(rng.normal(np.log(0.38), 0.2, 30))
    books = synth_lob(kap, PHI, np.full(30, 100.0), noise=0.05, seed=4)
    a = fit_power_law(books, M=3, N=40, seed=9)
    shuffled = [books[i] for i in rng.permutation(len(books))]
    b = fit_power_law(shuffled, M=3, N=40, seed=9)
    assert a.phi_hat == b.phi_hat


def test_power_law_degenerate():
    flat = [book([(100.0, 1.0)])]
    with pytest.raises(DataError, match="degenerate"):
        fit_power_law(flat, M=2, N=1)
    with pytest.raises(DataError):
        fit_power_law([], M=2, N=1)


def test_rolling_kappa():
    nu = np.array([1.0, 2.0, 4.0])
    c1 = ImpactCurve(0, 100.0, nu, 0.3 * nu ** PHI)
    c2 = ImpactCurve(1000, 100.0, nu, 0.5 * nu ** PHI)
    out = rolling_kappa([c1, c2], PHI, 1.0)
    assert out[0] == (0, pytest.approx(0.3))
    assert out[1][1] == pytest.approx(0.4)
    assert rolling_kappa([c1, c2], PHI, 0.0)[1][1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rolling_kappa([c2, c1], PHI, 1.0)


def test_rolling_kappa_carries_forward():
    empty = ImpactCurve(500, 100.0, np.zeros(0), np.zeros(0))
    c1 = ImpactCurve(0, 100.0, np.array([1.0]), np.array([0.3]))
    out = rolling_kappa([c1, empty], PHI, 0.0)
    assert out[1] == (500, pytest.approx(0.3))
    with pytest.raises(DataError):
        rolling_kappa([empty], PHI, 0.0)


def test_tsrv_basics(rng):
    const = np.column_stack([np.arange(20) * 1000, np.full(20, 5.0)])
    assert tsrv(const) == 0.0
    with pytest.raises(DataError, match="insufficient observations"):
        tsrv(np.column_stack([np.arange(4), [1.0, 2.0, 1.0, 2.0]]))
    ramp = np.column_stack([np.arange(40), 5 + 0.01 * (np.arange(40) % 2)])
    assert tsrv(np.column_stack([np.arange(10), np.arange(10.0)]), K=1) == pytest.approx(9.0)
    p = brownian_ticks(rng, 100.0, 500)
    assert tsrv(p, K=1) == pytest.approx(np.sum(np.diff(p[:, 1]) ** 2), rel=1e-14)
    val, floored = tsrv_detail(ramp, K=5)
    assert val >= 0


def test_tsrv_dedupe_invariance(rng):
    p = brownian_ticks(rng, 100.0, 300)
    rep = np.repeat(p, rng.integers(1, 4, p.shape[0]), axis=0)
    assert tsrv(rep) == tsrv(p)


def test_tsrv_unbiased_adjustment(rng):
    sigma = 100.0
    vals = [tsrv(brownian_ticks(rng, sigma, 600), K=5, adjust=True) for _ in range(300)]
    expected = sigma ** 2 * 599 / 86400
    assert np.mean(vals) == pytest.approx(expected, rel=0.05)


def test_vol_path_noiseless(rng):
    sigma = 119.0
    p = brownian_ticks(rng, sigma, 3000)
    vp = vol_path(p, delta_s=600.0, omega2=1.0)
    tail = vp.sigma[vp.ts_ms >= 600_000]
    assert np.median(np.abs(tail / sigma - 1)) <= 0.1
    assert vp.gaps


def test_vol_path_zero_variance():
    p = np.column_stack([np.arange(100) * 1000, np.full(100, 5.0)])
    vp = vol_path(p, delta_s=60.0, omega2=1.0)
    assert vp.sigma.size and np.all(vp.sigma == 0)
    with pytest.raises(ValueError):
        vol_path(p, delta_s=0.0)


def test_z_statistics_variance(rng):
    # six hours at four updates per second on average
    n = 86400
    ts = np.sort(rng.choice(6 * 3600 * 1000, n, replace=False))
    dt = np.diff(np.concatenate([[0], ts])) / 86_400_000
    p = 1000 + np.cumsum(119.0 * np.sqrt(dt) * rng.standard_normal(n)) + 0.1 * rng.standard_normal(n)
    z = z_statistics(np.column_stack([ts, p]), delta_s=60.0, K=5)
    assert 0.75 <= np.var(z, ddof=1) <= 1.1


def test_series_roundtrip(tmp_path):
    write_series(tmp_path / "s.csv", [1, 2, 3], [0.5, 0.25, 0.125])
    ts, v = read_series(tmp_path / "s.csv")
    assert ts.tolist() == [1, 2, 3] and v.tolist() == [0.5, 0.25, 0.125]
    (tmp_path / "bad.csv").write_text("ts_ms,value\n1,x\n")
    with pytest.raises(DataError, match="line 2"):
        read_series(tmp_path / "bad.csv")


def test_ou_mapping_examples():
    lam, m, eta = ou_mapping(0.0, 0.9, 0.0, 1.0, 1.0)
    assert lam == pytest.approx(0.105361, abs=1e-6) and m == 0.0
    assert eta == pytest.approx(np.sqrt(-2 * np.log(0.9) / (1 - 0.81)))
    with pytest.raises(ValueError, match="non-mean-reverting"):
        ou_mapping(0.0, 1.2, 0.0, 1.0, 1.0)


@given(b=st.floats(0.05, 0.99), g=st.floats(0.1, 5), dt=st.floats(1e-4, 1))
def test_ou_mapping_c_zero_identity(b, g, dt):
    _, _, eta = ou_mapping(0.3, b, 0.0, g, dt)
    assert eta == pytest.approx(g * np.sqrt(-2 * np.log(b) / (dt * (1 - b ** 2))), rel=1e-12)


def test_fit_ou_recovers_slow_process(rng):
    x = simulate_ou(2.0, 1.0, 0.5, 0.01, 20_000, rng)
    fit = fit_ou(x, 0.01)
    assert fit.lambda_hat == pytest.approx(2.0, rel=0.25)
    assert fit.m_hat == pytest.approx(1.0, abs=0.1)
    assert fit.eta_hat == pytest.approx(0.5, rel=0.05)
    with pytest.raises(DataError):
        fit_ou(x[:10], 0.01)


def test_simulate_ou_exact_moments(rng):
    x = simulate_ou(1905.218, 0.3782, 4.0134, 15 / 86400, 200_000, rng)
    sd = 4.0134 / np.sqrt(2 * 1905.218)
    assert x.mean() == pytest.approx(0.3782, abs=3 * sd / np.sqrt(x.size) * 3)
    assert x.std() == pytest.approx(sd, rel=0.02)
