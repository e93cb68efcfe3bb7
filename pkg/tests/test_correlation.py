import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

import counted_implant.correlation as corr
from counted_implant.correlation import (BackgroundRatio, CoincidenceHistogram, EmitterDynamics,
                                         G2FitError, G2ModelParams, background_correct,
                                         background_ratio, classify_spe, coincidence_histogram,
                                         fit_g2, g2_model, nearest_neighbour_distance,
                                         nv_separation, simulate_photon_streams)

DYN = EmitterDynamics()
FAST = replace(DYN, collection=1.0)
params = st.builds(G2ModelParams, st.floats(1, 50), st.floats(0, 5), st.floats(0.1, 20),
                   st.floats(0.1, 50))


def test_params_validation():
    for kw in ({"n_emitters": 0.5}, {"a": -1}, {"t1": 0}, {"t2": -2}):
        with pytest.raises(ValueError):
            G2ModelParams(**kw)


def test_g2_model_examples():
    assert g2_model(0.0, G2ModelParams(1, 0.3, 2.33, 6.23)) == pytest.approx(0.0, abs=1e-15)
    assert g2_model(0.0, G2ModelParams(2, 0.3, 2.33, 6.23)) == 0.5
    assert g2_model(1e4, G2ModelParams(1, 2.0, 2.33, 6.23)) == 1.0


@given(params)
def test_g2_at_zero_is_one_minus_inverse_n(p):
    assert g2_model(0.0, p) == 1 - 1 / p.n_emitters


@given(params, st.floats(-200, 200))
def test_g2_is_even(p, t):
    assert g2_model(t, p) == g2_model(-t, p)


def test_background_correct_examples():
    assert background_correct(0.37, 1.0) == pytest.approx(0.37)
    assert background_ratio(12, 2) == pytest.approx(0.8333333333, rel=1e-9)
    assert background_correct(0.4, background_ratio(12, 2)) == pytest.approx(0.136, abs=1e-9)
    with pytest.raises(ValueError):
        background_correct(0.5, 0.0)
    with pytest.raises(ValueError):
        BackgroundRatio(2, 3)
    assert BackgroundRatio(10, 0).rho == 1.0


@given(st.floats(1e-3, 1.0))
def test_uncorrelated_light_is_fixed_point(rho):
    assert background_correct(1.0, rho) == pytest.approx(1.0, abs=1e-12)


@given(st.floats(0, 1), st.floats(1e-3, 1.0))
def test_correction_deepens_dips(g, rho):
    assert background_correct(g, rho) <= g + 1e-12


def test_dynamics_steady_state():
    pops = DYN.populations()
    assert pops.sum() == pytest.approx(1.0)
    assert np.allclose(pops @ DYN.generator(), 0.0, atol=1e-15)
    assert DYN.emission_rate() == pytest.approx(0.07061534438803303, rel=1e-12)
    assert DYN.detected_kcps() == pytest.approx(10.7, rel=0.05)


def test_lifetimes_from_rates():
    # roots of x^2 - (sum of rates) x + (product terms) = 0
    p = DYN.g2_params()
    assert p.t1 == pytest.approx(2.3306988821420607, rel=1e-9)
    assert p.t2 == pytest.approx(6.232698585881386, rel=1e-9)
    assert p.a == pytest.approx(0.3665, abs=1e-3)


def test_exact_g2_matches_master_equation_integration():
    t_eval = np.array([0.0, 0.5, 1.0, 2.33, 5.0, 12.0, 40.0])
    q = DYN.generator()
    sol = solve_ivp(lambda t, p: p @ q, (0, 40), [1.0, 0.0, 0.0], t_eval=t_eval, rtol=1e-10,
                    atol=1e-12)
    oracle = sol.y[1] / DYN.populations()[1]
    assert np.allclose(DYN.g2_exact(t_eval), oracle, atol=1e-8)
    assert np.allclose(g2_model(t_eval, DYN.g2_params()), oracle, atol=1e-8)


def test_no_pump_gives_background_only(rng):
    dark = replace(DYN, k_ex=0.0)
    a, b = simulate_photon_streams(3, dark, 50.0, 0.2, rng)
    n = a.size + b.size
    assert n == pytest.approx(50e3 * 0.2, abs=5 * math.sqrt(1e4))
    a, b = simulate_photon_streams(3, dark, 0.0, 0.2, rng)
    assert a.size == b.size == 0


def test_detected_rate_matches_steady_state(rng):
    a, b = simulate_photon_streams(1, FAST, 0.0, 2e-3, rng)
    rate = (a.size + b.size) / 2e-3
    assert rate == pytest.approx(FAST.emission_rate() * 1e9, rel=0.05)
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)
    assert a.size == pytest.approx(b.size, rel=0.05)
    with pytest.raises(ValueError):
        simulate_photon_streams(1, FAST, 0.0, 0.0, rng)


def test_histogram_counts_by_hand():
    a = np.array([0.0, 10.0])
    b = np.array([0.2, 9.0, 30.0])
    h = coincidence_histogram(a, b, bin_ns=1.0, window_ns=5.0, duration_ns=100.0)
    assert list(h.lags_ns[[0, 5, -1]]) == [-5.0, 0.0, 5.0]
    # lags 0.2 (bin 0) and -1.0 (bin -1); 9.0 from a=0 is outside the window
    assert h.counts[5] == 1 and h.counts[4] == 1 and h.counts.sum() == 2
    assert h.norm == pytest.approx((2 / 100) * (3 / 100) * 1.0 * 100)
    with pytest.raises(ValueError):
        coincidence_histogram(np.array([]), b)
    with pytest.raises(ValueError):
        coincidence_histogram(a, b, bin_ns=1.0, window_ns=0.5)


def _poisson_pair(rng, rate_per_ns, dur_ns):
    n = rng.poisson(rate_per_ns * dur_ns)
    t = np.sort(rng.uniform(0, dur_ns, n))
    side = rng.random(n) < 0.5
    return t[side], t[~side]


def test_uncorrelated_streams_are_flat(rng):
    a, b = _poisson_pair(rng, 0.05, 5e6)
    h = coincidence_histogram(a, b, duration_ns=5e6)
    z = (h.g2 - 1) / h.g2_err
    assert np.all(np.abs(z) < 5)
    assert abs(h.g2.mean() - 1) < 3 * h.g2_err.mean() / math.sqrt(h.g2.size)


def test_doubling_duration_shrinks_error_by_root_two(rng):
    a, b = _poisson_pair(rng, 0.05, 4e6)
    h1 = coincidence_histogram(a[a < 2e6], b[b < 2e6], duration_ns=2e6)
    h2 = coincidence_histogram(a, b, duration_ns=4e6)
    assert h2.g2_err.mean() / h1.g2_err.mean() == pytest.approx(1 / math.sqrt(2), rel=0.05)


def _synthetic_hist(p, rng, norm=2000.0, bin_ns=0.5, window=50.0):
    n_half = int(window / bin_ns)
    lags = np.arange(-n_half, n_half + 1) * bin_ns
    sub = (np.arange(9) + 0.5) / 9 - 0.5
    mean = g2_model(lags[:, None] + sub[None, :] * bin_ns, p).mean(axis=1)
    counts = rng.poisson(mean * norm)
    return CoincidenceHistogram(lags, counts / norm, counts, bin_ns, norm, 1.0, 1, 1)


def test_fit_round_trip_on_model_data(rng):
    truth = G2ModelParams(1, 0.3, 2.33, 6.23)
    fit = fit_g2(_synthetic_hist(truth, rng, norm=20_000), 1.0)
    assert fit.params.t1 == pytest.approx(2.33, rel=0.1)
    assert fit.params.t2 == pytest.approx(6.23, rel=0.1)
    assert fit.params.a == pytest.approx(0.3, rel=0.1)
    assert fit.g2_zero < 0.02
    assert not fit.no_antibunching


def test_flat_histogram_flags_no_antibunching():
    lags = np.arange(-100, 101) * 0.5
    counts = np.full(lags.size, 1000)
    h = CoincidenceHistogram(lags, counts / 1000.0, counts, 0.5, 1000.0, 1.0, 1, 1)
    fit = fit_g2(h, 1.0)
    assert fit.no_antibunching
    assert fit.g2_zero == pytest.approx(1.0, abs=0.02)
    assert classify_spe(fit) in ("classical", "non_classical_only")


def test_fit_failure_raises(monkeypatch, rng):
    class Res:
        status = 0
        message = "max iterations"
        x = np.array([0.5, 0.3, 2.0, 8.0])

    monkeypatch.setattr(corr, "least_squares", lambda *a, **k: Res())
    with pytest.raises(G2FitError) as err:
        fit_g2(_synthetic_hist(G2ModelParams(), rng), 1.0)
    assert np.array_equal(err.value.last, Res.x)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_simulated_emitters_close_the_loop(n):
    rng = np.random.default_rng(100 + n)
    a, b = simulate_photon_streams(n, FAST, 0.0, 1e-3, rng)
    fit = fit_g2(coincidence_histogram(a, b, duration_ns=1e6), 1.0)
    assert abs(fit.g2_zero - (1 - 1 / n)) < 3 * fit.g2_zero_err + 1e-9
    if n == 1:
        assert fit.g2_zero < 0.1
    if n == 2:
        assert 0.45 <= fit.g2_zero <= 0.55


def test_background_corrected_simulation():
    rng = np.random.default_rng(7)
    sig = FAST.emission_rate() * 1e6  # kcps
    bg = sig / 4
    a, b = simulate_photon_streams(1, FAST, bg, 1e-3, rng)
    h = coincidence_histogram(a, b, duration_ns=1e6)
    raw = fit_g2(h, 1.0)
    fixed = fit_g2(h, background_ratio(sig + bg, bg))
    assert raw.g2_zero > 0.2
    assert fixed.g2_zero < 0.1


def test_classify_spe():
    assert classify_spe(0.3) == "single"
    assert classify_spe(0.6) == "multi"
    assert classify_spe(0.0) == "single"
    assert classify_spe(0.5) == "multi"
    assert classify_spe(0.8) == "non_classical_only"
    assert classify_spe(1.0) == "classical"
    assert classify_spe(G2ModelParams(n_emitters=2)) == "multi"


def test_nv_separation_table():
    table = {(1.0, 0.45): 230, (0.1, 0.45): 497, (1.0, 0.10): 381, (0.1, 0.10): 820}
    for (ppb, y), nm in table.items():
        assert nv_separation(ppb, y) == pytest.approx(nm, rel=0.03)
    # hand arithmetic: (1e-9 * 1.76e23 * 0.45)^(-1/3) cm
    assert nv_separation(1.0, 0.45) == pytest.approx(232.85823759019067, rel=1e-12)
    assert nv_separation(8.0, 0.45) == pytest.approx(nv_separation(1.0, 0.45) / 2, rel=1e-12)
    with pytest.raises(ValueError):
        nv_separation(0.0, 0.45)
    with pytest.raises(ValueError):
        nv_separation(1.0, -0.1)


@given(st.floats(0.01, 100), st.floats(0.01, 1), st.floats(1.01, 10))
def test_nv_separation_decreasing(ppb, y, f):
    assert nv_separation(ppb * f, y) < nv_separation(ppb, y)
    assert nv_separation(ppb, min(y * f, 1.0)) <= nv_separation(ppb, y)


def test_nearest_neighbour_mean(rng):
    n = 7.92e13
    r = nearest_neighbour_distance(n, rng, size=200_000)
    expected = math.gamma(4 / 3) * (3 / (4 * math.pi * n)) ** (1 / 3) * 1e7
    assert r.mean() == pytest.approx(expected, rel=0.01)
