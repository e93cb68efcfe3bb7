import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import poisson

from counted_implant.beamline import BeamConfig, DetectorConfig, amplitude_for_ions
from counted_implant.controller import ImplantPlan, implant_arrays, implant_site
from counted_implant.pulsefit import (AmplitudeHistogram, ErrorBudget, MixtureFit, MixtureFitError,
                                      Thresholds, build_histogram, classify_amplitudes,
                                      classify_pulse, estimate_lambda, fit_mixture, in_situ_budget,
                                      mixture_from_detector, multiples_rate, post_budget,
                                      reconstruct_sites, timed_error)
from counted_implant.streams import child_rng

TH = Thresholds()


def tail_above(x, mu, s):
    return 0.5 * math.erfc((x - mu) / (s * math.sqrt(2)))


def test_threshold_order_enforced():
    with pytest.raises(ValueError):
        Thresholds(in_situ=0.5, post_low=0.6)
    with pytest.raises(ValueError):
        Thresholds(post_high=0.7)


@given(st.lists(st.floats(-2, 10), min_size=1, max_size=500), st.floats(0.005, 0.5))
def test_histogram_conserves_events(a, bw):
    h = build_histogram(np.array(a), bw)
    assert h.total == len(a)
    assert np.all(np.diff(h.edges) > 0)
    assert np.all(h.counts >= 0)


def test_histogram_accepts_logs_and_records():
    log = implant_site(ImplantPlan(preset=3), BeamConfig(0.3), DetectorConfig(), child_rng(0, "h"))
    assert build_histogram([log]).total == log.n_pulses
    assert build_histogram(log.records).total == log.n_pulses


def test_histogram_empty_and_bad_width():
    with pytest.raises(ValueError):
        build_histogram(np.array([]))
    with pytest.raises(ValueError):
        build_histogram(np.array([1.0]), 0.0)


def test_identical_amplitudes_fill_one_bin():
    h = build_histogram(np.full(1000, 1.27), 0.02)
    assert np.count_nonzero(h.counts) == 1


def _mixture_sample(seed, lam=1.0, n=100_000):
    det = DetectorConfig(noise_sigma_pileup=0.0)
    w = poisson.pmf([0, 1, 2], lam)
    w /= w.sum()
    mu = np.arange(3) * det.per_ion_amplitude
    sg = det.width(np.arange(3))
    rng = np.random.default_rng(seed)
    k = rng.choice(3, size=n, p=w)
    return mu[k] + sg[k] * rng.standard_normal(n), np.bincount(k, minlength=3), mu, sg


def test_mixture_round_trip():
    a, n, mu, sg = _mixture_sample(0)
    fit = fit_mixture(build_histogram(a, 0.02), 3)
    assert np.allclose(fit.areas, n, rtol=0.02)
    assert np.all(np.abs(fit.means - mu) <= 0.005 * np.r_[mu[1], mu[1:]])
    assert np.allclose(fit.widths, sg, rtol=0.03)
    assert fit.areas.sum() == pytest.approx(a.size, rel=0.01)
    assert fit.stderr.shape == (3, 3)
    assert 0.5 < fit.chi2_red < 2.0


def test_single_peak_fit_matches_moments(rng):
    a = rng.normal(1.2, 0.3, 50_000)
    fit = fit_mixture(build_histogram(a, 0.02), 1)
    assert fit.means[0] == pytest.approx(a.mean(), abs=0.005)
    assert fit.widths[0] == pytest.approx(a.std(), rel=0.01)


def test_too_few_maxima_is_an_error(rng):
    a = rng.normal(0.0, 0.2, 20_000)
    with pytest.raises(MixtureFitError):
        fit_mixture(build_histogram(a, 0.02), 3)
    with pytest.raises(ValueError):
        fit_mixture(build_histogram(a, 0.02), 1, model="bogus")


def test_ladder_fit_on_simulated_run():
    logs = implant_arrays(ImplantPlan(), BeamConfig(0.1, 4.9e-6), DetectorConfig(), 1, n_arrays=2)
    amps = np.concatenate([lg.amplitude for lg in logs])
    ions = np.concatenate([lg.true_ions for lg in logs])
    fit = fit_mixture(build_histogram(amps, 0.02), 3, model="ladder")
    true_ratio = np.sum(ions == 1) / np.sum(ions == 0)
    assert estimate_lambda(fit) == pytest.approx(true_ratio, rel=0.03)
    assert estimate_lambda(fit) == pytest.approx(0.112, abs=0.005)
    assert fit.means[1] == pytest.approx(DetectorConfig().per_ion_amplitude, rel=0.01)


def test_estimate_lambda():
    f = MixtureFit([1000.0, 112.0, 6.0], [0.0, 1.2, 2.4], [0.2, 0.3, 0.4])
    assert estimate_lambda(f) == pytest.approx(0.112)
    assert estimate_lambda(MixtureFit([5.0, 5.0], [0, 1], [0.1, 0.1])) == 1.0
    with pytest.raises(ValueError):
        estimate_lambda(MixtureFit([0.0, 5.0], [0, 1], [0.1, 0.1]))


@pytest.mark.parametrize("lam", [0.05, 0.1, 0.3])
def test_lambda_from_simulated_amplitudes(lam):
    rng = np.random.default_rng(int(lam * 1000))
    n = 400_000
    k = rng.poisson(lam, n)
    a = amplitude_for_ions(k, DetectorConfig(), rng)
    fit = fit_mixture(build_histogram(a, 0.02), 3, model="ladder")
    se = lam * math.sqrt(1 / np.sum(k == 1) + 1 / np.sum(k == 0))
    assert abs(estimate_lambda(fit) - lam) < 4 * se + 0.01 * lam


def test_multiples_rate_values():
    # Poisson series oracle: sum_{k>=2} P(k) / P(1)
    assert multiples_rate(0.112) == pytest.approx(0.05815054147361782, abs=1e-12)
    assert multiples_rate(0.1) == pytest.approx(0.05170918075647624, abs=1e-12)
    assert multiples_rate(0.0) == 0.0
    with pytest.raises(ValueError):
        multiples_rate(-0.1)


@given(st.floats(1e-6, 3.0))
def test_multiples_rate_matches_series(lam):
    series = sum(poisson.pmf(k, lam) for k in range(2, 80)) / poisson.pmf(1, lam)
    assert multiples_rate(lam) == pytest.approx(series, rel=1e-8, abs=1e-12)


@given(st.floats(1e-8, 1e-3))
def test_multiples_rate_small_lambda_limit(lam):
    assert multiples_rate(lam) == pytest.approx(lam / 2, rel=1e-3)


def test_in_situ_budget_default_detector():
    # frozen from the error-function oracle at lambda 0.112
    b = in_situ_budget(mixture_from_detector(DetectorConfig(), 0.112), TH)
    assert b.fn_rate == pytest.approx(0.0837355361629393, abs=1e-9)
    assert b.fp_rate == pytest.approx(0.00025913182033785294, abs=1e-11)
    assert b.mult_rate == pytest.approx(0.05815054147361767, abs=1e-12)
    assert b.single_as_double_rate == 0.0
    assert b.total_plus == pytest.approx(0.14188607763655697, abs=1e-9)


def test_post_budget_default_detector():
    b = post_budget(mixture_from_detector(DetectorConfig(), 0.112), TH)
    assert b.fn_rate == pytest.approx(0.022216809114473882, abs=1e-9)
    assert b.fp_rate == pytest.approx(0.008852175580631054, abs=1e-9)
    assert b.mult_rate == pytest.approx(0.016774554747093627, abs=1e-9)
    assert b.single_as_double_rate == pytest.approx(0.003007039998223493, abs=1e-9)
    assert b.total_plus == pytest.approx(0.03899136386156751, abs=1e-9)
    assert b.total_minus == pytest.approx(0.011859215578854547, abs=1e-9)


def test_separated_peaks_have_no_errors():
    f = MixtureFit([1e6, 1e5, 1e4], [0.0, 1.3, 20.0], [0.01, 0.01, 0.01])
    b = in_situ_budget(f, TH)
    assert b.fn_rate == 0.0 and b.fp_rate == 0.0
    p = post_budget(f, TH)
    assert p.fn_rate == p.fp_rate == p.mult_rate == p.single_as_double_rate == 0.0
    with pytest.raises(ValueError):
        post_budget(MixtureFit([1.0, 1.0], [0.0, 1.0], [0.1, 0.1]), TH)


def test_doubled_one_ion_width_follows_normal_tail():
    det = DetectorConfig()
    f = mixture_from_detector(det, 0.112)
    wide = MixtureFit(f.areas, f.means, f.widths * np.r_[1, 2, 1])
    fn = in_situ_budget(wide, TH).fn_rate
    oracle = 1 - tail_above(0.78, f.means[1], 2 * f.widths[1])
    assert abs(fn - oracle) < 1e-3


@settings(max_examples=80)
@given(st.floats(0.01, 0.4), st.floats(0.05, 0.5), st.floats(0.05, 0.6), st.floats(0.05, 1.0),
       st.floats(0.9, 1.6))
def test_budget_rates_are_tail_integrals(lam, s0, s1, s2, a1):
    areas = poisson.pmf([0, 1, 2], lam) * 1e5
    f = MixtureFit(areas, [0.0, a1, 2 * a1], [s0, s1, s2])
    b = in_situ_budget(f, TH)
    p = post_budget(f, TH)
    r = areas[1]
    assert b.fn_rate == pytest.approx(1 - tail_above(0.78, a1, s1), abs=5e-4)
    assert b.fp_rate == pytest.approx(areas[0] * tail_above(0.78, 0, s0) / r, abs=5e-4)
    assert p.fn_rate == pytest.approx(1 - tail_above(0.6, a1, s1), abs=5e-4)
    assert p.fp_rate == pytest.approx(areas[0] * tail_above(0.6, 0, s0) / r, abs=5e-4)
    assert p.mult_rate == pytest.approx(areas[2] * (1 - tail_above(1.96, 2 * a1, s2)) / r, abs=5e-4)
    assert p.single_as_double_rate == pytest.approx(tail_above(1.96, a1, s1), abs=5e-4)
    for bud in (b, p):
        assert bud.total_plus == bud.fn_rate + bud.mult_rate
        assert bud.total_minus == bud.fp_rate + bud.single_as_double_rate


def test_budget_dict_round_trip():
    b = ErrorBudget(0.02, 0.01, 0.015, 0.003)
    d = b.as_dict()
    assert d["total_plus"] == pytest.approx(0.035)
    assert d["total_minus"] == pytest.approx(0.013)
    assert b.net == pytest.approx(0.022)


def test_timed_error():
    assert timed_error(30) == pytest.approx(0.18257418583505536, abs=1e-15)
    assert timed_error(1) == 1.0
    assert timed_error(100) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        timed_error(0)


def test_classify_pulse_examples():
    assert classify_pulse(0.5, TH) == 0
    assert classify_pulse(1.3, TH) == 1
    assert classify_pulse(2.5, TH) == 2
    assert classify_pulse(0.6, TH) == 0
    assert classify_pulse(1.96, TH) == 1
    assert classify_pulse(4.7, TH, mode="round", one_ion_amplitude=1.175) == 4
    assert classify_pulse(2.0, TH, mode="round", one_ion_amplitude=1.175) == 2
    with pytest.raises(ValueError):
        classify_pulse(2.5, TH, mode="round")
    with pytest.raises(ValueError):
        classify_pulse(2.5, TH, mode="nearest")


@given(st.lists(st.floats(-1, 12), min_size=2, max_size=100), st.sampled_from(["two", "round"]))
def test_classification_is_monotone(a, mode):
    a = np.sort(np.array(a))
    n = classify_amplitudes(a, TH, mode=mode, one_ion_amplitude=1.175)
    assert np.all(np.diff(n) >= 0)


def test_reconstruct_noise_free_single_ion_world():
    det = DetectorConfig(noise_sigma0=0.0, noise_sigma_ion=0.0, noise_sigma_pileup=0.0)
    logs = [implant_site(ImplantPlan(), BeamConfig(1e-4), det, child_rng(0, "w", i), site_index=i)
            for i in range(40)]
    rec = reconstruct_sites(logs, TH)
    assert np.all(rec.counts == 30)
    assert rec.mean == 30 and rec.sigma == 0.0 and rec.method == "moments"


def test_timed_overlay():
    logs = [implant_site(ImplantPlan(), BeamConfig(0.1), DetectorConfig(), child_rng(1, "t", i),
                         site_index=i) for i in range(60)]
    rec = reconstruct_sites(logs, TH)
    assert rec.timed_sigma == pytest.approx(5.477225575, rel=1e-9)
    assert rec.timed_fwhm == pytest.approx(12.898, abs=1e-3)
    assert rec.fwhm == pytest.approx(2.3548200450309493 * rec.sigma)
    with pytest.raises(ValueError):
        reconstruct_sites(logs[:10], TH)


def test_reconstruction_matches_post_budget():
    # mean(true - reconstructed) = N1 * (net post error + losses of >=3-ion pulses read as 2)
    lam = 0.112
    det = DetectorConfig()
    logs = [implant_site(ImplantPlan(), BeamConfig(lam), det, child_rng(2, "c", i), site_index=i)
            for i in range(1500)]
    rec = reconstruct_sites(logs, TH)
    true = np.array([lg.implanted_true for lg in logs])
    n1 = np.array([np.sum(lg.true_ions == 1) for lg in logs])
    b = post_budget(mixture_from_detector(det, lam), TH)
    k = np.arange(3, 30)
    big = np.sum((k - 2) * poisson.pmf(k, lam)) / poisson.pmf(1, lam)
    diff = true - rec.counts
    predicted = n1.mean() * (b.net + big)
    assert abs(diff.mean() - predicted) < 4 * diff.std(ddof=1) / math.sqrt(diff.size)
