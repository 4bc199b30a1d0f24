import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sps

from nfimaging import stats


def test_build_histogram_edges_and_counts():
    h = stats.build_histogram([0, 1, 1, 2.5, 9.99, 10], bin_width=5, start=0)
    assert h.bin_edges.tolist() == [0, 5, 10, 15]
    assert h.counts.tolist() == [4, 1, 1]
    assert h.n_total == 6
    assert h.centers.tolist() == [2.5, 7.5, 12.5]
    with pytest.raises(stats.EmptyInput):
        stats.build_histogram([], bin_width=1)
    with pytest.raises(ValueError):
        stats.build_histogram([1, 2])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.floats(0.1, 50))
def test_histogram_keeps_every_value(values, width):
    h = stats.build_histogram(values, bin_width=width)
    assert h.counts.sum() == len(values)
    assert h.normalized().sum() == pytest.approx(1.0)


def test_histogram_validation():
    with pytest.raises(ValueError):
        stats.Histogram(np.array([0, 1, 2]), np.array([1]), 1)
    with pytest.raises(ValueError):
        stats.Histogram(np.array([0, 2, 1]), np.array([1, 1]), 2)


@given(st.lists(st.floats(0, 10), min_size=3, max_size=10).flatmap(
    lambda p: st.tuples(st.just(p), st.lists(st.floats(0, 10), min_size=len(p), max_size=len(p)))))
def test_total_variation_properties(pq):
    p, q = (np.array(x) + 0.01 for x in pq)
    tv = stats.total_variation(p, q)
    assert 0.0 <= tv <= 1.0 + 1e-12
    assert tv == pytest.approx(stats.total_variation(q, p))
    assert stats.total_variation(p, 3 * p) == pytest.approx(0.0, abs=1e-12)


def _expected_counts(edges, comps):
    out = np.zeros(len(edges) - 1)
    for a, m, s in comps:
        out += a * np.diff(sps.norm.cdf(edges, m, s))
    return out


def test_single_gaussian_fit_on_large_sample():
    v = np.random.default_rng(0).normal(100.0, 12.0, 100_000)
    fit = stats.fit_gaussian_mixture(stats.build_histogram(v, bin_width=2.0), 1)
    assert fit.means[0] == pytest.approx(100.0, abs=0.15)
    assert fit.sigmas[0] == pytest.approx(12.0, rel=0.01)
    assert fit.amplitudes[0] == pytest.approx(100_000, rel=0.01)
    assert fit.reduced_chi2 < 2


@settings(max_examples=20, deadline=None)
@given(st.floats(20, 60), st.floats(80, 200), st.floats(0.2, 0.8))
def test_two_component_fit_recovers_expected_counts(m1, m2, w):
    edges = np.arange(-100.0, 400.0, 2.0)
    comps = [(5000 * w, m1, 8.0), (5000 * (1 - w), m2, 25.0)]
    h = stats.Histogram(edges, _expected_counts(edges, comps), 5000)
    fit = stats.fit_gaussian_mixture(h, 2, init=[(2000, m1 + 3, 10), (2000, m2 - 5, 20)])
    assert fit.means == pytest.approx([m1, m2], abs=0.05)
    assert fit.sigmas == pytest.approx([8.0, 25.0], rel=0.01)


def test_mixture_fit_argument_checks():
    h = stats.build_histogram([1, 2, 3], bin_width=1)
    with pytest.raises(stats.InsufficientData):
        stats.fit_gaussian_mixture(h, 1)
    with pytest.raises(ValueError):
        stats.fit_gaussian_mixture(h, 3)


def test_fit_expected_matches_data():
    v = np.random.default_rng(1).normal(50, 5, 20_000)
    h = stats.build_histogram(v, bin_width=1.0)
    fit = stats.fit_gaussian_mixture(h, 1)
    assert fit.expected(h.bin_edges).sum() == pytest.approx(h.counts.sum(), rel=0.01)


def test_loss_split_formula_against_integration():
    T, tau, f = 0.15, 1.0, 0.445
    split = stats.loss_split_probabilities(T, tau, f)
    pdf = lambda t: math.exp(-t / tau) / tau
    missed, _ = integrate.quad(pdf, 0, f * T)
    seen, _ = integrate.quad(pdf, f * T, T)
    assert split.p_undetected_loss == pytest.approx(missed)
    assert split.p_detected_then_lost == pytest.approx(seen)
    assert split.total == pytest.approx(1 - math.exp(-0.15))
    assert stats.loss_split_probabilities(T, math.inf, f).total == 0.0
    with pytest.raises(ValueError):
        stats.loss_split_probabilities(T, tau, 1.5)


@given(st.floats(0.01, 0.99), st.floats(0.05, 1.0), st.floats(0.2, 5.0))
def test_presence_fraction_inverts_split(f, T, tau):
    p = stats.loss_split_probabilities(T, tau, f).p_undetected_loss
    assert stats.presence_fraction_for_undetected(p, T, tau) == pytest.approx(f, rel=1e-9)


def _model(**kw):
    base = dict(p_false=0.07, tau_s=1.0, T_s=0.15, bg_mean=35.0, bg_sigma=10.5,
                atom_mean=149.0, atom_sigma=30.0, gap_s=0.045)
    base.update(kw)
    return stats.DetectionModel(**base)


def test_detection_model_weights():
    m = _model()
    wb, wf, wp = m.weights()
    assert wb + wf + wp == pytest.approx(1.0)
    lead = (1 - 0.445) * 0.15 + 0.045
    assert m.lead_time == pytest.approx(lead)
    assert wf == pytest.approx(0.93 * math.exp(-(lead + 0.15)))
    ideal = _model(p_false=0.0, f_thr=1.0, gap_s=0.0, tau_s=math.inf)
    assert ideal.weights() == (0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        _model(p_false=1.5)


def test_conditioned_histogram_quadrature_matches_montecarlo():
    m = _model()
    edges = np.arange(0.0, 320.0, 10.0)
    q = stats.predict_conditioned_histogram(m, edges, 1000.0)
    mc = stats.predict_conditioned_histogram(m, edges, 1000.0, "montecarlo", n_draws=1_000_000,
                                             rng=np.random.default_rng(3))
    assert q.counts.sum() == pytest.approx(1000.0)
    se = 1000.0 * np.sqrt(q.counts / 1000.0 / 1_000_000)
    assert np.max(np.abs(q.counts - mc.counts) / np.maximum(se, 1e-9)) < 5
    assert stats.total_variation(q.counts, mc.counts) < 0.005


def test_conditioned_histogram_with_samples():
    g = np.random.default_rng(4)
    m = _model(bg_samples=g.normal(35, 10.5, 50_000), atom_samples=g.normal(149, 30, 50_000))
    edges = np.arange(0.0, 320.0, 10.0)
    with_samples = stats.predict_conditioned_histogram(m, edges, 1000.0)
    gauss = stats.predict_conditioned_histogram(_model(), edges, 1000.0)
    assert stats.total_variation(with_samples.counts, gauss.counts) < 0.02


def test_conditioned_histogram_argument_checks():
    edges = np.arange(0.0, 100.0, 10.0)
    with pytest.raises(ValueError):
        stats.predict_conditioned_histogram(_model(), edges, 10, n_nodes=50)
    with pytest.raises(ValueError):
        stats.predict_conditioned_histogram(_model(), edges, 10, "montecarlo", n_draws=10)
    with pytest.raises(ValueError):
        stats.predict_conditioned_histogram(_model(), edges, 10, "other")


def test_threshold_sweep_recovers_gaussian_tail():
    g = np.random.default_rng(5)
    peaks = np.concatenate([g.normal(40, 8, 19_600), g.normal(80, 11, 400)])
    sweep = stats.threshold_sweep(peaks)
    assert sweep.fit.mean == pytest.approx(40, abs=0.3)
    assert sweep.fit.pair_weight == pytest.approx(0.02, abs=0.01)
    assert sweep.detection_probability(25.0) == pytest.approx(sps.norm.sf(25, 40, 8), abs=0.005)
    assert np.all(np.diff(sweep.survival) <= 0)
    with pytest.raises(stats.InsufficientData):
        stats.threshold_sweep(peaks[:10])


def test_empirical_survival():
    assert stats.empirical_survival([1, 2, 3, 4], [0, 2, 4]).tolist() == [1.0, 0.5, 0.0]


def test_false_detection_curve():
    maxima = [np.array([1.0, 5.0])] * 50 + [np.array([2.0])] * 50
    c = stats.false_detection_curve(maxima, [0.0, 1.5, 3.0, 6.0])
    assert c.mean_per_image.tolist() == [1.5, 1.0, 0.5, 0.0]
    assert c.p_at_least_one.tolist() == [1.0, 1.0, 0.5, 0.0]
    assert c.first_zero() == 6.0
    with pytest.raises(stats.InsufficientData):
        stats.false_detection_curve(maxima[:10], [1.0])


def test_beer_lambert_exact_means():
    groups = {n: 1000 * 0.96 ** n + np.array([-1.0, 1.0] * 50) for n in range(4)}
    res = stats.beer_lambert_analysis(groups)
    assert res.extinctions == pytest.approx([0.04] * 3, abs=1e-12)
    assert res.constant_extinction == pytest.approx(0.04, abs=1e-12)
    assert res.chi2 == pytest.approx(0.0, abs=1e-12)
    assert res.dof == 2 and res.p_value == pytest.approx(1.0)


def test_beer_lambert_errors_propagate():
    g = np.random.default_rng(6)
    groups = {n: g.normal(4500 * 0.96 ** n, 90, 200) for n in range(4)}
    res = stats.beer_lambert_analysis(groups)
    se = 90 / math.sqrt(200)
    expected = (1 - 0.04) * math.sqrt(2) * se / 4500
    assert res.extinction_errors[0] == pytest.approx(expected, rel=0.15)


def test_beer_lambert_group_checks():
    with pytest.raises(stats.InsufficientGroup):
        stats.beer_lambert_analysis({0: np.ones(100)})
    with pytest.raises(stats.InsufficientGroup):
        stats.beer_lambert_analysis({0: np.ones(100), 2: np.ones(100)})
    with pytest.raises(stats.InsufficientGroup):
        stats.beer_lambert_analysis({0: np.ones(100), 1: np.ones(10)})


def test_mode_weight_fit_recovers_mixture():
    g = np.random.default_rng(7)
    a = g.normal(0, 1, 400_000)
    b = g.normal(3, 1, 400_000)
    data = np.concatenate([g.normal(0, 1, 7000), g.normal(3, 1, 3000)])
    fit = stats.fit_mode_weight(data, a, b, np.arange(-5, 9, 0.25))
    assert fit.weight == pytest.approx(0.7, abs=0.02)
    assert 0 < fit.error < 0.02
