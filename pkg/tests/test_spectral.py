import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nfimaging import sim, spectral
from nfimaging.core import ExperimentConfig


def _geom(theta_deg=20.0, n=1.14):
    k0 = 2 * math.pi / 0.852
    return spectral.InterferenceGeometry(0.498, k0, n * k0, math.radians(theta_deg))


def test_alias_frequency_closed_form():
    g = _geom()
    dd = 2 * math.pi / (g.k_nf + g.k0 * math.sin(g.theta))
    assert spectral.constructive_spacing(g) == pytest.approx(dd)
    assert spectral.alias_frequency(g) == pytest.approx(abs(1 / 0.498 - 1 / dd))


def test_default_geometry_alias(cfg):
    g = spectral.InterferenceGeometry.from_config(cfg)
    assert spectral.alias_frequency(g) == pytest.approx(0.269, abs=1e-9)
    text = spectral.geometry_report(g)
    assert "alias frequency (1/um): 0.2690" in text


def test_geometry_validation():
    with pytest.raises(ValueError):
        spectral.InterferenceGeometry(0.0, 1.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        spectral.InterferenceGeometry(0.5, 1.0, 1.0, math.pi / 2)


def _cycle_distance(a, b):
    d = (a - b) % 1.0
    return min(d, 1.0 - d)


@given(st.integers(0, 2000))
def test_relative_phase_wraps_and_matches_alias(m):
    g = _geom()
    ph = spectral.relative_phase(m, g)
    assert 0.0 <= ph < 2 * math.pi
    # folded to one cycle, the phase advances by the alias frequency times the separation
    alias_cycles = m * g.lattice_spacing * spectral.alias_frequency(g)
    frac = ph / (2 * math.pi)
    assert min(_cycle_distance(frac, alias_cycles), _cycle_distance(frac, -alias_cycles)) < 1e-6


def test_relative_phase_vector_and_negative():
    g = _geom()
    assert spectral.relative_phase(np.array([0, 1, 2]), g).shape == (3,)
    assert spectral.relative_phase(0, g) == 0.0
    with pytest.raises(ValueError):
        spectral.relative_phase(-1, g)


def test_bragg_angle_gives_in_phase_sites():
    g = _geom()
    b = g.bragg_angle
    if not math.isnan(b):
        g2 = spectral.InterferenceGeometry(g.lattice_spacing, g.k0, g.k_nf, b)
        assert (g2.phase_per_site / (2 * math.pi)) % 1.0 == pytest.approx(0.0, abs=1e-9)


def test_phase_histogram_counts_and_distinct_sites(cfg):
    sites, probs = sim.site_distribution(cfg)
    g = spectral.InterferenceGeometry.from_config(cfg)
    h = spectral.phase_histogram(sites, probs, g, 5000, np.random.default_rng(0))
    assert h.counts.sum() == 5000 and h.counts.size == 20
    assert h.bin_edges[-1] == pytest.approx(2 * math.pi)
    with pytest.raises(ValueError):
        spectral.phase_histogram(sites, probs * 2, g, 10, np.random.default_rng(0))


def _oracle_power(x, y, f):
    A = np.column_stack([np.ones_like(x), np.cos(2 * np.pi * f * x), np.sin(2 * np.pi * f * x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef[1] ** 2 + coef[2] ** 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_periodogram_power_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(1, 200, 120))
    y = 300 + 20 * np.cos(2 * np.pi * 0.27 * x + 1.0) + rng.normal(0, 5, x.size)
    freqs = np.array([0.05, 0.13, 0.27, 0.61])
    pg = spectral.periodogram(x, y, freq_grid=np.linspace(0.01, 1, 400))
    power, _, _ = spectral._sinusoid_fit(x, y, freqs)
    for f, p in zip(freqs, power):
        assert p == pytest.approx(_oracle_power(x, y, f), rel=1e-8, abs=1e-9)
    assert pg.peak.frequency == pytest.approx(0.27, abs=0.005)


def test_periodogram_noiseless_peak_and_amplitude():
    x = np.linspace(1, 300, 500)
    y = 50 + 10 * np.sin(2 * np.pi * 0.269 * x)
    pg = spectral.periodogram(x, y, freq_grid=np.linspace(0, 1, 2001))
    assert pg.peak.frequency == pytest.approx(0.269, abs=1e-4)
    assert pg.peak.power == pytest.approx(100.0, rel=0.01)
    assert pg.peak.uncertainty < 1e-3
    assert pg.power[0] == 0.0


def test_periodogram_input_checks():
    x = np.arange(1, 61, dtype=float)
    with pytest.raises(spectral.InsufficientSamples):
        spectral.periodogram(x[:10], x[:10])
    with pytest.raises(ValueError):
        spectral.periodogram(x, x[:-1])
    with pytest.raises(ValueError):
        spectral.periodogram(x - 5, x)
    with pytest.raises(ValueError):
        spectral.periodogram(x, x, freq_grid=[0.3, 0.2, 0.1])


def test_default_grid_rule():
    grid = spectral.default_frequency_grid([1.0, 2.0, 3.0, 5.0])
    assert grid[-1] == pytest.approx(0.5) and grid.size == 2048
    with pytest.raises(spectral.InsufficientSamples):
        spectral.default_frequency_grid([2.0, 2.0])


def test_noise_free_expected_counts_peak_at_alias(cfg):
    # expected two-atom counts versus lattice separation carry the alias frequency
    g = spectral.InterferenceGeometry.from_config(cfg)
    m = np.arange(1, 400)
    ph = spectral.relative_phase(m, g)
    y = np.array([sim.expected_scatter_counts(cfg.spcm_bg_mean, [36.0, 36.0], p) for p in ph])
    pg = spectral.periodogram(m * cfg.lattice_spacing, y, freq_grid=np.linspace(0, 1, 2001))
    assert pg.peak.frequency == pytest.approx(spectral.alias_frequency(g), abs=2e-4)


def test_binned_dft_agrees_on_peak():
    rng = np.random.default_rng(3)
    x = rng.uniform(1, 200, 3000)
    y = 10 * np.cos(2 * np.pi * 0.2 * x) + rng.normal(0, 1, x.size)
    freqs = np.linspace(0.05, 0.5, 451)
    p = spectral.binned_dft_power(x, y, 0.5, freqs)
    assert freqs[np.argmax(p)] == pytest.approx(0.2, abs=0.002)
