import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import signal

from nfimaging import detect, sim
from nfimaging.core import AtomRecord, Frame, GroundTruth, ImageSeries, RandomStream
from nfimaging.stats import FitDiverged


@pytest.fixture(scope="module")
def detector(cfg):
    refs = sim.render_reference_frames(cfg, 200, RandomStream(21))
    return detect.Detector.from_config(cfg, refs)


def test_kernel_normalisation_and_peak():
    k = detect.make_kernel(1.5, 11)
    assert k.weights.sum() == pytest.approx(1.0)
    sigma = 1.5 / (2 * math.sqrt(2 * math.log(2)))
    x = np.arange(-5, 6)
    g2 = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma ** 2))
    assert k.peak == pytest.approx(1.0 / g2.sum(), rel=1e-12)
    assert k.peak == pytest.approx(0.3917, abs=5e-5)
    assert k.from_peak_units(18.0) == pytest.approx(18.0 * k.peak)
    assert k.sigma_px == pytest.approx(sigma)


def test_kernel_argument_checks():
    with pytest.raises(detect.EvenKernelSize):
        detect.make_kernel(1.5, 10)
    with pytest.raises(ValueError):
        detect.make_kernel(-1.0, 11)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(11, 30), st.integers(11, 30)),
                  elements=st.floats(0, 1000)))
def test_convolution_matches_scipy(img):
    k = detect.make_kernel(1.5, 11)
    ref = signal.correlate2d(img, k.weights, mode="same", boundary="fill")
    assert np.allclose(detect.convolve(img, k), ref, rtol=1e-10, atol=1e-9)


def test_convolution_of_constant_interior_is_constant():
    k = detect.make_kernel(1.5, 11)
    out = detect.convolve(np.full((30, 30), 7.0), k)
    assert np.allclose(out[5:-5, 5:-5], 7.0)


def test_convolve_rejects_small_frames():
    with pytest.raises(detect.FrameTooSmall):
        detect.convolve(np.zeros((5, 40)), detect.make_kernel())


def test_background_template_checks():
    assert np.array_equal(detect.background_template([np.ones((2, 2)), 3 * np.ones((2, 2))]), 2 * np.ones((2, 2)))
    with pytest.raises(detect.EmptyReferenceSet):
        detect.background_template([])
    with pytest.raises(detect.ShapeMismatch):
        detect.background_template([np.ones((2, 2)), np.ones((3, 2))])


def test_sum3x3_and_block_sums():
    a = np.arange(36).reshape(6, 6)
    assert detect.sum3x3(a, 1, 1) == a[:3, :3].sum()
    assert detect.sum3x3(a, 0, 3) is None and detect.sum3x3(a, 3, 5) is None
    blocks = detect.disjoint_block_sums(a)
    assert blocks.tolist() == [a[:3, :3].sum(), a[:3, 3:].sum(), a[3:, :3].sum(), a[3:, 3:].sum()]
    assert detect.disjoint_block_sums(np.ones((7, 8))).tolist() == [9] * 4


@given(st.lists(st.integers(0, 5), min_size=0, max_size=40))
def test_row_maxima_brute_force(values):
    v = np.array(values, float)
    got = detect.row_maxima(v).tolist()
    expect = []
    i = 1
    while i < len(v) - 1:
        j = i
        while j + 1 < len(v) and v[j + 1] == v[i]:
            j += 1
        if j < len(v) - 1 and v[i - 1] < v[i] and v[j + 1] < v[i]:
            expect.append(i)
        i = j + 1
    assert got == expect


def _frame_with_atoms(cfg, cols, scale=1.0):
    img = np.full((cfg.frame_height_px, cfg.frame_width_px), cfg.background_mean_counts / 9.0)
    for c in cols:
        img = img + scale * sim.spot_template(cfg, c)
    return np.rint(img).astype(int)


def test_detects_noiseless_atom(cfg, detector):
    ev = detector.detect(_frame_with_atoms(cfg, [45]))
    assert [e.pixel_col for e in ev] == [45]
    e = ev[0]
    assert e.in_roi and not e.above_upper_bound
    assert e.position_um == pytest.approx(45 * cfg.pixel_pitch_um_object)
    assert e.raw_3x3_sum == detect.sum3x3(_frame_with_atoms(cfg, [45]), cfg.atom_row, 45)


def test_dim_atom_below_threshold_and_bright_above_upper_bound(cfg, detector):
    assert detector.detect(_frame_with_atoms(cfg, [45], scale=0.05)) == []
    bright = detector.detect(_frame_with_atoms(cfg, [45], scale=2.5))
    assert bright and bright[0].above_upper_bound


def test_roi_flag(cfg, detector):
    ev = detector.detect(_frame_with_atoms(cfg, [10]))
    assert ev and not ev[0].in_roi


def test_detect_in_frame_matches_detector(cfg, detector):
    refs = sim.render_reference_frames(cfg, 20, RandomStream(22))
    bg = detect.background_template(refs)
    img = _frame_with_atoms(cfg, [30, 60])
    ev = detect.detect_in_frame(img, detector.kernel, bg, cfg.atom_row, detector.threshold,
                                detector.roi, cfg.pixel_pitch_um_object)
    assert [e.pixel_col for e in ev] == [30, 60]
    with pytest.raises(detect.RowOutOfRange):
        detect.detect_in_frame(img, detector.kernel, bg, 99, 1.0, detector.roi, 1.0)
    with pytest.raises(detect.ShapeMismatch):
        detect.detect_in_frame(img, detector.kernel, bg[:, :50], cfg.atom_row, 1.0, detector.roi, 1.0)


def test_threshold_copy(detector):
    d2 = detector.with_threshold(1.0)
    assert d2.threshold == 1.0 and d2.filtered_background is detector.filtered_background


def test_tracking_conditions_on_single_detection(cfg, detector):
    # atom lost early in frame 3, so frames 0-2 show it and 4 onwards do not
    truth = GroundTruth((AtomRecord(500, 500 * cfg.lattice_spacing, 0.0, cfg.frame_start(3) + 0.01),))
    g = np.random.default_rng(0)
    frames = [sim.render_frame(truth, cfg.replace(camera_dim_fraction=0.0),
                               (cfg.frame_start(i), cfg.frame_start(i) + cfg.integration_time_s), g)
              for i in range(cfg.images_per_series)]
    series = ImageSeries(tuple(frames), cfg, truth)
    res = detect.track_series(series, detector, cfg.detection_indices)
    by_frame = {t.detect_frame: t for t in res.tracked}
    assert set(by_frame) == {0, 2}
    assert by_frame[0].confirmed and not by_frame[2].confirmed
    t = by_frame[0]
    assert t.status[0] == detect.DETECTED
    assert t.next_sum == t.raw_3x3_sums[1]
    assert res.confirmed_sums == [t.next_sum]


def test_tracking_needs_three_frames(cfg, detector):
    f = Frame(_frame_with_atoms(cfg, [45]), 0.15, 0.0)
    assert detect.track_series(ImageSeries((f,)), detector, [0]).tracked == []


@settings(max_examples=40, deadline=None)
@given(st.floats(15.0, 40.0), st.floats(3.0, 20.0), st.floats(50.0, 400.0), st.floats(50.0, 400.0))
def test_pair_fit_recovers_noiseless_profile(x1, gap, a1, a2):
    x = np.arange(80, dtype=float)
    x2 = x1 + gap
    s = 0.87
    g1, _ = detect._pixel_gauss(x, x1, s)
    g2, _ = detect._pixel_gauss(x, x2, s)
    prof = a1 * g1 + a2 * g2 + 30.0
    p, err = detect.fit_pair_profile(prof, (round(x1), round(x2)), s)
    assert p[1] == pytest.approx(x1, abs=1e-5) and p[3] == pytest.approx(x2, abs=1e-5)
    assert p[0] == pytest.approx(a1, rel=1e-5) and p[4] == pytest.approx(30.0, abs=1e-4)


def test_pixel_gauss_derivative_matches_finite_difference():
    x = np.arange(20, dtype=float)
    _, d = detect._pixel_gauss(x, 9.3, 0.9)
    h = 1e-6
    fd = (detect._pixel_gauss(x, 9.3 + h, 0.9)[0] - detect._pixel_gauss(x, 9.3 - h, 0.9)[0]) / (2 * h)
    assert np.allclose(d, fd, atol=1e-8)


def test_pair_fit_reports_divergence():
    with pytest.raises(FitDiverged):
        detect.fit_pair_profile(np.full(30, np.nan), (10.0, 20.0), 0.87)


def test_localize_pair_noiseless(cfg):
    pitch = cfg.pixel_pitch_um_object
    x = np.array([600, 640]) * cfg.lattice_spacing
    img = np.full((cfg.frame_height_px, cfg.frame_width_px), cfg.background_mean_counts / 9.0)
    img = img + sim.spot_template(cfg, x[0] / pitch) + sim.spot_template(cfg, x[1] / pitch)
    loc = detect.localize_pair([img] * 3, (round(x[0] / pitch), round(x[1] / pitch)), cfg)
    assert loc.accepted
    assert np.allclose(loc.positions_um, x, atol=1e-6)
    assert loc.separation_um == pytest.approx(x[1] - x[0], abs=1e-6)
    with pytest.raises(ValueError):
        detect.localize_pair(img, (40.0, 40.0), cfg)


def test_vertical_profile_sums_band():
    a = np.arange(50).reshape(5, 10)
    prof = detect.vertical_profile([a, a], 2, 1)
    assert np.array_equal(prof, 2 * a[1:4].sum(axis=0))
