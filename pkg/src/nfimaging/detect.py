"""Atom detection, conditioned tracking and two-atom localisation.

Pipeline per image: correlate with a small Gaussian kernel, subtract the
equally filtered background template, scan the atom row for local maxima
and keep those above threshold inside the region of interest.  Photon
counts for statistics are always read from the raw image (3x3 sums).

Thresholds quoted for a kernel normalised to unit peak are mapped to the
unit-sum kernel used here with :meth:`DetectionKernel.from_peak_units`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from .core import ExperimentConfig, Frame, ImageSeries
from .stats import FitDiverged

__all__ = [
    "EvenKernelSize", "FrameTooSmall", "EmptyReferenceSet", "ShapeMismatch",
    "RowOutOfRange", "DetectionKernel", "make_kernel", "convolve", "background_template",
    "DetectionEvent", "Detector", "detect_in_frame", "row_maxima", "sum3x3",
    "disjoint_block_sums", "vertical_profile",
    "TrackedAtom", "TrackingResult", "track_series", "PairLocalization",
    "localize_pair", "fit_pair_profile",
]


class EvenKernelSize(ValueError):
    pass


class FrameTooSmall(ValueError):
    pass


class EmptyReferenceSet(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class RowOutOfRange(ValueError):
    pass


# --- kernel and filtering ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class DetectionKernel:
    profile: np.ndarray  # normalised 1D factor; weights = outer(profile, profile)
    fwhm_px: float

    @property
    def size(self) -> int:
        return self.profile.size

    @property
    def weights(self) -> np.ndarray:
        return np.outer(self.profile, self.profile)

    @property
    def peak(self) -> float:
        return float(self.profile.max() ** 2)

    @property
    def sigma_px(self) -> float:
        return self.fwhm_px / (2.0 * math.sqrt(2.0 * math.log(2.0)))

    def from_peak_units(self, value: float) -> float:
        """Express a level measured with the unit-peak kernel on this kernel's scale."""
        return value * self.peak


def make_kernel(fwhm_px: float = 1.5, size: int = 11) -> DetectionKernel:
    """Sampled 2D Gaussian with the given FWHM, unit sum, zero outside ``size x size``."""
    if size % 2 == 0:
        raise EvenKernelSize(f"kernel size must be odd, got {size}")
    if size < 1 or fwhm_px <= 0:
        raise ValueError("need size >= 1 and fwhm > 0")
    sigma = fwhm_px / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    x = np.arange(size) - size // 2
    p = np.exp(-0.5 * (x / sigma) ** 2)
    p /= p.sum()
    return DetectionKernel(p, float(fwhm_px))


def _as_array(image) -> np.ndarray:
    return np.asarray(image.counts if isinstance(image, Frame) else image, dtype=float)


def convolve(image, kernel: DetectionKernel) -> np.ndarray:
    """2D correlation with zero padding; same shape as the input.

    The kernel is separable, so it is applied as two 1D passes.
    """
    a = _as_array(image)
    if a.shape[0] < kernel.size or a.shape[1] < kernel.size:
        raise FrameTooSmall(f"frame {a.shape} smaller than kernel {kernel.size}")
    out = ndimage.correlate1d(a, kernel.profile, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, kernel.profile, axis=1, mode="constant", cval=0.0)


def background_template(reference_frames: Sequence) -> np.ndarray:
    """Pixel-wise mean of atom-free frames."""
    if len(reference_frames) == 0:
        raise EmptyReferenceSet("no reference frames given")
    arrays = [_as_array(f) for f in reference_frames]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeMismatch("reference frames differ in shape")
    return np.mean(arrays, axis=0)


def sum3x3(counts, row: int, col: int) -> int | None:
    """Raw 3x3 sum centred on ``(row, col)``; None when the window leaves the frame."""
    a = np.asarray(counts.counts if isinstance(counts, Frame) else counts)
    h, w = a.shape
    if row < 1 or col < 1 or row > h - 2 or col > w - 2:
        return None
    return int(a[row - 1:row + 2, col - 1:col + 2].sum())


def disjoint_block_sums(counts, size: int = 3) -> np.ndarray:
    """Sums over non-overlapping ``size x size`` tiles; partial tiles at the edge are dropped."""
    a = np.asarray(counts.counts if isinstance(counts, Frame) else counts)
    h, w = (a.shape[0] // size) * size, (a.shape[1] // size) * size
    t = a[:h, :w].reshape(h // size, size, w // size, size)
    return t.sum(axis=(1, 3)).ravel()


def row_maxima(values) -> np.ndarray:
    """Columns of strict local maxima along a 1D row.

    A flat run counts as one maximum when both neighbours are lower; its
    leftmost pixel is reported.  The first and last pixels never qualify.
    """
    v = np.asarray(values, float)
    n = v.size
    if n < 3:
        return np.zeros(0, dtype=int)
    starts = np.flatnonzero(np.r_[True, v[1:] != v[:-1]])
    ends = np.r_[starts[1:], n] - 1
    out = []
    for s, e in zip(starts, ends):
        if s == 0 or e == n - 1:
            continue
        if v[s - 1] < v[s] and v[e + 1] < v[s]:
            out.append(s)
    return np.asarray(out, dtype=int)


# --- detection ---------------------------------------------------------------

@dataclass(frozen=True)
class DetectionEvent:
    frame_index: int
    pixel_col: int
    convolved_peak_value: float
    raw_3x3_sum: int
    position_um: float
    in_roi: bool
    above_upper_bound: bool


def detect_in_frame(frame, kernel: DetectionKernel, background, atom_row: int, threshold: float,
                    roi: tuple[float, float], pitch_um: float, upper_bound: float | None = None,
                    frame_index: int = 0, background_is_filtered: bool = False) -> list[DetectionEvent]:
    """Row-maxima detections above ``threshold`` in one image.

    ``background`` is the raw template (or its filtered version when
    ``background_is_filtered``).  Events are emitted for every qualifying
    maximum; ``in_roi`` marks those inside the region of interest and
    ``above_upper_bound`` those the interference analysis discards.
    """
    raw = np.asarray(frame.counts if isinstance(frame, Frame) else frame)
    if not 0 <= atom_row < raw.shape[0]:
        raise RowOutOfRange(f"row {atom_row} outside frame of height {raw.shape[0]}")
    bg = np.asarray(background, float)
    if bg.shape != raw.shape:
        raise ShapeMismatch("background template and frame differ in shape")
    filtered_bg = bg if background_is_filtered else convolve(bg, kernel)
    line = _filtered_row(raw, kernel, atom_row) - filtered_bg[atom_row]
    return _events_from_line(raw, line, atom_row, threshold, roi, pitch_um, upper_bound, frame_index)


def _filtered_row(raw: np.ndarray, kernel: DetectionKernel, row: int) -> np.ndarray:
    # only one row of the filtered image is ever inspected
    h = kernel.size // 2
    a = np.asarray(raw, float)
    if a.shape[0] < kernel.size or a.shape[1] < kernel.size:
        raise FrameTooSmall(f"frame {a.shape} smaller than kernel {kernel.size}")
    lo, hi = row - h, row + h + 1
    band = np.zeros((kernel.size, a.shape[1]))
    src_lo, src_hi = max(lo, 0), min(hi, a.shape[0])
    band[src_lo - lo:src_hi - lo] = a[src_lo:src_hi]
    col = kernel.profile @ band
    return ndimage.correlate1d(col, kernel.profile, mode="constant", cval=0.0)


def _events_from_line(raw, line, atom_row, threshold, roi, pitch_um, upper_bound, frame_index):
    events = []
    for c in row_maxima(line):
        val = float(line[c])
        if val <= threshold:
            continue
        s = sum3x3(raw, atom_row, int(c))
        if s is None:
            continue
        pos = c * pitch_um
        events.append(DetectionEvent(
            frame_index=frame_index, pixel_col=int(c), convolved_peak_value=val,
            raw_3x3_sum=s, position_um=pos, in_roi=bool(roi[0] <= pos <= roi[1]),
            above_upper_bound=bool(upper_bound is not None and val > upper_bound),
        ))
    return events


@dataclass(frozen=True, eq=False)
class Detector:
    """Detection settings plus the filtered background, built once per data set."""

    kernel: DetectionKernel
    filtered_background: np.ndarray
    atom_row: int
    threshold: float
    upper_bound: float | None
    roi: tuple[float, float]
    pitch_um: float
    match_tolerance_px: int = 1

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, reference_frames: Sequence,
                    threshold: float | None = None, upper_bound: float | None = None) -> "Detector":
        """Thresholds are given on the unit-peak scale (the config's 18 and 80)."""
        kernel = make_kernel(cfg.kernel_fwhm_px, cfg.kernel_size)
        thr = cfg.detection_threshold if threshold is None else threshold
        ub = cfg.upper_bound if upper_bound is None else upper_bound
        bg = convolve(background_template(reference_frames), kernel)
        return cls(kernel, bg, cfg.atom_row, kernel.from_peak_units(thr),
                   kernel.from_peak_units(ub), (cfg.roi_min_um, cfg.roi_max_um),
                   cfg.pixel_pitch_um_object, cfg.match_tolerance_px)

    def with_threshold(self, threshold: float) -> "Detector":
        """Copy with a threshold already on this kernel's scale."""
        return Detector(self.kernel, self.filtered_background, self.atom_row, threshold,
                        self.upper_bound, self.roi, self.pitch_um, self.match_tolerance_px)

    def corrected_row(self, frame) -> np.ndarray:
        raw = np.asarray(frame.counts if isinstance(frame, Frame) else frame)
        return _filtered_row(raw, self.kernel, self.atom_row) - self.filtered_background[self.atom_row]

    def detect(self, frame, frame_index: int = 0) -> list[DetectionEvent]:
        raw = np.asarray(frame.counts if isinstance(frame, Frame) else frame)
        return _events_from_line(raw, self.corrected_row(raw), self.atom_row, self.threshold,
                                 self.roi, self.pitch_um, self.upper_bound, frame_index)

    def roi_maxima(self, frame) -> np.ndarray:
        """Values of all in-ROI row maxima, whatever their height."""
        raw = np.asarray(frame.counts if isinstance(frame, Frame) else frame)
        ev = _events_from_line(raw, self.corrected_row(raw), self.atom_row, -np.inf,
                               self.roi, self.pitch_um, None, 0)
        return np.array([e.convolved_peak_value for e in ev if e.in_roi])


# --- tracking across a series ------------------------------------------------

DETECTED, ABSENT, NOT_EVALUATED = "detected", "absent", "not-evaluated"


@dataclass(frozen=True)
class TrackedAtom:
    series_id: int
    detect_frame: int
    pixel_col: int
    status: tuple[str, ...]  # per signal frame
    raw_3x3_sums: tuple[int, ...]  # per signal frame, at pixel_col
    peak_values: tuple[float, ...]  # filtered, background-corrected, at pixel_col

    @property
    def next_sum(self) -> int:
        return self.raw_3x3_sums[self.detect_frame + 1]

    @property
    def confirmed(self) -> bool:
        i = self.detect_frame + 2
        return i < len(self.status) and self.status[i] == DETECTED


@dataclass
class TrackingResult:
    tracked: list[TrackedAtom] = field(default_factory=list)
    events: list[list[DetectionEvent]] = field(default_factory=list)

    @property
    def next_image_sums(self) -> list[int]:
        """3x3 sums in the image after a single-atom detection (all conditioned cases)."""
        return [t.next_sum for t in self.tracked]

    @property
    def confirmed_sums(self) -> list[int]:
        """Subset where the image after that shows the atom again."""
        return [t.next_sum for t in self.tracked if t.confirmed]

    @property
    def confirmed_peaks(self) -> list[float]:
        return [t.peak_values[t.detect_frame + 1] for t in self.tracked if t.confirmed]


def track_series(series: ImageSeries, detector: Detector, detection_frames: Sequence[int],
                 series_id: int = 0) -> TrackingResult:
    """Condition the image after each single-atom detection on the detection result.

    ``detection_frames`` are zero-based signal-frame indices.  A detection
    frame contributes when it holds exactly one in-ROI event and a following
    signal frame exists; the atom counts as confirmed when the frame after
    that has an in-ROI event within the match tolerance.
    """
    frames = series.signal_frames
    n = len(frames)
    if n < 3:
        return TrackingResult()
    events = [[e for e in detector.detect(f, i) if e.in_roi] for i, f in enumerate(frames)]
    rows = [detector.corrected_row(f) for f in frames]
    tol = detector.match_tolerance_px
    out = []
    for d in detection_frames:
        if d + 1 >= n or len(events[d]) != 1:
            continue
        col = events[d][0].pixel_col
        status = []
        sums = []
        for i, f in enumerate(frames):
            if i < d:
                status.append(NOT_EVALUATED)
            else:
                hit = any(abs(e.pixel_col - col) <= tol for e in events[i])
                status.append(DETECTED if hit else ABSENT)
            sums.append(sum3x3(f, detector.atom_row, col))
        peaks = tuple(float(r[col]) for r in rows)
        out.append(TrackedAtom(series_id, d, col, tuple(status), tuple(sums), peaks))
    return TrackingResult(out, events)


# --- two-atom localisation ---------------------------------------------------

@dataclass(frozen=True)
class PairLocalization:
    positions_um: tuple[float, float]
    separation_um: float
    fit_errors_um: tuple[float, float]
    accepted: bool
    converged: bool = True


def _pixel_gauss(x, centre, sigma):
    """Pixel-integrated unit-area Gaussian and its derivative w.r.t. ``centre``."""
    a = (x + 0.5 - centre) / sigma
    b = (x - 0.5 - centre) / sigma
    val = special.ndtr(a) - special.ndtr(b)
    k = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    dval = -k * (np.exp(-0.5 * a * a) - np.exp(-0.5 * b * b))
    return val, dval


def fit_pair_profile(profile, seeds: tuple[float, float], sigma_px: float,
                     max_iter: int = 200, rtol: float = 1e-8, yerr=None):
    """Levenberg-Marquardt fit of two fixed-width Gaussians plus offset.

    ``yerr`` gives per-point standard deviations for a weighted fit.
    Returns ``(params, errors)`` for ``[A1, x1, A2, x2, offset]`` with errors
    from the linearised covariance scaled by the reduced chi-square.
    """
    y = np.asarray(profile, float)
    x = np.arange(y.size, dtype=float)
    w = np.ones_like(y) if yerr is None else 1.0 / np.asarray(yerr, float)
    off0 = float(np.percentile(y, 20))
    p = np.array([0.0, seeds[0], 0.0, seeds[1], off0])
    for j, s in ((0, seeds[0]), (2, seeds[1])):
        c = int(np.clip(round(s), 0, y.size - 1))
        p[j] = max(y[c] - off0, 1.0) / _pixel_gauss(np.array([float(c)]), s, sigma_px)[0][0]

    def model_and_jac(p):
        g1, d1 = _pixel_gauss(x, p[1], sigma_px)
        g2, d2 = _pixel_gauss(x, p[3], sigma_px)
        m = p[0] * g1 + p[2] * g2 + p[4]
        J = np.column_stack([g1, p[0] * d1, g2, p[2] * d2, np.ones_like(x)])
        return w * m, w[:, None] * J

    y = w * y
    lam = 1e-3
    m, J = model_and_jac(p)
    r = y - m
    cost = float(r @ r)
    converged = False
    for _ in range(max_iter):
        A = J.T @ J
        gvec = J.T @ r
        step_ok = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(A + lam * np.diag(np.diag(A)), gvec)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            p_new = p + delta
            m_new, J_new = model_and_jac(p_new)
            r_new = y - m_new
            c_new = float(r_new @ r_new)
            if np.isfinite(c_new) and c_new <= cost:
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            converged = True  # no downhill step left: at a minimum
            break
        rel = np.max(np.abs(delta) / (np.abs(p) + 1e-12))
        p, m, J, r, cost = p_new, m_new, J_new, r_new, c_new
        lam = max(lam / 10, 1e-12)
        if rel < rtol:
            converged = True
            break
    if not converged or not np.all(np.isfinite(p)):
        raise FitDiverged("pair fit did not converge")
    dof = max(y.size - p.size, 1)
    try:
        cov = np.linalg.inv(J.T @ J) * (cost / dof)
    except np.linalg.LinAlgError as exc:
        raise FitDiverged("singular normal matrix") from exc
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    return p, err


def vertical_profile(frames: Sequence, atom_row: int, half_height: int) -> np.ndarray:
    """Sum of the rows ``atom_row +- half_height`` over all given frames."""
    arrays = [_as_array(f) for f in frames]
    lo = max(atom_row - half_height, 0)
    return sum(a[lo:atom_row + half_height + 1].sum(axis=0) for a in arrays)


def localize_pair(frames, seed_cols: tuple[float, float], cfg: ExperimentConfig,
                  weighted: bool = True) -> PairLocalization:
    """Sub-pixel positions of two atoms from vertically integrated images.

    ``frames`` is one frame or a sequence whose profiles are summed.  The
    width is fixed by the PSF; a pair is accepted when both position errors
    are below ``cfg.max_fit_error_um``.  Camera counts have variance
    proportional to their mean, so by default each column is weighted by
    the inverse of its own count.
    """
    if isinstance(frames, Frame) or isinstance(frames, np.ndarray):
        frames = [frames]
    if seed_cols[0] == seed_cols[1]:
        raise ValueError("seed columns must differ")
    pitch = cfg.pixel_pitch_um_object
    prof = vertical_profile(frames, cfg.atom_row, cfg.band_half_height)
    try:
        yerr = np.sqrt(np.maximum(prof, 1.0)) if weighted else None
        p, err = fit_pair_profile(prof, tuple(map(float, seed_cols)), cfg.psf_sigma_px, yerr=yerr)
    except FitDiverged:
        nan = float("nan")
        return PairLocalization((nan, nan), nan, (nan, nan), False, False)
    x1, x2 = p[1] * pitch, p[3] * pitch
    e1, e2 = err[1] * pitch, err[3] * pitch
    if x2 < x1:
        x1, x2, e1, e2 = x2, x1, e2, e1
    sep = x2 - x1
    ok = bool(sep > 0 and p[0] > 0 and p[2] > 0 and max(e1, e2) < cfg.max_fit_error_um)
    return PairLocalization((float(x1), float(x2)), float(sep), (float(e1), float(e2)), ok)
