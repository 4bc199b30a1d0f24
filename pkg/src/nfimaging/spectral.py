"""Two-emitter interference geometry and spectral estimation.

The light two lattice-trapped atoms scatter into the guided mode picks up a
relative phase ``m * dz * (k_nf + k0 sin(theta))`` for a separation of ``m``
sites.  Because separations are quantised in units of the lattice spacing,
the modulation of the photon counts versus separation shows up at the alias
frequency ``|1/dz - 1/dd|`` rather than at ``1/dd``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ExperimentConfig
from .stats import Histogram, build_histogram

TWO_PI = 2.0 * math.pi


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class InterferenceGeometry:
    lattice_spacing: float  # um
    k0: float  # rad/um
    k_nf: float  # rad/um
    theta: float  # rad

    def __post_init__(self):
        if min(self.lattice_spacing, self.k0, self.k_nf, self.theta) <= 0:
            raise ValueError("geometry parameters must be positive")
        if self.theta >= math.pi / 2:
            raise ValueError("incidence angle must be below 90 degrees")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "InterferenceGeometry":
        return cls(cfg.lattice_spacing, cfg.k0, cfg.k_nf, cfg.theta_rad)

    @property
    def wavevector_sum(self) -> float:
        return self.k_nf + self.k0 * math.sin(self.theta)

    @property
    def phase_per_site(self) -> float:
        return self.lattice_spacing * self.wavevector_sum

    @property
    def bragg_angle(self) -> float:
        """Incidence angle at which every site scatters in phase (diagnostic only)."""
        s = TWO_PI / (self.k0 * self.lattice_spacing) - self.k_nf / self.k0
        return math.asin(s) if -1.0 <= s <= 1.0 else float("nan")


def relative_phase(m, geom: InterferenceGeometry):
    """Relative phase of two atoms ``m`` sites apart, reduced to [0, 2pi)."""
    m_arr = np.asarray(m)
    if np.any(m_arr < 0):
        raise ValueError("site separation must be non-negative")
    phase = np.mod(m_arr * geom.phase_per_site, TWO_PI)
    return float(phase) if phase.ndim == 0 else phase


def constructive_spacing(geom: InterferenceGeometry) -> float:
    return TWO_PI / geom.wavevector_sum


def alias_frequency(geom: InterferenceGeometry) -> float:
    return abs(1.0 / geom.lattice_spacing - 1.0 / constructive_spacing(geom))


def geometry_report(geom: InterferenceGeometry) -> str:
    dd = constructive_spacing(geom)
    fa = alias_frequency(geom)
    return "\n".join([
        f"incidence angle (deg): {math.degrees(geom.theta):.3f}",
        f"lattice spacing (um): {geom.lattice_spacing:.4f}",
        f"constructive spacing (um): {dd:.4f}",
        f"continuous spatial frequency (1/um): {1 / dd:.4f}",
        f"alias frequency (1/um): {fa:.4f}",
        f"alias period (um): {1 / fa if fa > 0 else float('inf'):.3f}",
        f"per-site phase (rad): {geom.phase_per_site:.4f}",
        f"bragg angle (deg): {math.degrees(geom.bragg_angle):.2f}",
    ])


def phase_histogram(sites, probs, geom: InterferenceGeometry, n_samples: int,
                    rng: np.random.Generator, n_bins: int = 20) -> Histogram:
    """Histogram of relative phases for atom pairs drawn from a site distribution.

    Pairs on the same site are redrawn, since a site holds at most one atom.
    """
    sites = np.asarray(sites)
    probs = np.asarray(probs, dtype=float)
    if not np.isclose(probs.sum(), 1.0):
        raise ValueError("site distribution must be normalised")
    a = rng.choice(sites, size=n_samples, p=probs)
    b = rng.choice(sites, size=n_samples, p=probs)
    same = a == b
    while same.any() and len(sites) > 1:
        b[same] = rng.choice(sites, size=int(same.sum()), p=probs)
        same = a == b
    m = np.abs(a - b)
    phases = relative_phase(m, geom)
    edges = np.linspace(0.0, TWO_PI, n_bins + 1)
    return build_histogram(np.atleast_1d(phases), edges=edges)


# --- periodogram -------------------------------------------------------------

@dataclass(frozen=True)
class SpectralPeak:
    frequency: float
    power: float
    width: float
    uncertainty: float


@dataclass(frozen=True, eq=False)
class Periodogram:
    spatial_frequencies: np.ndarray
    power: np.ndarray
    rss: np.ndarray
    n_samples: int
    peak: SpectralPeak


def default_frequency_grid(separations, n: int = 2048) -> np.ndarray:
    s = np.sort(np.asarray(separations, dtype=float))
    gaps = np.diff(s)
    gaps = gaps[gaps > 0]
    if gaps.size == 0:
        raise InsufficientSamples("separations are all identical")
    fmax = 1.0 / (2.0 * np.median(gaps))
    return np.linspace(0.0, fmax, n)


def _sinusoid_fit(x, y, freqs, chunk=256):
    """Per-frequency least squares of ``c + a cos + b sin``; returns (a^2+b^2, rss)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    yc = y - y.mean()
    xs = x - x.mean()
    n = x.size
    power = np.empty(freqs.size)
    rss = np.empty(freqs.size)
    tss = float(yc @ yc)
    for lo in range(0, freqs.size, chunk):
        f = freqs[lo:lo + chunk]
        arg = TWO_PI * np.outer(f, xs)
        c = np.cos(arg)
        s = np.sin(arg)
        # centre the regressors so the offset decouples
        c -= c.mean(axis=1, keepdims=True)
        s -= s.mean(axis=1, keepdims=True)
        cc = np.einsum("ij,ij->i", c, c)
        ss = np.einsum("ij,ij->i", s, s)
        cs = np.einsum("ij,ij->i", c, s)
        yc_c = c @ yc
        yc_s = s @ yc
        det = cc * ss - cs * cs
        ok = det > 1e-12 * np.maximum(cc * ss, 1e-300)
        a = np.where(ok, (ss * yc_c - cs * yc_s) / np.where(ok, det, 1), 0.0)
        b = np.where(ok, (cc * yc_s - cs * yc_c) / np.where(ok, det, 1), 0.0)
        power[lo:lo + chunk] = a * a + b * b
        rss[lo:lo + chunk] = tss - (a * yc_c + b * yc_s)
    # the zero-frequency model is degenerate; its power is defined as zero
    power[freqs == 0] = 0.0
    rss[freqs == 0] = tss
    return power, np.maximum(rss, 0.0), n


def _locate_peak(freqs, power, rss, n, min_freq):
    mask = freqs >= min_freq
    idx = np.flatnonzero(mask)
    if idx.size < 3:
        raise InsufficientSamples("frequency grid too short for peak search")
    i = idx[np.argmax(power[idx])]
    i = min(max(i, idx[0] + 1), freqs.size - 2)
    f3 = freqs[i - 1:i + 2]
    p3 = power[i - 1:i + 2]
    r3 = rss[i - 1:i + 2]
    df = f3[1] - f3[0]
    denom = p3[0] - 2 * p3[1] + p3[2]
    shift = 0.5 * (p3[0] - p3[2]) / denom if denom < 0 else 0.0
    shift = float(np.clip(shift, -1.0, 1.0))
    f_peak = f3[1] + shift * df
    p_peak = p3[1] - 0.25 * (p3[0] - p3[2]) * shift
    curv_p = -denom / df ** 2 if denom < 0 else np.nan
    width = 2.0 * math.sqrt(p_peak / (2.0 * 0.5 * curv_p)) if curv_p > 0 else float("nan")
    curv_r = (r3[0] - 2 * r3[1] + r3[2]) / df ** 2
    s2 = r3[1] / max(n - 3, 1)
    unc = math.sqrt(2.0 * s2 / curv_r) if curv_r > 0 else float("nan")
    return SpectralPeak(float(f_peak), float(p_peak), float(width), float(unc))


def periodogram(separations, counts, freq_grid=None, min_freq: float | None = None) -> Periodogram:
    """Least-squares spectrum of counts sampled at irregular separations.

    For every trial frequency ``c + a cos(2 pi f d) + b sin(2 pi f d)`` is
    fitted and the power is ``a^2 + b^2``.  The peak is refined by a
    parabola through the three highest grid points; its uncertainty comes
    from the curvature of the residual sum of squares.  ``min_freq``
    excludes the slow trends near zero frequency from the peak search
    (default: two cycles over the sampled span).
    """
    d = np.asarray(separations, dtype=float)
    y = np.asarray(counts, dtype=float)
    if d.size != y.size:
        raise ValueError("separations and counts differ in length")
    if d.size < 50:
        raise InsufficientSamples(f"need at least 50 samples, got {d.size}")
    if np.any(d <= 0):
        raise ValueError("separations must be positive")
    freqs = default_frequency_grid(d) if freq_grid is None else np.asarray(freq_grid, float)
    if np.any(np.diff(freqs) <= 0):
        raise ValueError("frequency grid must be strictly increasing")
    if min_freq is None:
        min_freq = 2.0 / (d.max() - d.min())
    power, rss, n = _sinusoid_fit(d, y, freqs)
    peak = _locate_peak(freqs, power, rss, n, min_freq)
    return Periodogram(freqs, power, rss, n, peak)


def binned_dft_power(separations, counts, bin_width: float, freqs) -> np.ndarray:
    """Power of a plain DFT of bin-averaged counts; cross-check for :func:`periodogram`.

    Empty bins are filled with the global mean before transforming.
    """
    d = np.asarray(separations, float)
    y = np.asarray(counts, float)
    edges = np.arange(d.min(), d.max() + bin_width, bin_width)
    idx = np.clip(np.digitize(d, edges) - 1, 0, edges.size - 2)
    sums = np.bincount(idx, weights=y, minlength=edges.size - 1)
    nums = np.bincount(idx, minlength=edges.size - 1)
    mean = y.mean()
    vals = np.where(nums > 0, sums / np.maximum(nums, 1), mean) - mean
    centres = 0.5 * (edges[:-1] + edges[1:])
    freqs = np.asarray(freqs, float)
    z = np.exp(-1j * TWO_PI * np.outer(freqs, centres)) @ vals
    return (2.0 / vals.size) ** 2 * np.abs(z) ** 2
