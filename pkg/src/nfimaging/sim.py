"""Synthetic camera series and photon-counter records.

Camera model
------------
Each atom images to a pixel-integrated Gaussian spot centred on the atom
row.  Its flux is normalised so the expected 3x3 sum around the nearest
pixel equals ``atom_rate_counts`` for a fully exposed atom under flat
illumination.  A smooth quadratic illumination profile and a per-frame
dimming factor modulate that signal.  Pixel counts follow an
electron-multiplying camera: Poisson photo-electrons pass an
exponential-gain register (excess-noise factor 2 on the variance) whose
scale is fixed by the configured mean and standard deviation of the 3x3
background.  A small unamplified floor holds part of the background mean;
it sets the weight of the far tail of the background counts.

Photon counter
--------------
Counts are Poisson around the expected level plus a Gaussian term that
accounts for the excess width of the background peak.  Per-atom scattered
intensities carry a mean-one factor drawn from a normal law clipped at zero;
for two atoms the fields interfere with
the relative phase set by their site separation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import special
from scipy.optimize import brentq

from .core import (AtomRecord, ExperimentConfig, Frame, GroundTruth, ImageSeries,
                   RandomStream)
from .spectral import InterferenceGeometry, relative_phase

__all__ = [
    "TooManyAtoms", "SpcmRecord", "site_distribution", "illumination_profile",
    "sample_ground_truth", "render_frame", "render_series", "render_reference_frames",
    "expected_scatter_counts", "simulate_spcm_scatter", "sample_scatter_counts", "simulate_spcm_transmission",
    "spcm_amplitude_sigma", "amplitude_factors", "spcm_excess_background_sigma", "multiplication_scale",
]


class TooManyAtoms(ValueError):
    pass


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be a RandomStream or numpy Generator")


# --- loading -----------------------------------------------------------------

def site_distribution(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Lattice sites inside the ROI and their bell-shaped occupation weights."""
    dz = cfg.lattice_spacing
    sites = np.arange(math.ceil(cfg.roi_min_um / dz), math.floor(cfg.roi_max_um / dz) + 1)
    x = sites * dz
    w = np.exp(-0.5 * ((x - cfg.position_center_um) / cfg.position_sigma_um) ** 2)
    return sites, w / w.sum()


def sample_ground_truth(cfg: ExperimentConfig, rng) -> GroundTruth:
    """Poisson atom number, bell-shaped sites with single occupancy, exponential loss times."""
    g = _gen(rng)
    sites, probs = site_distribution(cfg)
    n = int(g.poisson(cfg.mean_atoms_loaded)) if cfg.mean_atoms_loaded > 0 else 0
    n = min(n, sites.size)
    taken: list[int] = []
    while len(taken) < n:
        s = int(g.choice(sites, p=probs))
        if s not in taken:
            taken.append(s)
    tau = cfg.trap_lifetime_s
    atoms = []
    for s in taken:
        loss = float(g.exponential(tau)) if math.isfinite(tau) else math.inf
        # a zero draw would violate loss > load
        loss = max(loss, 1e-12)
        atoms.append(AtomRecord(s, s * cfg.lattice_spacing, 0.0, loss))
    return GroundTruth(tuple(atoms))


# --- camera ------------------------------------------------------------------

def illumination_profile(position_um, cfg: ExperimentConfig, peak_to_valley: float | None = None):
    """Smooth quadratic signal profile, unit mean over a uniform ROI.

    Peaks at the ROI centre (``1 + A/3``) and falls to ``1 - 2A/3`` at the
    edges for a peak-to-valley amplitude ``A``.
    """
    A = cfg.camera_nonuniformity if peak_to_valley is None else peak_to_valley
    u = (np.asarray(position_um, float) - cfg.roi_min_um) / (cfg.roi_max_um - cfg.roi_min_um)
    return np.maximum(1.0 + A * (1.0 / 3.0 - 4.0 * (u - 0.5) ** 2), 0.05)


def _axis_fractions(n: int, centre: float, sigma: float) -> np.ndarray:
    edges = np.arange(n + 1) - 0.5
    return np.diff(special.ndtr((edges - centre) / sigma))


def spot_template(cfg: ExperimentConfig, x_px: float) -> np.ndarray:
    """Expected counts of a fully exposed atom at column ``x_px`` (flat illumination)."""
    s = cfg.psf_sigma_px
    fx = _axis_fractions(cfg.frame_width_px, x_px, s)
    fy = _axis_fractions(cfg.frame_height_px, float(cfg.atom_row), s)
    c = int(round(x_px))
    r = cfg.atom_row
    in3 = fx[max(c - 1, 0):c + 2].sum() * fy[max(r - 1, 0):r + 2].sum()
    return np.outer(fy, fx) * (cfg.atom_rate_counts / in3)


def multiplication_scale(cfg: ExperimentConfig) -> float:
    """Mean output counts per photo-electron of the multiplication stage.

    Chosen so the multiplied part of the background (mean ``m``) carries the
    whole configured pixel variance: ``2 s m = var``.
    """
    m = cfg.background_mean_counts / 9.0 - cfg.camera_dark_floor_counts
    var = cfg.background_sigma_counts ** 2 / 9.0
    return var / (2.0 * m)


def _camera_counts(expected: np.ndarray, cfg: ExperimentConfig, g: np.random.Generator) -> np.ndarray:
    # photo-electrons through an exponential-gain register, plus an unamplified floor
    floor = cfg.camera_dark_floor_counts
    s = multiplication_scale(cfg)
    n = g.poisson(np.maximum(expected - floor, 0.0) / s)
    out = g.gamma(np.maximum(n, 1), 1.0)
    empty = n == 0
    out[empty] = 0.0
    counts = np.rint(s * out + floor).astype(np.int64)
    # pixels without photo-electrons sit exactly on the floor; round them stochastically so the mean is kept
    whole = math.floor(floor)
    counts[empty] = whole + (g.random(int(empty.sum())) < floor - whole)
    return counts


def signal_factor(g: np.random.Generator, spread: float, dim_fraction: float) -> float:
    """Per-exposure atom signal factor with unit mean.

    Ordinary exposures scatter uniformly within ``1 +- spread``; with
    probability ``dim_fraction`` the exposure is instead dimmed by a uniform
    factor in [0, 1) (the atom drifts out of focus or heats up).  The
    factor is bounded above, so bright outliers come only from shot noise.
    """
    if g.random() < dim_fraction:
        f = float(g.random())
    else:
        f = 1.0 + spread * (2.0 * float(g.random()) - 1.0)
    return f / (1.0 - 0.5 * dim_fraction)


def render_frame(truth: GroundTruth, cfg: ExperimentConfig, t_window: tuple[float, float],
                 rng, kind: str = "signal") -> Frame:
    """One exposure covering ``t_window``; atoms contribute in proportion to their presence."""
    g = _gen(rng)
    t0, t1 = t_window
    if not t1 > t0:
        raise ValueError("empty exposure window")
    expected = np.full((cfg.frame_height_px, cfg.frame_width_px), cfg.background_mean_counts / 9.0)
    for atom in truth.atoms:
        frac = atom.presence(t0, t1)
        if frac <= 0:
            continue
        x_px = atom.position_um / cfg.pixel_pitch_um_object
        gain = frac * float(illumination_profile(atom.position_um, cfg))
        gain *= signal_factor(g, cfg.camera_signal_spread, cfg.camera_dim_fraction)
        expected += gain * spot_template(cfg, x_px)
    counts = _camera_counts(expected, cfg, g)
    return Frame(counts, t1 - t0, t0, kind)


def render_series(cfg: ExperimentConfig, rng, truth: GroundTruth | None = None) -> ImageSeries:
    """Signal frames on the shared timeline followed by atom-free reference frames."""
    g = _gen(rng)
    if truth is None:
        truth = sample_ground_truth(cfg, g)
    T = cfg.integration_time_s
    frames = []
    for i in range(cfg.images_per_series):
        t0 = cfg.frame_start(i)
        frames.append(render_frame(truth, cfg, (t0, t0 + T), g))
    empty = GroundTruth()
    for j in range(cfg.reference_images):
        t0 = cfg.frame_start(cfg.images_per_series + j)
        frames.append(render_frame(empty, cfg, (t0, t0 + T), g, kind="reference"))
    return ImageSeries(tuple(frames), cfg, truth)


def render_reference_frames(cfg: ExperimentConfig, n: int, rng) -> list[Frame]:
    g = _gen(rng)
    T = cfg.integration_time_s
    empty = GroundTruth()
    return [render_frame(empty, cfg, (0.0, T), g, kind="reference") for _ in range(n)]


# --- photon counter ----------------------------------------------------------

@dataclass(frozen=True)
class SpcmRecord:
    run_id: int
    detected_counts: int
    n_atoms_true: int
    atom_positions_um: tuple[float, ...]
    mode: str  # "scatter_into_fiber" or "transmission"
    coupling: str = ""  # common / differential / incoherent for two-atom scatter runs

    def __post_init__(self):
        if self.detected_counts < 0:
            raise ValueError("counts must be non-negative")


def spcm_excess_background_sigma(cfg: ExperimentConfig) -> float:
    """Gaussian width added to the Poisson background to reach ``spcm_bg_sigma``."""
    return math.sqrt(max(cfg.spcm_bg_sigma ** 2 - cfg.spcm_bg_mean, 0.0))


def _rectified_moments(width: float) -> tuple[float, float]:
    """Mean and second moment of ``max(Y, 0)`` for ``Y ~ N(1, width)``."""
    if width <= 0:
        return 1.0, 1.0
    z = 1.0 / width
    Phi = 0.5 * math.erfc(-z / math.sqrt(2.0))
    phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return Phi + width * phi, (1.0 + width * width) * Phi + width * phi


def spcm_amplitude_sigma(cfg: ExperimentConfig) -> float:
    """Normal width of the single-atom intensity factor for ``cfg`` (cached)."""
    return _amplitude_width(cfg.spcm_single_atom_mean, cfg.spcm_single_atom_sigma, cfg.spcm_bg_sigma)


@lru_cache(maxsize=64)
def _amplitude_width(S: float, sigma1: float, sigma0: float) -> float:
    """Width of the rectified-normal intensity factor that reproduces ``spcm_single_atom_sigma``.

    The single-atom intensity is ``S * max(Y, 0) / E[max(Y, 0)]`` with
    ``Y ~ N(1, width)``; the width is solved so the total variance, including
    background and shot noise, equals ``spcm_single_atom_sigma**2``.
    """
    if S <= 0:
        return 0.0
    extra = sigma1 ** 2 - sigma0 ** 2 - S
    cv2 = max(extra, 0.0) / S ** 2
    if cv2 == 0.0:
        return 0.0

    def excess(w):
        m1, m2 = _rectified_moments(w)
        return m2 / (m1 * m1) - 1.0 - cv2

    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("single-atom width is not reachable with this intensity law")
    return float(brentq(excess, 1e-9, hi, xtol=1e-12))


def amplitude_factors(g: np.random.Generator, width: float, size) -> np.ndarray:
    """Mean-one rectified-normal intensity factors."""
    if width <= 0:
        return np.ones(size)
    m1, _ = _rectified_moments(width)
    return np.maximum(g.normal(1.0, width, size), 0.0) / m1


def spcm_profile(position_um, cfg: ExperimentConfig):
    return illumination_profile(position_um, cfg, cfg.spcm_nonuniformity)


def expected_scatter_counts(background: float, intensities: Sequence[float], phase: float = 0.0,
                            coherent: bool = True) -> float:
    """Background plus the guided-mode power scattered by up to two atoms.

    ``intensities`` are the single-atom signals ``|a_i|^2``.  For two atoms
    the cross term ``2 |a1||a2| cos(phase)`` is added when ``coherent``.
    """
    I = [float(v) for v in intensities]
    if len(I) > 2:
        raise TooManyAtoms(f"{len(I)} atoms; at most two are modelled")
    total = background + sum(I)
    if coherent and len(I) == 2:
        total += 2.0 * math.sqrt(I[0] * I[1]) * math.cos(phase)
    return total


def simulate_spcm_scatter(positions_um: Sequence[float], cfg: ExperimentConfig, rng,
                          run_id: int = 0, coupling: str = "mixed") -> SpcmRecord:
    """Photon-counter total for 0, 1 or 2 atoms under external excitation.

    ``coupling`` chooses the amplitude fluctuation law for two atoms:
    ``"mixed"`` picks common mode with probability ``common_mode_fraction``
    and differential mode otherwise; ``"common"``, ``"differential"`` and
    ``"incoherent"`` (no interference term) force one law.
    """
    g = _gen(rng)
    pos = [float(p) for p in positions_um]
    if len(pos) > 2:
        raise TooManyAtoms(f"{len(pos)} atoms; at most two are modelled")
    sig = spcm_amplitude_sigma(cfg)
    base = [cfg.spcm_single_atom_mean * float(spcm_profile(p, cfg)) for p in pos]
    label = ""
    phase = 0.0
    if len(pos) == 2:
        if coupling == "mixed":
            label = "common" if g.random() < cfg.common_mode_fraction else "differential"
        elif coupling in ("common", "differential", "incoherent"):
            label = coupling
        else:
            raise ValueError(f"unknown coupling {coupling!r}")
        if label == "common":
            f = float(amplitude_factors(g, sig, 1)[0])
            factors = [f, f]
        else:
            factors = list(amplitude_factors(g, sig, 2))
        m = abs(round(pos[1] / cfg.lattice_spacing) - round(pos[0] / cfg.lattice_spacing))
        phase = relative_phase(m, InterferenceGeometry.from_config(cfg))
    else:
        factors = list(amplitude_factors(g, sig, len(pos)))
    intens = [b * f for b, f in zip(base, factors)]
    lam = expected_scatter_counts(cfg.spcm_bg_mean, intens, phase, coherent=label != "incoherent")
    counts = g.poisson(max(lam, 0.0)) + g.normal(0.0, spcm_excess_background_sigma(cfg))
    return SpcmRecord(run_id, max(int(round(counts)), 0), len(pos), tuple(pos),
                      "scatter_into_fiber", label)


def sample_scatter_counts(positions_um, cfg: ExperimentConfig, rng, coupling: str = "mixed") -> np.ndarray:
    """Vectorised photon-counter totals for many runs with the same atom number.

    ``positions_um`` has shape ``(n_runs, n_atoms)`` with ``n_atoms`` in
    {0, 1, 2}.  The law is the one of :func:`simulate_spcm_scatter`; this form
    is meant for large Monte-Carlo templates.
    """
    g = _gen(rng)
    pos = np.asarray(positions_um, float)
    if pos.ndim != 2:
        raise ValueError("positions must have shape (n_runs, n_atoms)")
    n, k = pos.shape
    if k > 2:
        raise TooManyAtoms(f"{k} atoms; at most two are modelled")
    sig = spcm_amplitude_sigma(cfg)
    intens = cfg.spcm_single_atom_mean * spcm_profile(pos, cfg) * amplitude_factors(g, sig, (n, k))
    lam = cfg.spcm_bg_mean + intens.sum(axis=1)
    if k == 2:
        if coupling not in ("mixed", "common", "differential", "incoherent"):
            raise ValueError(f"unknown coupling {coupling!r}")
        if coupling in ("mixed", "common"):
            common = np.ones(n, bool) if coupling == "common" else g.random(n) < cfg.common_mode_fraction
            f = amplitude_factors(g, sig, n)
            base = cfg.spcm_single_atom_mean * spcm_profile(pos, cfg)
            intens = np.where(common[:, None], base * f[:, None], intens)
            lam = cfg.spcm_bg_mean + intens.sum(axis=1)
        if coupling != "incoherent":
            m = np.abs(np.rint(pos[:, 1] / cfg.lattice_spacing) - np.rint(pos[:, 0] / cfg.lattice_spacing))
            phase = relative_phase(m, InterferenceGeometry.from_config(cfg))
            lam = lam + 2.0 * np.sqrt(intens[:, 0] * intens[:, 1]) * np.cos(phase)
    counts = g.poisson(np.maximum(lam, 0.0)) + g.normal(0.0, spcm_excess_background_sigma(cfg), n)
    return np.maximum(np.rint(counts), 0).astype(np.int64)


def simulate_spcm_transmission(n_atoms: int, cfg: ExperimentConfig, rng, run_id: int = 0) -> SpcmRecord:
    """Guided-probe counts after ``n_atoms`` atoms, each removing ``per_atom_extinction``."""
    if n_atoms < 0:
        raise ValueError("atom number must be non-negative")
    g = _gen(rng)
    lam = cfg.transmission_counts * (1.0 - cfg.per_atom_extinction) ** n_atoms
    drift = max(g.normal(1.0, cfg.transmission_rel_sigma), 0.0)
    counts = int(g.poisson(lam * drift))
    return SpcmRecord(run_id, counts, n_atoms, (), "transmission")
