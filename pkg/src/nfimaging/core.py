"""Shared domain types, configuration and random-stream handling.

Canonical units everywhere in the package: micrometres for lengths,
seconds for times, raw integer counts for camera and photon-counter
signals.  Angles are stored in degrees in the config and converted to
radians only where used.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "InvalidConfig",
    "ExperimentConfig",
    "validate_config",
    "guided_index_for_alias",
    "preset",
    "dumps_config",
    "loads_config",
    "load_config",
    "save_config",
    "default_config_path",
    "RandomStream",
    "AtomRecord",
    "GroundTruth",
    "Frame",
    "ImageSeries",
]


class InvalidConfig(ValueError):
    """Raised with every violated constraint of a config.

    ``violations`` is a list of ``(field, reason)`` pairs.
    """

    def __init__(self, violations: Sequence[tuple[str, str]]):
        self.violations = list(violations)
        msg = "; ".join(f"{k}: {r}" for k, r in self.violations)
        super().__init__(f"invalid config: {msg}")


def guided_index_for_alias(alias_per_um: float, lattice_spacing: float,
                           wavelength: float, theta_deg: float) -> float:
    """Guided-mode index that puts the alias frequency at ``alias_per_um``.

    Takes the branch where the continuous spatial frequency lies between
    ``1/(2 dz)`` and ``1/dz``, i.e. ``1/dd = 1/dz - alias``.
    """
    return wavelength * (1.0 / lattice_spacing - alias_per_um) - math.sin(math.radians(theta_deg))


_DEFAULT_ALIAS = 0.269


@dataclass(frozen=True)
class ExperimentConfig:
    # trap / interference geometry
    lattice_spacing: float = 0.498
    excitation_wavelength: float = 0.852
    guided_mode_index: float = guided_index_for_alias(_DEFAULT_ALIAS, 0.498, 0.852, 20.0)
    incidence_angle_deg: float = 20.0
    trap_lifetime_s: float = 1.0

    # timing
    integration_time_s: float = 0.150
    inter_image_wait_s: float = 0.045
    images_per_series: int = 11
    reference_images: int = 1

    # imaging chain
    roi_min_um: float = 115.0
    roi_max_um: float = 403.0
    magnification: float = 3.0
    pixel_pitch_um_object: float = 8.6 / 1.5
    psf_e_radius_um: float = 10.0
    frame_width_px: int = 96
    frame_height_px: int = 21
    atom_row: int = 10

    # camera signal and noise, per 3x3 region
    atom_rate_counts: float = 149.4 - 35.2
    background_mean_counts: float = 35.2
    background_sigma_counts: float = 10.5
    camera_nonuniformity: float = 0.20
    camera_signal_spread: float = 0.10  # half-width of the uniform per-exposure factor
    camera_dim_fraction: float = 0.05  # exposures with a randomly dimmed atom
    camera_dark_floor_counts: float = 0.5  # per pixel, bypasses the multiplication stage

    # loading
    mean_atoms_loaded: float = 3.0
    position_center_um: float = 259.0
    position_sigma_um: float = 80.0

    # photon counter, external excitation
    spcm_bg_mean: float = 309.63
    spcm_bg_sigma: float = 18.89
    spcm_single_atom_mean: float = 345.8 - 309.63
    spcm_single_atom_sigma: float = 30.9
    spcm_nonuniformity: float = 0.05
    common_mode_fraction: float = 0.71

    # photon counter, guided-probe transmission
    transmission_counts: float = 4500.0
    transmission_rel_sigma: float = 0.02
    per_atom_extinction: float = 0.040

    # detection pipeline
    kernel_fwhm_px: float = 1.5
    kernel_size: int = 11
    detection_threshold: float = 18.0
    upper_bound: float = 80.0
    detection_images: tuple[int, ...] = (1, 3, 5, 7, 9)
    match_tolerance_px: int = 1
    band_half_height: int = 1  # rows above and below the atom row summed for localisation
    max_fit_error_um: float = 1.7

    # --- derived quantities -------------------------------------------------
    @property
    def k0(self) -> float:
        """Free-space wavenumber in rad/um."""
        return 2.0 * math.pi / self.excitation_wavelength

    @property
    def k_nf(self) -> float:
        """Guided-mode propagation constant in rad/um."""
        return self.guided_mode_index * self.k0

    @property
    def theta_rad(self) -> float:
        return math.radians(self.incidence_angle_deg)

    @property
    def psf_sigma_um(self) -> float:
        # 1/e radius taken in the beam-waist sense: I ~ exp(-2 r^2 / r_e^2)
        return self.psf_e_radius_um / 2.0

    @property
    def psf_sigma_px(self) -> float:
        return self.psf_sigma_um / self.pixel_pitch_um_object

    @property
    def camera_pixel_pitch_um(self) -> float:
        return self.pixel_pitch_um_object * self.magnification

    @property
    def frame_period_s(self) -> float:
        return self.integration_time_s + self.inter_image_wait_s

    @property
    def detection_indices(self) -> tuple[int, ...]:
        """Zero-based frame indices of the detection images."""
        return tuple(i - 1 for i in self.detection_images)

    def frame_start(self, index: int) -> float:
        return index * self.frame_period_s

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_POSITIVE = (
    "lattice_spacing", "excitation_wavelength",
    "integration_time_s", "roi_min_um", "roi_max_um", "magnification",
    "pixel_pitch_um_object", "psf_e_radius_um", "atom_rate_counts",
    "background_mean_counts", "background_sigma_counts", "position_sigma_um",
    "spcm_bg_mean", "spcm_bg_sigma", "transmission_counts", "kernel_fwhm_px",
    "detection_threshold", "upper_bound", "max_fit_error_um",
)
_FRACTIONS = (
    "camera_nonuniformity", "camera_signal_spread", "camera_dim_fraction", "spcm_nonuniformity", "common_mode_fraction",
    "per_atom_extinction",
)
_NON_NEGATIVE = (
    "inter_image_wait_s", "mean_atoms_loaded", "spcm_single_atom_mean",
    "transmission_rel_sigma", "reference_images",
    "match_tolerance_px", "band_half_height",
)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every invariant of ``cfg`` and return it unchanged.

    Derived quantities (``k0``, ``k_nf``, pixel pitch) are properties, so a
    config that passes is already fully populated.  All violations are
    collected before raising :class:`InvalidConfig`.
    """
    bad: list[tuple[str, str]] = []
    for name in _POSITIVE:
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            bad.append((name, f"must be a finite positive number, got {v!r}"))
    for name in _FRACTIONS:
        v = getattr(cfg, name)
        if not (0.0 <= v <= 1.0):
            bad.append((name, f"must lie in [0, 1], got {v!r}"))
    for name in _NON_NEGATIVE:
        v = getattr(cfg, name)
        if not v >= 0:
            bad.append((name, f"must be >= 0, got {v!r}"))
    if not 0 <= cfg.camera_dark_floor_counts < cfg.background_mean_counts / 9.0:
        bad.append(("camera_dark_floor_counts", "must lie in [0, background per pixel)"))
    if not cfg.trap_lifetime_s > 0:
        bad.append(("trap_lifetime_s", "must be positive (inf disables loss)"))
    if cfg.roi_min_um >= cfg.roi_max_um:
        bad.append(("roi_min_um", "must be smaller than roi_max_um"))
    if not 0.0 < cfg.incidence_angle_deg < 90.0:
        bad.append(("incidence_angle_deg", "must lie in (0, 90)"))
    if not cfg.guided_mode_index >= 1.0:
        bad.append(("guided_mode_index", "must be >= 1"))
    if cfg.images_per_series < 1:
        bad.append(("images_per_series", "must be >= 1"))
    if cfg.kernel_size < 1 or cfg.kernel_size % 2 == 0:
        bad.append(("kernel_size", "must be a positive odd integer"))
    if cfg.detection_threshold >= cfg.upper_bound:
        bad.append(("upper_bound", "must exceed detection_threshold"))
    if not 0 <= cfg.atom_row < cfg.frame_height_px:
        bad.append(("atom_row", "must index a row of the frame"))
    if cfg.frame_width_px < cfg.kernel_size or cfg.frame_height_px < cfg.kernel_size:
        bad.append(("frame_width_px", "frame must be at least kernel-sized"))
    if cfg.roi_max_um > (cfg.frame_width_px - 2) * cfg.pixel_pitch_um_object:
        bad.append(("roi_max_um", "region of interest extends past the frame"))
    if any(i < 1 or i > cfg.images_per_series for i in cfg.detection_images):
        bad.append(("detection_images", "image numbers are 1-based and must exist in the series"))
    if bad:
        raise InvalidConfig(bad)
    return cfg


def preset(name: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Alternative timing presets.

    ``"150ms"`` is the default series, ``"100ms"`` the short-exposure series
    (30 images, 2 references, 40 ms wait) and ``"guided"`` the
    fibre-guided-excitation series (4 images of 400 ms).  Camera levels are
    scaled with exposure; the noise model keeps variance proportional to mean.
    """
    base = base or ExperimentConfig()
    timings = {
        "150ms": (0.150, 0.045, 11, 1),
        "100ms": (0.100, 0.040, 30, 2),
        "guided": (0.400, 0.040, 4, 1),
    }
    if name not in timings:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(timings)}")
    t, wait, n, nref = timings[name]
    scale = t / base.integration_time_s
    det = tuple(i for i in range(1, n - 1, 2))
    return base.replace(
        integration_time_s=t, inter_image_wait_s=wait, images_per_series=n,
        reference_images=nref,
        atom_rate_counts=base.atom_rate_counts * scale,
        background_mean_counts=base.background_mean_counts * scale,
        background_sigma_counts=base.background_sigma_counts * math.sqrt(scale),
        detection_images=det or (1,),
    )


# --- config file IO ----------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_value(kind, text: str):
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    # tuple[int, ...]
    return tuple(int(x) for x in text.replace(",", " ").split())


def loads_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys missing from the text keep the value of ``base`` (defaults when
    ``base`` is None).  Unknown keys and malformed values are reported
    together as :class:`InvalidConfig`.
    """
    base = base or ExperimentConfig()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    changes = {}
    bad = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            bad.append((f"line {lineno}", "expected 'key = value'"))
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            bad.append((key, "unknown key"))
            continue
        try:
            changes[key] = _parse_value(types[key], val)
        except ValueError as exc:
            bad.append((key, str(exc)))
    if bad:
        raise InvalidConfig(bad)
    return validate_config(base.replace(**changes))


def load_config(path: str | Path) -> ExperimentConfig:
    return loads_config(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "defaults.cfg"


# --- random streams ----------------------------------------------------------

@dataclass(frozen=True)
class RandomStream:
    """One independent generator per simulated run.

    The generator depends only on ``(seed, stream_id)``, so runs can be
    evaluated in any order or in parallel without changing their draws.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, sub_id: int) -> "RandomStream":
        # nested streams are folded into a distinct, reproducible id
        return RandomStream(self.seed, (self.stream_id << 20) + sub_id + 1)


# --- ground truth and frames -------------------------------------------------

@dataclass(frozen=True)
class AtomRecord:
    site_index: int
    position_um: float
    load_time_s: float
    loss_time_s: float

    def presence(self, t0: float, t1: float) -> float:
        """Fraction of the window ``[t0, t1]`` during which the atom is trapped."""
        lo = max(t0, self.load_time_s)
        hi = min(t1, self.loss_time_s)
        return max(0.0, hi - lo) / (t1 - t0)


@dataclass(frozen=True)
class GroundTruth:
    atoms: tuple[AtomRecord, ...] = ()

    def __post_init__(self):
        sites = [a.site_index for a in self.atoms]
        if len(set(sites)) != len(sites):
            raise ValueError("at most one atom per lattice site")
        for a in self.atoms:
            if not a.loss_time_s > a.load_time_s:
                raise ValueError("loss time must follow load time")

    def __len__(self) -> int:
        return len(self.atoms)

    def present(self, t0: float, t1: float) -> list[AtomRecord]:
        return [a for a in self.atoms if a.presence(t0, t1) > 0]


@dataclass(frozen=True, eq=False)
class Frame:
    counts: np.ndarray
    exposure_s: float
    t_start_s: float
    kind: str = "signal"

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2:
            raise ValueError("frame counts must be a 2D grid")
        if arr.size and arr.min() < 0:
            raise ValueError("frame counts must be non-negative")
        if self.kind not in ("signal", "reference"):
            raise ValueError(f"unknown frame kind {self.kind!r}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.kind == other.kind and self.exposure_s == other.exposure_s
                and self.t_start_s == other.t_start_s
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True, eq=False)
class ImageSeries:
    frames: tuple[Frame, ...]
    config_snapshot: ExperimentConfig = field(default_factory=ExperimentConfig)
    truth: GroundTruth | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        starts = [f.t_start_s for f in self.frames]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("frame start times must be strictly increasing")
        kinds = [f.kind for f in self.frames]
        if "reference" in kinds and "signal" in kinds[kinds.index("reference"):]:
            raise ValueError("reference frames must come last")

    @property
    def signal_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.kind == "signal"]

    @property
    def reference_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.kind == "reference"]

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, ImageSeries):
            return NotImplemented
        return self.frames == other.frames and self.truth == other.truth
