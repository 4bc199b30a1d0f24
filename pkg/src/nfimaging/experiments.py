"""Batch pipelines from simulated runs to the estimated quantities.

Every run draws from its own stream, keyed by ``(seed, purpose, run_id)``,
so batches give identical results whatever the number of worker processes.
Image-series batches are processed in two passes: the first collects the
reference frames that define the background template, the second re-renders
each series from its stream and reduces it to a compact per-run result.
This keeps memory flat even at thousands of runs.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from . import detect, sim, spectral, stats
from .core import AtomRecord, ExperimentConfig, GroundTruth, ImageSeries, RandomStream

__all__ = [
    "SERIES", "REFERENCES", "SINGLES", "PAIRS", "SCATTER", "TRANSMISSION", "TEMPLATES", "PHASES",
    "run_stream", "parallel_map", "simulate_series", "simulate_batch", "batch_detector",
    "RunAnalysis", "BatchAnalysis", "analyze_batch", "conditioned_fits", "model_comparison",
    "reference_false_detections", "single_atom_peaks", "PairRun", "simulate_pair_runs",
    "pair_spectrum", "SpcmScatterBatch", "simulate_scatter_batch", "mode_weight_study",
    "simulate_transmission_groups", "position_profiles", "reference_frames", "scatter_template",
    "simulate_pair_data", "analyze_pair", "simulate_pair_run", "position_rmse", "separation_rmse",
    "PAIR_FREQ_GRID", "fit_conditioned", "simulate_transmission_records", "group_counts",
    "GROUP_STRIDE", "ModeWeightStudy", "ConditionedFits", "ModelComparison", "analyze_series",
]

# stream purposes; each gets its own id space
SERIES, REFERENCES, SINGLES, PAIRS, SCATTER, TRANSMISSION, TEMPLATES, PHASES = range(8)
GROUP_STRIDE = 1_000_000  # run-id offset between atom-number groups


def run_stream(seed: int, purpose: int, run_id: int) -> RandomStream:
    return RandomStream(seed, purpose).child(run_id)


def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map, optionally over worker processes."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (8 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# --- image series ------------------------------------------------------------

def simulate_series(cfg: ExperimentConfig, seed: int, run_id: int) -> ImageSeries:
    return sim.render_series(cfg, run_stream(seed, SERIES, run_id))


def _series_job(run_id, cfg, seed):
    return simulate_series(cfg, seed, run_id)


def simulate_batch(cfg: ExperimentConfig, seed: int, n_runs: int, jobs: int = 1) -> list[ImageSeries]:
    return parallel_map(partial(_series_job, cfg=cfg, seed=seed), range(n_runs), jobs)


def _reference_job(run_id, cfg, seed):
    return [f.counts for f in simulate_series(cfg, seed, run_id).reference_frames]


def batch_detector(cfg: ExperimentConfig, seed: int, n_runs: int, jobs: int = 1,
                   threshold: float | None = None) -> detect.Detector:
    """Detector whose background template averages the reference frames of the batch."""
    refs = parallel_map(partial(_reference_job, cfg=cfg, seed=seed), range(n_runs), jobs)
    frames = [r for group in refs for r in group]
    return detect.Detector.from_config(cfg, frames, threshold=threshold)


@dataclass
class RunAnalysis:
    """Compact per-series outcome of detection, tracking and truth bookkeeping."""

    run_id: int
    tracked: list
    background_sums: np.ndarray  # disjoint 3x3 sums of the reference frames
    exposed: int = 0  # atoms present at the start of a signal exposure
    lost_undetected: int = 0
    lost_detected: int = 0
    # per in-ROI event of every signal frame: (nearest atom distance, second nearest, above upper bound)
    event_classes: list = field(default_factory=list)
    detected_positions_um: list = field(default_factory=list)
    reference_false: list = field(default_factory=list)  # any in-ROI event per reference frame


def _atom_col(atom: AtomRecord, cfg: ExperimentConfig) -> float:
    return atom.position_um / cfg.pixel_pitch_um_object


def analyze_series(series: ImageSeries, detector: detect.Detector, cfg: ExperimentConfig,
                   run_id: int = 0) -> RunAnalysis:
    """Track one series and compare its detections with the ground truth.

    An atom counts as detected in a frame when an in-ROI event lies within
    the match tolerance of its pixel.  Each in-ROI event keeps the distances
    of the two nearest atoms present in its frame, for classifying events
    after the fact.
    """
    det_frames = cfg.detection_indices
    res = detect.track_series(series, detector, det_frames, run_id)
    bg = np.concatenate([detect.disjoint_block_sums(f) for f in series.reference_frames]) \
        if series.reference_frames else np.zeros(0, np.int64)
    out = RunAnalysis(run_id, res.tracked, bg)
    for f in series.reference_frames:
        out.reference_false.append(any(e.in_roi for e in detector.detect(f)))
    truth = series.truth or GroundTruth()
    roi = detector.roi
    tol = detector.match_tolerance_px
    for i, frame in enumerate(series.signal_frames):
        t0, t1 = frame.t_start_s, frame.t_start_s + frame.exposure_s
        events = res.events[i] if res.events else []
        for atom in truth.atoms:
            if not roi[0] <= atom.position_um <= roi[1]:
                continue
            if not (atom.load_time_s <= t0 < atom.loss_time_s):
                continue
            out.exposed += 1
            if atom.loss_time_s < t1:
                col = round(_atom_col(atom, cfg))
                seen = any(abs(e.pixel_col - col) <= tol for e in events)
                if seen:
                    out.lost_detected += 1
                else:
                    out.lost_undetected += 1
        present = [a for a in truth.atoms if a.presence(t0, t1) > 0]
        for e in events:
            d = sorted(abs(_atom_col(a, cfg) - e.pixel_col) for a in present) + [math.inf, math.inf]
            out.event_classes.append((d[0], d[1], e.above_upper_bound))
            out.detected_positions_um.append(e.position_um)
    return out


def _analyze_job(run_id, cfg, seed, detector):
    return analyze_series(simulate_series(cfg, seed, run_id), detector, cfg, run_id)


@dataclass
class BatchAnalysis:
    cfg: ExperimentConfig
    detector: detect.Detector
    runs: list[RunAnalysis]

    @property
    def tracked(self) -> list:
        return [t for r in self.runs for t in r.tracked]

    @property
    def next_image_sums(self) -> np.ndarray:
        return np.array([t.next_sum for t in self.tracked])

    @property
    def confirmed_sums(self) -> np.ndarray:
        return np.array([t.next_sum for t in self.tracked if t.confirmed])

    @property
    def confirmed_peaks(self) -> np.ndarray:
        return np.array([t.peak_values[t.detect_frame + 1] for t in self.tracked if t.confirmed])

    @property
    def background_sums(self) -> np.ndarray:
        return np.concatenate([r.background_sums for r in self.runs])

    def loss_split(self) -> stats.LossSplit:
        """Observed fractions of exposed atoms lost undetected and lost after detection."""
        n = sum(r.exposed for r in self.runs)
        if n == 0:
            return stats.LossSplit(0.0, 0.0)
        return stats.LossSplit(sum(r.lost_undetected for r in self.runs) / n,
                               sum(r.lost_detected for r in self.runs) / n)

    def event_table(self) -> np.ndarray:
        """Rows of (nearest atom distance, second nearest, above upper bound) in pixels."""
        rows = [c for r in self.runs for c in r.event_classes]
        return np.array(rows, dtype=float).reshape(-1, 3)

    def upper_bound_filter(self, merged_px: float = 0.5, isolated_px: float = 3.0) -> dict[str, float]:
        """Share of events removed by the upper bound.

        An event is *merged* when two atoms lie within ``merged_px`` of its
        pixel and a *true single* when one atom does and no other atom is
        within ``isolated_px``.  Events in between are counted only in the
        overall share.
        """
        t = self.event_table()
        d1, d2, above = t[:, 0], t[:, 1], t[:, 2].astype(bool)
        merged = d2 <= merged_px
        single = (d1 <= merged_px) & (d2 > isolated_px)

        def share(mask):
            return float(above[mask].mean()) if mask.any() else float("nan")

        return {
            "n_events": int(above.size),
            "all": share(np.ones_like(above)),
            "merged": share(merged),
            "single": share(single),
            "n_merged": int(merged.sum()),
            "n_single": int(single.sum()),
        }

    @property
    def p_false(self) -> float:
        """Share of reference frames with at least one in-ROI detection."""
        flags = [f for r in self.runs for f in r.reference_false]
        return float(np.mean(flags)) if flags else 0.0

    @property
    def detected_positions_um(self) -> np.ndarray:
        return np.array([p for r in self.runs for p in r.detected_positions_um])


def analyze_batch(cfg: ExperimentConfig, seed: int, n_runs: int, jobs: int = 1,
                  threshold: float | None = None) -> BatchAnalysis:
    detector = batch_detector(cfg, seed, n_runs, jobs, threshold)
    job = partial(_analyze_job, cfg=cfg, seed=seed, detector=detector)
    return BatchAnalysis(cfg, detector, parallel_map(job, range(n_runs), jobs))


@dataclass(frozen=True)
class ConditionedFits:
    next_image: stats.GaussianFit  # two components
    background: stats.GaussianFit
    confirmed: stats.GaussianFit
    histograms: dict


def _fit_one(values, bin_width, n):
    h = stats.build_histogram(values, bin_width=bin_width, start=0.0)
    return h, stats.fit_gaussian_mixture(h, n)


def fit_conditioned(next_sums, background_sums, confirmed_sums, cfg: ExperimentConfig,
                    bin_width: float = 10.0) -> ConditionedFits:
    """Gaussian fits to the next-image, reference and doubly conditioned histograms."""
    ha = stats.build_histogram(next_sums, bin_width=bin_width, start=0.0)
    bg0 = cfg.background_mean_counts
    init = [(0.3 * ha.n_total * bin_width / (10 * math.sqrt(2 * math.pi)), bg0 + 3, 10.5),
            (0.7 * ha.n_total * bin_width / (30 * math.sqrt(2 * math.pi)), bg0 + cfg.atom_rate_counts, 30.0)]
    fa = stats.fit_gaussian_mixture(ha, 2, init=init)
    hb, fb = _fit_one(background_sums, bin_width, 1)
    hc, fc = _fit_one(confirmed_sums, bin_width, 1)
    return ConditionedFits(fa, fb, fc, {"a": ha, "b": hb, "c": hc})


def conditioned_fits(batch: BatchAnalysis, bin_width: float = 10.0) -> ConditionedFits:
    return fit_conditioned(batch.next_image_sums, batch.background_sums, batch.confirmed_sums,
                           batch.cfg, bin_width)


@dataclass(frozen=True)
class ModelComparison:
    model: stats.DetectionModel
    empirical: stats.Histogram
    quadrature: stats.Histogram
    montecarlo: stats.Histogram
    tv_distance: float
    max_mc_z: float  # largest |quadrature - MC| in units of the MC standard error


def model_comparison(fits: ConditionedFits, cfg: ExperimentConfig, p_false: float,
                     f_thr: float = 0.445, rng: np.random.Generator | None = None,
                     n_draws: int = 400_000, bg_samples=None, atom_samples=None) -> ModelComparison:
    """Predict the next-image histogram from the background and single-atom populations.

    The Gaussian fits set the partial-signal continuum; when samples are
    given they also supply the shapes of the two pure components.
    """
    emp = fits.histograms["a"]
    b, c = fits.background, fits.confirmed
    model = stats.DetectionModel(
        p_false=p_false, tau_s=cfg.trap_lifetime_s, T_s=cfg.integration_time_s,
        bg_mean=float(b.means[0]), bg_sigma=float(b.sigmas[0]),
        atom_mean=float(c.means[0]), atom_sigma=float(c.sigmas[0]),
        f_thr=f_thr, gap_s=cfg.inter_image_wait_s,
        bg_samples=None if bg_samples is None else np.asarray(bg_samples, float),
        atom_samples=None if atom_samples is None else np.asarray(atom_samples, float),
    )
    n = emp.n_total
    q = stats.predict_conditioned_histogram(model, emp.bin_edges, n, "quadrature")
    mc = stats.predict_conditioned_histogram(model, emp.bin_edges, n, "montecarlo", n_draws=n_draws,
                                             rng=rng or np.random.default_rng(0))
    tv = stats.total_variation(emp.counts, q.counts)
    # under agreement each MC bin is a binomial proportion of n_draws with the quadrature probability
    p = q.counts / n
    se = n * np.sqrt(p * (1 - p) / n_draws)
    live = se > 0
    z = float(np.max(np.abs(q.counts - mc.counts)[live] / se[live])) if live.any() else 0.0
    return ModelComparison(model, emp, q, mc, tv, z)


# --- reference frames and single atoms ---------------------------------------

def _refs_job(run_id, cfg, seed, n_per_job):
    return [f.counts for f in sim.render_reference_frames(cfg, n_per_job, run_stream(seed, REFERENCES, run_id))]


def reference_frames(cfg: ExperimentConfig, seed: int, n: int, jobs: int = 1,
                     offset: int = 0, block: int = 100) -> list[np.ndarray]:
    """``n`` atom-free frames from fixed blocks of streams (independent of ``jobs``)."""
    n_blocks = math.ceil(n / block)
    ids = range(offset, offset + n_blocks)
    frames = [f for group in parallel_map(partial(_refs_job, cfg=cfg, seed=seed, n_per_job=block), ids, jobs)
              for f in group]
    return frames[:n]


def reference_false_detections(cfg: ExperimentConfig, seed: int, n_frames: int, thresholds,
                               n_template: int = 1000, jobs: int = 1):
    """False-detection curve on fresh reference frames with an independent background template."""
    n_tpl_blocks = math.ceil(n_template / 100)
    template = reference_frames(cfg, seed, n_template, jobs)
    detector = detect.Detector.from_config(cfg, template)
    frames = reference_frames(cfg, seed, n_frames, jobs, offset=n_tpl_blocks)
    maxima = [detector.roi_maxima(f) for f in frames]
    return detector, stats.false_detection_curve(maxima, thresholds)


def _single_job(run_id, cfg, seed, detector, n_per_job):
    g = run_stream(seed, SINGLES, run_id).generator()
    sites, probs = sim.site_distribution(cfg)
    T = cfg.integration_time_s
    out = []
    for _ in range(n_per_job):
        s = int(g.choice(sites, p=probs))
        x = s * cfg.lattice_spacing
        truth = GroundTruth((AtomRecord(s, x, 0.0, math.inf),))
        frame = sim.render_frame(truth, cfg, (0.0, T), g)
        col = int(round(x / cfg.pixel_pitch_um_object))
        out.append(float(detector.corrected_row(frame)[col]))
    return out


def single_atom_peaks(cfg: ExperimentConfig, seed: int, n_frames: int, detector: detect.Detector,
                      jobs: int = 1, block: int = 100) -> np.ndarray:
    """Background-corrected filtered value at the atom pixel for frames holding one atom all exposure."""
    ids = range(math.ceil(n_frames / block))
    vals = parallel_map(partial(_single_job, cfg=cfg, seed=seed, detector=detector, n_per_job=block), ids, jobs)
    return np.array([v for group in vals for v in group][:n_frames])


# --- two-atom runs -----------------------------------------------------------

@dataclass(frozen=True)
class PairRun:
    run_id: int
    true_positions_um: tuple[float, float]
    spcm_counts: int
    coupling: str
    n_events: int  # in-ROI detections in the first image
    within_bounds: bool  # both detections between threshold and upper bound
    localization: detect.PairLocalization | None
    seeds_match: bool = False  # the two detections sit on the two true atoms

    @property
    def true_separation_um(self) -> float:
        return abs(self.true_positions_um[1] - self.true_positions_um[0])

    @property
    def usable(self) -> bool:
        return self.n_events == 2 and self.within_bounds and self.localization is not None \
            and self.localization.accepted


def _pair_truth(cfg: ExperimentConfig, g: np.random.Generator) -> GroundTruth:
    sites, probs = sim.site_distribution(cfg)
    a = int(g.choice(sites, p=probs))
    b = a
    while b == a:
        b = int(g.choice(sites, p=probs))
    tau = cfg.trap_lifetime_s
    atoms = []
    for s in sorted((a, b)):
        loss = max(float(g.exponential(tau)), 1e-12) if math.isfinite(tau) else math.inf
        atoms.append(AtomRecord(s, s * cfg.lattice_spacing, 0.0, loss))
    return GroundTruth(tuple(atoms))


def simulate_pair_data(cfg: ExperimentConfig, seed: int, run_id: int,
                       n_images: int = 3) -> tuple[ImageSeries, sim.SpcmRecord]:
    """Two loaded atoms: camera images on the usual timeline and the photon-counter total."""
    g = run_stream(seed, PAIRS, run_id).generator()
    truth = _pair_truth(cfg, g)
    pos = tuple(a.position_um for a in truth.atoms)
    rec = sim.simulate_spcm_scatter(pos, cfg, g, run_id)
    T = cfg.integration_time_s
    frames = [sim.render_frame(truth, cfg, (cfg.frame_start(i), cfg.frame_start(i) + T), g)
              for i in range(n_images)]
    return ImageSeries(tuple(frames), cfg, truth), rec


def analyze_pair(series: ImageSeries, record: sim.SpcmRecord, detector: detect.Detector,
                 cfg: ExperimentConfig) -> PairRun:
    """Detection in the first image and a two-spot fit to the summed images."""
    frames = series.signal_frames
    events = [e for e in detector.detect(frames[0]) if e.in_roi]
    ok = all(not e.above_upper_bound for e in events)
    loc = None
    match = False
    pos = tuple(record.atom_positions_um)
    if len(events) == 2 and ok:
        seeds = (float(events[0].pixel_col), float(events[1].pixel_col))
        loc = detect.localize_pair(frames, seeds, cfg)
        true_cols = sorted(p / cfg.pixel_pitch_um_object for p in pos)
        match = all(abs(s - t) <= detector.match_tolerance_px + 0.5 for s, t in zip(seeds, true_cols))
    return PairRun(record.run_id, pos, record.detected_counts, record.coupling, len(events), ok, loc, match)


def simulate_pair_run(cfg: ExperimentConfig, seed: int, run_id: int, detector: detect.Detector,
                      n_images: int = 3) -> PairRun:
    series, rec = simulate_pair_data(cfg, seed, run_id, n_images)
    return analyze_pair(series, rec, detector, cfg)


def _pair_job(run_id, cfg, seed, detector, n_images):
    return simulate_pair_run(cfg, seed, run_id, detector, n_images)


def simulate_pair_runs(cfg: ExperimentConfig, seed: int, n_runs: int, detector: detect.Detector,
                       jobs: int = 1, n_images: int = 3) -> list[PairRun]:
    job = partial(_pair_job, cfg=cfg, seed=seed, detector=detector, n_images=n_images)
    return parallel_map(job, range(n_runs), jobs)


PAIR_FREQ_GRID = np.linspace(0.0, 1.0, 2001)  # 1/um


def pair_spectrum(runs: Sequence[PairRun], freq_grid=None) -> spectral.Periodogram:
    """Periodogram of photon-counter totals against fitted separations of the usable runs.

    The default grid spans 0 to 1 per micrometre.  Separations are close to
    lattice multiples, so a grid reaching far beyond the lattice Nyquist
    frequency would pick up aliases of the true modulation.
    """
    if freq_grid is None:
        freq_grid = PAIR_FREQ_GRID
    use = [r for r in runs if r.usable]
    sep = np.array([r.localization.separation_um for r in use])
    counts = np.array([r.spcm_counts for r in use], float)
    return spectral.periodogram(sep, counts, freq_grid=freq_grid)


def position_rmse(runs: Sequence[PairRun]) -> float:
    """RMS error of the fitted atom positions of usable runs whose detections hit both atoms.

    Runs where a false detection stood in for an atom (for instance one lost
    early in the exposure) are detection failures and are left out.
    """
    err = []
    for r in runs:
        if r.usable and r.seeds_match:
            fit = sorted(r.localization.positions_um)
            err.extend(np.subtract(fit, sorted(r.true_positions_um)))
    err = np.asarray(err)
    return float(np.sqrt(np.mean(err ** 2))) if err.size else float("nan")


def separation_rmse(runs: Sequence[PairRun]) -> float:
    """RMS error of the fitted separations, same selection as :func:`position_rmse`."""
    use = [r for r in runs if r.usable and r.seeds_match]
    err = np.array([r.localization.separation_um - r.true_separation_um for r in use])
    return float(np.sqrt(np.mean(err ** 2))) if err.size else float("nan")


# --- photon-counter batches --------------------------------------------------

def _positions(cfg: ExperimentConfig, g: np.random.Generator, n_runs: int, n_atoms: int) -> np.ndarray:
    """Distinct lattice sites per run, drawn from the loading distribution.

    Sites are drawn independently and rows with a repeated site are redrawn,
    so each run follows the independent law conditioned on distinct sites.
    """
    sites, probs = sim.site_distribution(cfg)
    if n_atoms > sites.size:
        raise ValueError("more atoms than lattice sites")
    idx = g.choice(sites.size, size=(n_runs, n_atoms), p=probs)
    if n_atoms > 1:
        while True:
            srt = np.sort(idx, axis=1)
            bad = np.flatnonzero((np.diff(srt, axis=1) == 0).any(axis=1))
            if bad.size == 0:
                break
            idx[bad] = g.choice(sites.size, size=(bad.size, n_atoms), p=probs)
    return np.sort(sites[idx].astype(float), axis=1) * cfg.lattice_spacing


@dataclass(frozen=True)
class SpcmScatterBatch:
    n_atoms: int
    records: tuple[sim.SpcmRecord, ...]

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.detected_counts for r in self.records])


def _scatter_job(run_id, cfg, seed, n_atoms, coupling):
    g = run_stream(seed, SCATTER, run_id).generator()
    pos = _positions(cfg, g, 1, n_atoms)[0]
    return sim.simulate_spcm_scatter(tuple(pos), cfg, g, run_id, coupling)


def simulate_scatter_batch(cfg: ExperimentConfig, seed: int, n_runs: int, n_atoms: int,
                           coupling: str = "mixed", jobs: int = 1, offset: int | None = None) -> SpcmScatterBatch:
    """Photon-counter runs with ``n_atoms`` atoms; run ids start at ``n_atoms * GROUP_STRIDE`` by default."""
    start = n_atoms * GROUP_STRIDE if offset is None else offset
    job = partial(_scatter_job, cfg=cfg, seed=seed, n_atoms=n_atoms, coupling=coupling)
    recs = parallel_map(job, range(start, start + n_runs), jobs)
    return SpcmScatterBatch(n_atoms, tuple(recs))


def scatter_template(cfg: ExperimentConfig, seed: int, n_draws: int, coupling: str) -> np.ndarray:
    """Large Monte-Carlo sample of two-atom counts under one amplitude law."""
    tag = {"common": 0, "differential": 1, "incoherent": 2, "mixed": 3}[coupling]
    g = run_stream(seed, TEMPLATES, tag).generator()
    return sim.sample_scatter_counts(_positions(cfg, g, n_draws, 2), cfg, g, coupling)


@dataclass(frozen=True)
class ModeWeightStudy:
    fit: stats.ModeWeightFit
    counts: np.ndarray
    common: np.ndarray
    differential: np.ndarray
    bin_edges: np.ndarray


def mode_weight_study(cfg: ExperimentConfig, seed: int, n_runs: int, n_template: int = 400_000,
                      bin_width: float = 10.0, jobs: int = 1) -> ModeWeightStudy:
    """Recover the common-mode weight of two-atom runs from their count histogram.

    The measured runs are drawn from the mixed law on their own stream; the
    two pure-law templates use independent streams.
    """
    data = scatter_template(cfg, seed, n_runs, "mixed")
    common = scatter_template(cfg, seed, n_template, "common")
    diff = scatter_template(cfg, seed, n_template, "differential")
    lo = math.floor(min(data.min(), np.percentile(common, 0.01)) / bin_width) * bin_width
    hi = math.ceil(max(data.max(), np.percentile(common, 99.99)) / bin_width + 1) * bin_width
    edges = np.arange(lo, hi + bin_width, bin_width)
    return ModeWeightStudy(stats.fit_mode_weight(data, common, diff, edges), data, common, diff, edges)


def _transmission_job(run_id, cfg, seed, n_atoms):
    g = run_stream(seed, TRANSMISSION, run_id).generator()
    return sim.simulate_spcm_transmission(n_atoms, cfg, g, run_id)


def simulate_transmission_records(cfg: ExperimentConfig, seed: int, runs_per_group: int,
                                  max_atoms: int = 3, jobs: int = 1) -> list[sim.SpcmRecord]:
    """Guided-probe runs for every atom number up to ``max_atoms``.

    Group ``n`` uses run ids from ``n * GROUP_STRIDE``, so a run does not
    change when the group size does.
    """
    out = []
    for n in range(max_atoms + 1):
        ids = range(n * GROUP_STRIDE, n * GROUP_STRIDE + runs_per_group)
        out.extend(parallel_map(partial(_transmission_job, cfg=cfg, seed=seed, n_atoms=n), ids, jobs))
    return out


def group_counts(records: Sequence[sim.SpcmRecord]) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for r in records:
        groups.setdefault(r.n_atoms_true, []).append(r.detected_counts)
    return {n: np.array(v) for n, v in sorted(groups.items())}


def simulate_transmission_groups(cfg: ExperimentConfig, seed: int, runs_per_group: int,
                                 max_atoms: int = 3, jobs: int = 1) -> dict[int, np.ndarray]:
    return group_counts(simulate_transmission_records(cfg, seed, runs_per_group, max_atoms, jobs))


# --- position dependence -----------------------------------------------------

def _binned_mean(x, y, edges) -> np.ndarray:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    idx = np.digitize(x, edges) - 1
    out = np.full(len(edges) - 1, np.nan)
    for k in range(out.size):
        sel = idx == k
        if sel.any():
            out[k] = float(y[sel].mean())
    return out


def position_profiles(cfg: ExperimentConfig, camera_pos_um, camera_sums, spcm_pos_um, spcm_counts,
                      detected_pos_um, bin_um: float = 24.0) -> dict[str, np.ndarray]:
    """Mean single-atom signals and detection counts in position intervals across the ROI.

    Camera signals are 3x3 sums above the configured background; photon-counter
    signals are one-atom totals above the configured background level.
    """
    n_bins = max(1, int(round((cfg.roi_max_um - cfg.roi_min_um) / bin_um)))
    edges = np.linspace(cfg.roi_min_um, cfg.roi_max_um, n_bins + 1)
    cam = np.asarray(camera_sums, float) - cfg.background_mean_counts
    spcm = np.asarray(spcm_counts, float) - cfg.spcm_bg_mean
    counts, _ = np.histogram(np.asarray(detected_pos_um, float), bins=edges)
    return {
        "edges": edges,
        "centres": 0.5 * (edges[:-1] + edges[1:]),
        "camera_signal": _binned_mean(camera_pos_um, cam, edges),
        "spcm_signal": _binned_mean(spcm_pos_um, spcm, edges),
        "detections": counts,
    }
