"""Histograms, Gaussian (mixture) fits and the detection/loss model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special
from scipy import stats as sps

__all__ = [
    "EmptyInput", "InsufficientData", "InsufficientGroup", "FitDiverged",
    "Histogram", "build_histogram", "GaussianFit", "fit_gaussian_mixture",
    "DetectionModel", "predict_conditioned_histogram", "LossSplit",
    "loss_split_probabilities", "presence_fraction_for_undetected",
    "MixtureFit", "ThresholdSweep", "threshold_sweep", "FalseDetectionCurve",
    "false_detection_curve", "BeerLambertResult", "beer_lambert_analysis",
    "ModeWeightFit", "fit_mode_weight", "total_variation",
]


class EmptyInput(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class InsufficientGroup(ValueError):
    pass


class FitDiverged(RuntimeError):
    pass


# --- histograms --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    n_total: float

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        counts = np.asarray(self.counts)
        if counts.shape != (edges.size - 1,):
            raise ValueError("need exactly one count per bin")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must increase")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    def normalized(self) -> np.ndarray:
        total = float(np.sum(self.counts))
        return np.asarray(self.counts, float) / total if total > 0 else np.zeros(self.counts.size)


def build_histogram(values, bin_width: float | None = None, edges=None,
                    start: float | None = None) -> Histogram:
    """Bin ``values`` into left-closed bins; the last right edge is inclusive.

    Give either explicit ``edges`` or a ``bin_width`` (bins start at
    ``start``, default ``floor(min(values))``, and extend past the maximum).
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise EmptyInput("cannot histogram an empty sample")
    if edges is None:
        if bin_width is None or bin_width <= 0:
            raise ValueError("need edges or a positive bin_width")
        lo = math.floor(v.min()) if start is None else start
        nbins = int(math.floor((v.max() - lo) / bin_width)) + 1
        edges = lo + bin_width * np.arange(nbins + 1)
    counts, edges = np.histogram(v, bins=np.asarray(edges, dtype=float))
    return Histogram(edges, counts, int(counts.sum()))


def total_variation(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


# --- Gaussian mixtures on binned data ---------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianFit:
    amplitudes: np.ndarray  # population of each component, in counts
    means: np.ndarray
    sigmas: np.ndarray
    offset: float
    amplitude_errors: np.ndarray
    mean_errors: np.ndarray
    sigma_errors: np.ndarray
    offset_error: float
    n_components: int
    reduced_chi2: float

    def expected(self, edges) -> np.ndarray:
        """Expected counts per bin, evaluated at bin centres."""
        edges = np.asarray(edges, float)
        x = 0.5 * (edges[:-1] + edges[1:])
        w = np.diff(edges)
        return _mixture_counts(x, w, self.amplitudes, self.means, self.sigmas, self.offset)


def _mixture_counts(x, w, amps, means, sigmas, offset=0.0):
    out = np.full(x.shape, float(offset))
    for a, m, s in zip(amps, means, sigmas):
        out += a * w * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))
    return out


def _default_init(hist: Histogram, n: int):
    x = hist.centers
    c = np.asarray(hist.counts, float)
    tot = c.sum()
    mu = (c * x).sum() / tot
    sd = math.sqrt(max((c * (x - mu) ** 2).sum() / tot, hist.widths.mean() ** 2))
    if n == 1:
        return [(tot, mu, sd)]
    # split at the weighted mean and take moments on each side
    out = []
    for sel in (x < mu, x >= mu):
        cs = c[sel]
        xs = x[sel]
        t = max(cs.sum(), 1.0)
        m = (cs * xs).sum() / t if cs.sum() > 0 else mu
        s = math.sqrt(max((cs * (xs - m) ** 2).sum() / t, hist.widths.mean() ** 2))
        out.append((t, m, s))
    return out


def fit_gaussian_mixture(hist: Histogram, n_components: int = 1, init=None,
                         fit_offset: bool = False) -> GaussianFit:
    """Weighted least-squares fit of 1 or 2 Gaussians to binned counts.

    Residuals are weighted by ``1/sqrt(max(count, 1))``.  ``init`` is a
    sequence of ``(amplitude, mean, sigma)`` per component; it defaults to
    moment estimates.  Parameter errors come from the inverse of the
    weighted normal matrix.
    """
    if n_components not in (1, 2):
        raise ValueError("n_components must be 1 or 2")
    y = np.asarray(hist.counts, float)
    if np.count_nonzero(y) < 5 * n_components:
        raise InsufficientData("need at least 5 non-empty bins per component")
    x = hist.centers
    w = hist.widths
    sw = 1.0 / np.sqrt(np.maximum(y, 1.0))
    init = list(init) if init is not None else _default_init(hist, n_components)
    p0 = [v for comp in init for v in comp]
    if fit_offset:
        p0.append(0.0)
    p0 = np.asarray(p0, float)

    def unpack(p):
        k = 3 * n_components
        comps = p[:k].reshape(n_components, 3)
        off = p[k] if fit_offset else 0.0
        return comps[:, 0], comps[:, 1], np.abs(comps[:, 2]), off

    def resid(p):
        a, m, s, off = unpack(p)
        return (y - _mixture_counts(x, w, a, m, s, off)) * sw

    res = optimize.least_squares(resid, p0, method="lm", xtol=1e-14, ftol=1e-14,
                                 gtol=1e-14, max_nfev=20000)
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitDiverged(res.message)
    a, m, s, off = unpack(res.x)
    if np.any(s <= 0):
        raise FitDiverged("non-positive width")
    J = res.jac
    try:
        cov = np.linalg.inv(J.T @ J)
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(p0.size, np.inf)
    dof = max(y.size - p0.size, 1)
    chi2 = float(np.sum(res.fun ** 2)) / dof
    order = np.argsort(m)
    k = 3 * n_components
    e = err[:k].reshape(n_components, 3)
    return GaussianFit(
        amplitudes=a[order], means=m[order], sigmas=s[order], offset=float(off),
        amplitude_errors=e[order, 0], mean_errors=e[order, 1], sigma_errors=e[order, 2],
        offset_error=float(err[k]) if fit_offset else 0.0,
        n_components=n_components, reduced_chi2=chi2,
    )


# --- loss / false-detection model -------------------------------------------

@dataclass(frozen=True, eq=False)
class DetectionModel:
    """Inputs of the conditioned next-image histogram model.

    ``f_thr`` is the fraction of the exposure an atom must be present for
    its accumulated signal to cross the detection threshold; it places the
    detection instant inside the detection image.  ``gap_s`` is the dead time
    between two images.  With ``f_thr = 1`` and ``gap_s = 0`` the model
    reduces to: false detection -> background, survival through the next
    exposure -> full atom signal, loss inside it -> partial signal.

    ``bg_samples`` and ``atom_samples`` optionally replace the Gaussian
    shapes of the pure background and full-atom components by observed
    count distributions; the partial-signal continuum always interpolates
    the Gaussian parameters.
    """

    p_false: float
    tau_s: float
    T_s: float
    bg_mean: float
    bg_sigma: float
    atom_mean: float
    atom_sigma: float
    f_thr: float = 0.445
    gap_s: float = 0.0
    bg_samples: np.ndarray | None = None
    atom_samples: np.ndarray | None = None

    def __post_init__(self):
        for name in ("p_false", "f_thr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.tau_s <= 0 or self.T_s <= 0:
            raise ValueError("tau_s and T_s must be positive")

    @property
    def lead_time(self) -> float:
        """Time from the detection instant to the start of the next exposure."""
        return (1.0 - self.f_thr) * self.T_s + self.gap_s

    def weights(self) -> tuple[float, float, float]:
        """(background, full atom, partial continuum) mixture weights."""
        tau, T = self.tau_s, self.T_s
        s0 = math.exp(-self.lead_time / tau) if math.isfinite(tau) else 1.0
        s1 = s0 * math.exp(-T / tau) if math.isfinite(tau) else 1.0
        real = 1.0 - self.p_false
        return (self.p_false + real * (1.0 - s0), real * s1, real * (s0 - s1))

    def partial_params(self, frac):
        frac = np.asarray(frac, float)
        mean = self.bg_mean + frac * (self.atom_mean - self.bg_mean)
        var = self.bg_sigma ** 2 + frac * (self.atom_sigma ** 2 - self.bg_sigma ** 2)
        return mean, np.sqrt(np.maximum(var, 1e-12))


def _bin_probs(edges, mean, sigma):
    z = (edges[None, :] - np.atleast_1d(mean)[:, None]) / np.atleast_1d(sigma)[:, None]
    cdf = special.ndtr(z)
    return np.diff(cdf, axis=1)


def _component_probs(edges, samples, mean, sigma):
    if samples is None:
        return _bin_probs(edges, mean, sigma)[0]
    v = np.asarray(samples, float)
    counts, _ = np.histogram(v, bins=edges)
    return counts / v.size


def _component_draws(rng, k, samples, mean, sigma):
    if samples is None:
        return rng.normal(mean, sigma, k)
    return rng.choice(np.asarray(samples, float), size=k)


def predict_conditioned_histogram(model: DetectionModel, bin_edges, n_total: float,
                                  method: str = "quadrature", n_nodes: int = 256,
                                  n_draws: int = 200_000,
                                  rng: np.random.Generator | None = None) -> Histogram:
    """Expected next-image 3x3 count histogram after a single detection.

    ``method="quadrature"`` integrates the loss-time continuum with
    Gauss-Legendre nodes; ``method="montecarlo"`` samples it.  Expected
    counts are scaled so the histogram range holds ``n_total`` entries.
    """
    edges = np.asarray(bin_edges, float)
    w_bg, w_full, w_part = model.weights()
    tau, T = model.tau_s, model.T_s
    if method == "quadrature":
        if n_nodes < 200:
            raise ValueError("use at least 200 quadrature nodes")
        probs = w_bg * _component_probs(edges, model.bg_samples, model.bg_mean, model.bg_sigma)
        probs = probs + w_full * _component_probs(edges, model.atom_samples, model.atom_mean,
                                                  model.atom_sigma)
        if w_part > 0:
            nodes, wts = np.polynomial.legendre.leggauss(n_nodes)
            t = 0.5 * T * (nodes + 1.0)
            if math.isfinite(tau):
                dens = np.exp(-t / tau) / (tau * (1.0 - math.exp(-T / tau)))
            else:
                dens = np.full_like(t, 1.0 / T)
            m, s = model.partial_params(t / T)
            pb = _bin_probs(edges, m, s)
            probs = probs + w_part * (0.5 * T * wts * dens) @ pb
    elif method == "montecarlo":
        if n_draws < 100_000:
            raise ValueError("use at least 1e5 Monte-Carlo draws")
        rng = rng or np.random.default_rng(0)
        comp = rng.choice(3, size=n_draws, p=np.array([w_bg, w_full, w_part]) / (w_bg + w_full + w_part))
        vals = np.empty(n_draws)
        nb = comp == 0
        vals[nb] = _component_draws(rng, int(nb.sum()), model.bg_samples, model.bg_mean, model.bg_sigma)
        nf = comp == 1
        vals[nf] = _component_draws(rng, int(nf.sum()), model.atom_samples, model.atom_mean,
                                    model.atom_sigma)
        npart = comp == 2
        k = int(npart.sum())
        if math.isfinite(tau):
            # inverse-CDF sampling of an exponential truncated to [0, T]
            u = rng.random(k)
            t = -tau * np.log1p(-u * (1.0 - math.exp(-T / tau)))
        else:
            t = rng.random(k) * T
        m, s = model.partial_params(t / T)
        vals[npart] = rng.normal(m, s)
        counts, _ = np.histogram(vals, bins=edges)
        probs = counts / n_draws
    else:
        raise ValueError(f"unknown method {method!r}")
    inside = probs.sum()
    expected = n_total * probs / inside if inside > 0 else np.zeros_like(probs)
    return Histogram(edges, expected, float(n_total))


@dataclass(frozen=True)
class LossSplit:
    p_undetected_loss: float
    p_detected_then_lost: float

    @property
    def total(self) -> float:
        return self.p_undetected_loss + self.p_detected_then_lost


def loss_split_probabilities(T_s: float, tau_s: float, f_thr: float) -> LossSplit:
    """Split of in-exposure losses into missed and detected-then-lost atoms."""
    if not 0.0 < f_thr < 1.0:
        raise ValueError("f_thr must lie in (0, 1)")
    if not math.isfinite(tau_s):
        return LossSplit(0.0, 0.0)
    early = math.exp(-f_thr * T_s / tau_s)
    return LossSplit(1.0 - early, early - math.exp(-T_s / tau_s))


def presence_fraction_for_undetected(p_undetected: float, T_s: float, tau_s: float) -> float:
    """Invert ``1 - exp(-f T / tau) = p`` for the presence fraction ``f``."""
    return -tau_s * math.log1p(-p_undetected) / T_s


# --- threshold sweep ---------------------------------------------------------

@dataclass(frozen=True)
class MixtureFit:
    """Single-atom plus unresolved-pair cumulative-Gaussian fit (pair mean = 2 x single)."""

    mean: float
    sigma1: float
    sigma2: float
    pair_weight: float
    errors: Mapping[str, float] = field(default_factory=dict)

    def survival(self, thr):
        thr = np.asarray(thr, float)
        s1 = special.ndtr((self.mean - thr) / self.sigma1)
        s2 = special.ndtr((2 * self.mean - thr) / self.sigma2)
        return (1 - self.pair_weight) * s1 + self.pair_weight * s2

    def detection_probability(self, thr: float) -> float:
        return float(special.ndtr((self.mean - thr) / self.sigma1))


@dataclass(frozen=True, eq=False)
class ThresholdSweep:
    thresholds: np.ndarray
    survival: np.ndarray
    fit: MixtureFit

    def detection_probability(self, thr: float) -> float:
        return self.fit.detection_probability(thr)


def empirical_survival(values, thresholds) -> np.ndarray:
    v = np.sort(np.asarray(values, float))
    thr = np.asarray(thresholds, float)
    return 1.0 - np.searchsorted(v, thr, side="right") / v.size


def threshold_sweep(peaks, thresholds=None) -> ThresholdSweep:
    """Empirical P(peak > thr) and its two-component cumulative-Gaussian fit."""
    v = np.asarray(peaks, float)
    if v.size < 100:
        raise InsufficientData("need at least 100 peak values")
    if thresholds is None:
        lo, hi = np.percentile(v, [0.1, 99.9])
        span = hi - lo
        thresholds = np.linspace(lo - 0.1 * span, hi + 0.1 * span, 200)
    thresholds = np.asarray(thresholds, float)
    surv = empirical_survival(v, thresholds)
    med = float(np.median(v))
    iqr = float(np.subtract(*np.percentile(v, [75, 25])))
    s0 = max(iqr / 1.349, 1e-3)

    def resid(p):
        mu, s1, s2, w = p
        model = (1 - w) * special.ndtr((mu - thresholds) / s1) + w * special.ndtr((2 * mu - thresholds) / s2)
        return model - surv

    p0 = [med, s0, s0 * math.sqrt(2), 0.02]
    lb = [-np.inf, 1e-6, 1e-6, 0.0]
    ub = [np.inf, np.inf, np.inf, 1.0]
    res = optimize.least_squares(resid, p0, bounds=(lb, ub), method="trf", xtol=1e-12, ftol=1e-12)
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitDiverged(res.message)
    mu, s1, s2, w = res.x
    dof = max(thresholds.size - 4, 1)
    s2res = float(np.sum(res.fun ** 2)) / dof
    try:
        cov = np.linalg.pinv(res.jac.T @ res.jac) * s2res
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(4, np.inf)
    fit = MixtureFit(float(mu), float(s1), float(s2), float(w),
                     dict(zip(("mean", "sigma1", "sigma2", "pair_weight"), map(float, err))))
    return ThresholdSweep(thresholds, surv, fit)


# --- false detections --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FalseDetectionCurve:
    thresholds: np.ndarray
    mean_per_image: np.ndarray
    p_at_least_one: np.ndarray

    def first_zero(self) -> float:
        """Smallest threshold from which the mean count stays exactly zero."""
        nz = np.flatnonzero(self.mean_per_image > 0)
        if nz.size == 0:
            return float(self.thresholds[0])
        if nz[-1] + 1 >= self.thresholds.size:
            return float("inf")
        return float(self.thresholds[nz[-1] + 1])


def false_detection_curve(maxima_per_frame: Sequence, thresholds) -> FalseDetectionCurve:
    """False detections per reference image versus threshold.

    ``maxima_per_frame`` holds, for each reference frame, the values of all
    in-ROI row maxima of the convolved, background-corrected image.
    """
    if len(maxima_per_frame) < 100:
        raise InsufficientData("need at least 100 reference frames")
    thr = np.asarray(thresholds, float)
    n_frames = len(maxima_per_frame)
    counts = np.zeros((n_frames, thr.size))
    for i, vals in enumerate(maxima_per_frame):
        v = np.sort(np.asarray(vals, float))
        counts[i] = v.size - np.searchsorted(v, thr, side="right")
    return FalseDetectionCurve(thr, counts.mean(axis=0), (counts > 0).mean(axis=0))


# --- Beer-Lambert ------------------------------------------------------------

@dataclass(frozen=True)
class BeerLambertResult:
    atom_numbers: tuple[int, ...]
    means: tuple[float, ...]
    mean_errors: tuple[float, ...]
    extinctions: tuple[float, ...]  # eta(1), eta(2), ...
    extinction_errors: tuple[float, ...]
    constant_extinction: float
    constant_extinction_error: float
    chi2: float
    dof: int
    p_value: float


def beer_lambert_analysis(groups: Mapping[int, Sequence[float]], min_group: int = 50) -> BeerLambertResult:
    """Sequential extinctions ``1 - N(i)/N(i-1)`` and a constant-extinction test.

    ``groups`` maps atom number to transmitted counts per run.  The
    constant model ``N(i) = N0 (1 - eps)^i`` is fitted to the group means by
    weighted least squares in log space.
    """
    ns = sorted(groups)
    if not ns or ns != list(range(ns[0], ns[0] + len(ns))) or len(ns) < 2:
        raise InsufficientGroup("need consecutive atom-number groups, at least two")
    means, errs = [], []
    for n in ns:
        v = np.asarray(groups[n], float)
        if v.size < min_group:
            raise InsufficientGroup(f"group {n} has {v.size} runs, need {min_group}")
        means.append(v.mean())
        errs.append(v.std(ddof=1) / math.sqrt(v.size))
    means = np.array(means)
    errs = np.array(errs)
    ratio = means[1:] / means[:-1]
    eta = 1.0 - ratio
    eta_err = ratio * np.sqrt((errs[1:] / means[1:]) ** 2 + (errs[:-1] / means[:-1]) ** 2)

    y = np.log(means)
    sy = errs / means
    X = np.column_stack([np.ones(len(ns)), np.asarray(ns, float)])
    W = 1.0 / sy ** 2
    A = X.T @ (W[:, None] * X)
    cov = np.linalg.inv(A)
    beta = cov @ (X.T @ (W * y))
    chi2 = float(np.sum(W * (y - X @ beta) ** 2))
    dof = len(ns) - 2
    p = float(sps.chi2.sf(chi2, dof)) if dof > 0 else 1.0
    slope = beta[1]
    eps = 1.0 - math.exp(slope)
    eps_err = math.exp(slope) * math.sqrt(cov[1, 1])
    return BeerLambertResult(
        tuple(ns), tuple(map(float, means)), tuple(map(float, errs)),
        tuple(map(float, eta)), tuple(map(float, eta_err)),
        float(eps), float(eps_err), chi2, dof, p,
    )


# --- common / differential mode weight ---------------------------------------

@dataclass(frozen=True)
class ModeWeightFit:
    weight: float
    error: float
    neg_log_likelihood: float


def fit_mode_weight(counts, common_samples, differential_samples, bin_edges) -> ModeWeightFit:
    """Binned Poisson-likelihood fit of the common-mode weight of a two-template mixture.

    The templates are large Monte-Carlo samples of the two-atom count
    distribution under purely common-mode and purely differential-mode
    amplitude fluctuations.
    """
    edges = np.asarray(bin_edges, float)
    obs, _ = np.histogram(np.asarray(counts, float), bins=edges)
    pc, _ = np.histogram(np.asarray(common_samples, float), bins=edges)
    pd, _ = np.histogram(np.asarray(differential_samples, float), bins=edges)
    pc = pc / max(pc.sum(), 1)
    pd = pd / max(pd.sum(), 1)
    n = obs.sum()
    floor = 0.5 / max(len(common_samples), len(differential_samples))

    def nll(w):
        lam = n * np.maximum(w * pc + (1 - w) * pd, floor)
        return float(np.sum(lam - obs * np.log(lam)))

    res = optimize.minimize_scalar(nll, bounds=(0.0, 1.0), method="bounded",
                                   options={"xatol": 1e-8})
    w = float(res.x)
    h = 1e-4
    lo, hi = max(w - h, 0.0), min(w + h, 1.0)
    mid = 0.5 * (lo + hi)
    curv = (nll(hi) - 2 * nll(mid) + nll(lo)) / (0.5 * (hi - lo)) ** 2
    err = 1.0 / math.sqrt(curv) if curv > 0 else float("inf")
    return ModeWeightFit(w, err, float(res.fun))
