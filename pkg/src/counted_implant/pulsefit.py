"""Post-implantation analysis of spectroscopy-amplifier amplitudes.

The amplitude histogram of every pulse fired into an array shows peaks for
0, 1 and 2 ions.  A Gaussian mixture fitted to the binned histogram gives
the peak areas (event counts), from which

* the beam's ions/pulse follows from the 1-to-0 area ratio,
* the counting error budget follows from Gaussian tail areas on the wrong
  side of each threshold, normalised by the one-ion area.

Budget conventions: ``fn`` and ``mult`` are ions implanted but not counted
(positive error), ``fp`` and ``single_as_double`` are counts without a
matching ion (negative error).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import least_squares
from scipy.signal import find_peaks
from scipy.special import ndtr
from scipy.stats import poisson

from .beamline import DetectorConfig

log = logging.getLogger(__name__)

__all__ = [
    "Thresholds",
    "AmplitudeHistogram",
    "MixtureFit",
    "ErrorBudget",
    "SiteReconstruction",
    "MixtureFitError",
    "build_histogram",
    "fit_mixture",
    "mixture_from_detector",
    "estimate_lambda",
    "multiples_rate",
    "in_situ_budget",
    "post_budget",
    "timed_error",
    "classify_pulse",
    "classify_amplitudes",
    "reconstruct_sites",
]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class MixtureFitError(RuntimeError):
    """Histogram fit failed; ``last`` holds the last iterate when available."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class Thresholds:
    in_situ: float = 0.78
    post_low: float = 0.6
    post_high: float = 1.96

    def __post_init__(self):
        if not 0 < self.post_low < self.in_situ < self.post_high:
            raise ValueError(
                "thresholds must satisfy 0 < post_low < in_situ < post_high, got "
                f"{self.post_low}, {self.in_situ}, {self.post_high}")


@dataclass(frozen=True)
class AmplitudeHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MixtureFit:
    """Gaussian components ordered by mean; ``areas`` are event counts."""

    areas: np.ndarray
    means: np.ndarray
    widths: np.ndarray
    chi2_red: float = float("nan")
    n_events: float = float("nan")
    stderr: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("areas", "means", "widths"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.areas < 0):
            raise ValueError("areas must be >= 0")
        if np.any(self.widths <= 0):
            raise ValueError("widths must be > 0")
        if np.any(np.diff(self.means) <= 0):
            raise ValueError("means must be strictly increasing")

    @property
    def n_peaks(self) -> int:
        return len(self.areas)

    def area_below(self, k: int, x: float) -> float:
        return float(self.areas[k] * ndtr((x - self.means[k]) / self.widths[k]))

    def area_above(self, k: int, x: float) -> float:
        return float(self.areas[k] * ndtr((self.means[k] - x) / self.widths[k]))

    def component_counts(self, edges) -> np.ndarray:
        """Expected counts per bin for each component, shape (n_peaks, n_bins)."""
        edges = np.asarray(edges, dtype=float)
        z = (edges[None, :] - self.means[:, None]) / self.widths[:, None]
        return self.areas[:, None] * np.diff(ndtr(z), axis=1)


@dataclass(frozen=True)
class ErrorBudget:
    """Fractional counting errors relative to the number of one-ion pulses."""

    fn_rate: float
    fp_rate: float
    mult_rate: float
    single_as_double_rate: float = 0.0

    @property
    def total_plus(self) -> float:
        return self.fn_rate + self.mult_rate

    @property
    def total_minus(self) -> float:
        return self.fp_rate + self.single_as_double_rate

    @property
    def net(self) -> float:
        return self.total_plus - self.total_minus

    def as_dict(self) -> dict:
        return {
            "fn_rate": self.fn_rate,
            "fp_rate": self.fp_rate,
            "mult_rate": self.mult_rate,
            "single_as_double_rate": self.single_as_double_rate,
            "total_plus": self.total_plus,
            "total_minus": self.total_minus,
        }


def _amplitudes(records) -> np.ndarray:
    """Pull amplitudes out of arrays, SiteLogs or PulseRecords."""
    if isinstance(records, np.ndarray):
        return records.astype(float).ravel()
    records = list(records)
    if not records:
        return np.empty(0)
    first = records[0]
    if hasattr(first, "sca_fired") and isinstance(getattr(first, "amplitude"), np.ndarray):
        return np.concatenate([r.amplitude for r in records])
    if hasattr(first, "amplitude"):
        return np.array([r.amplitude for r in records], dtype=float)
    return np.asarray(records, dtype=float)


PAD_BINS = 3


def build_histogram(records, bin_width: float = 0.02) -> AmplitudeHistogram:
    """Bin amplitudes on a grid aligned to multiples of ``bin_width``.

    The grid extends ``PAD_BINS`` empty bins past the extreme amplitudes so
    that a fit cannot hide peak area outside the histogram.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    a = _amplitudes(records)
    if a.size == 0:
        raise ValueError("cannot build a histogram from an empty record set")
    lo = math.floor(a.min() / bin_width) - PAD_BINS
    hi = math.floor(a.max() / bin_width) + 1 + PAD_BINS
    edges = np.arange(lo, hi + 1) * bin_width
    counts, _ = np.histogram(a, bins=edges)
    return AmplitudeHistogram(edges, counts.astype(np.int64))


# -- mixture fit ------------------------------------------------------------

def _half_max_sigma(ys, i, bw):
    h = ys[i] / 2
    left = i
    while left > 0 and ys[left] > h:
        left -= 1
    right = i
    while right < len(ys) - 1 and ys[right] > h:
        right += 1
    return max(right - left, 1) * bw / FWHM_PER_SIGMA


def _seed_peaks(x, y, n_peaks, smooth_bins, ladder):
    bw = x[1] - x[0] if len(x) > 1 else 1.0
    ys = gaussian_filter1d(y.astype(float), smooth_bins, mode="constant")
    idx, props = find_peaks(np.r_[0.0, ys, 0.0], prominence=0)
    idx = idx - 1
    noise = np.sqrt(np.maximum(ys[idx], 1.0) / (2 * math.sqrt(math.pi) * smooth_bins))
    idx = idx[props["prominences"] > 3 * noise]
    idx = np.sort(idx[np.argsort(ys[idx])[::-1][:n_peaks]])
    if len(idx) < n_peaks and not (ladder and len(idx) >= 2):
        raise MixtureFitError(
            f"histogram shows {len(idx)} significant maxima, need {n_peaks}")

    sm = smooth_bins * bw
    mus = list(x[idx])
    sig = []
    for i in idx:
        s_tot = _half_max_sigma(ys, i, bw)
        sig.append(math.sqrt(max(s_tot ** 2 - sm ** 2, (0.3 * bw) ** 2)))
    for j in range(len(mus)):
        gaps = [abs(mus[j] - m) for m in mus if m != mus[j]]
        if gaps:
            sig[j] = min(sig[j], 0.5 * min(gaps))
    areas = [ys[i] * math.sqrt(2 * math.pi) * math.sqrt(s ** 2 + sm ** 2) / bw
             for i, s in zip(idx, sig)]

    if len(mus) < n_peaks:
        # extend the ion-number ladder: k-ion peaks sit at multiples of the spacing
        step = mus[1] - mus[0]
        log.info("only %d maxima found; seeding %d more peaks on the ladder",
                 len(mus), n_peaks - len(mus))
        while len(mus) < n_peaks:
            mus.append(mus[-1] + step)
            sig.append(sig[-1] * 1.5)
            sel = np.abs(x - mus[-1]) < sig[-1]
            areas.append(max(float(y[sel].sum()) * 1.5, 1.0))
    return np.array(areas), np.array(mus), np.array(sig)


def _unpack(p, n):
    return p[:n], p[n:2 * n], p[2 * n:]


def _ladder_unpack(q, n):
    areas = q[:n]
    mu0, step, s0, s_ion, s_pile = q[n:]
    k = np.arange(n)
    widths = np.sqrt(s0 ** 2 + k * s_ion ** 2 + 0.5 * k * (k - 1) * s_pile ** 2)
    return areas, mu0 + k * step, widths


def fit_mixture(hist: AmplitudeHistogram, n_peaks: int = 3, *, model: str = "free",
                smooth_bins: float = 3.0, ladder: bool = True,
                max_nfev: int = 5000) -> MixtureFit:
    """Least-squares fit of ``n_peaks`` Gaussians to a binned histogram.

    Seeds come from the highest significant maxima of the smoothed
    histogram.  When ``ladder`` is true and at least two maxima were found,
    missing higher peaks are seeded at multiples of the 0-to-1 spacing (a
    weak two-ion peak is often hidden in the one-ion tail).  The fit is
    refined twice with Pearson weights so that small peaks are not swamped
    by the zero-ion peak.

    ``model="free"`` fits an independent area, mean and width per peak.
    ``model="ladder"`` ties the peaks to the detector response: means
    ``mu0 + k*step`` and widths ``sqrt(s0^2 + k*s_ion^2 + C(k,2)*s_pile^2)``,
    plus one extra component for the pulses with more than ``n_peaks - 1``
    ions, which is dropped from the result.  Use it when the two-ion peak is
    too weak or broad to pin down freely.

    Raises
    ------
    MixtureFitError
        Too few maxima, non-convergence, or peaks that collapse out of order.
    """
    if model not in ("free", "ladder"):
        raise ValueError(f"unknown mixture model {model!r}")
    y = hist.counts.astype(float)
    edges = hist.edges
    bw = hist.bin_width
    a0, m0, s0 = _seed_peaks(hist.centers, y, n_peaks, smooth_bins,
                             ladder or model == "ladder")
    span = edges[-1] - edges[0]

    if model == "free":
        n_comp = n_peaks
        lo = np.r_[np.zeros(n_peaks), np.full(n_peaks, edges[0] - 10 * bw),
                   np.full(n_peaks, 0.05 * bw)]
        hi = np.r_[np.full(n_peaks, np.inf), np.full(n_peaks, edges[-1] + 10 * bw),
                   np.full(n_peaks, span + 10 * bw)]
        p = np.r_[a0, m0, s0]

        def unpack(q):
            return _unpack(q, n_peaks)
    else:
        if n_peaks < 2:
            raise ValueError("ladder model needs at least two peaks")
        n_comp = n_peaks + 1
        step0 = m0[1] - m0[0]
        s_ion0 = math.sqrt(max(s0[1] ** 2 - s0[0] ** 2, (0.1 * bw) ** 2))
        lo = np.r_[np.zeros(n_comp), edges[0] - 10 * bw, 0.1 * step0, 0.05 * bw, 0.0, 0.0]
        hi = np.r_[np.full(n_comp, np.inf), edges[-1] + 10 * bw, 10 * step0, span, span, span]
        p = np.r_[a0, 0.05 * a0[-1], m0[0], step0, s0[0], s_ion0, 0.1 * s_ion0]

        def unpack(q):
            return _ladder_unpack(q, n_comp)

    finite_hi = np.where(np.isfinite(hi), hi - 1e-12, hi)
    p = np.clip(p, lo + 1e-12, finite_hi)

    def predict(q):
        a, m, s = unpack(q)
        z = (edges[None, :] - m[:, None]) / s[:, None]
        return (a[:, None] * np.diff(ndtr(z), axis=1)).sum(axis=0)

    weights = 1.0 / np.sqrt(np.maximum(y, 1.0))
    res = None
    for _ in range(3):
        w = weights
        res = least_squares(lambda q: (predict(q) - y) * w, p, bounds=(lo, hi),
                            method="trf", x_scale="jac", max_nfev=max_nfev)
        if res.status <= 0:
            raise MixtureFitError(f"mixture fit did not converge: {res.message}", last=res.x)
        p = res.x
        weights = 1.0 / np.sqrt(np.maximum(predict(p), 1.0))

    a, m, s = unpack(p)
    a, m, s = a[:n_peaks], m[:n_peaks], s[:n_peaks]
    order = np.argsort(m)
    a, m, s = a[order], m[order], s[order]
    if np.any(np.diff(m) <= 0):
        raise MixtureFitError("fitted peaks coincide", last=p)

    mu = predict(p)
    dof = max(len(y) - len(p), 1)
    chi2_red = float(np.sum((y - mu) ** 2 / np.maximum(mu, 1.0)) / dof)
    stderr = None
    if model == "free":
        try:
            cov = np.linalg.pinv(res.jac.T @ res.jac)
            ea, em, es = _unpack(np.sqrt(np.clip(np.diag(cov), 0, None)), n_peaks)
            stderr = np.vstack([ea[order], em[order], es[order]])
        except np.linalg.LinAlgError:
            pass
    return MixtureFit(a, m, s, chi2_red=chi2_red, n_events=float(y.sum()), stderr=stderr)


def mixture_from_detector(det: DetectorConfig, lam: float, n_pulses: float = 1.0,
                          n_peaks: int = 3) -> MixtureFit:
    """Mixture expected from the detector model at ``lam`` ions/pulse.

    Areas are ``n_pulses * Poisson(k; lam)`` and the ``k``-ion peak sits at
    ``k * det.per_ion_amplitude`` with width ``det.width(k)``.
    """
    k = np.arange(n_peaks)
    return MixtureFit(n_pulses * poisson.pmf(k, lam), k * det.per_ion_amplitude, det.width(k),
                      n_events=float(n_pulses))


# -- rates ------------------------------------------------------------------

def estimate_lambda(fit: MixtureFit) -> float:
    """Ions per pulse from the one-to-zero area ratio, ``P(1)/P(0) = lambda``."""
    if fit.areas[0] <= 0:
        raise ValueError("zero-ion peak has no area; ions/pulse undefined")
    return float(fit.areas[1] / fit.areas[0])


def multiples_rate(lam: float) -> float:
    """Pulses with two or more ions per one-ion pulse, ``P(>=2)/P(1)``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return 0.0
    # (1 - e^-l (1 + l)) / (l e^-l) == (e^l - 1 - l) / l
    return float((math.expm1(lam) - lam) / lam)


def in_situ_budget(fit: MixtureFit, th: Thresholds) -> ErrorBudget:
    """Errors of live SCA counting at ``th.in_situ`` (no upper threshold)."""
    a1 = fit.areas[1]
    fn = fit.area_below(1, th.in_situ) / a1
    fp = fit.area_above(0, th.in_situ) / a1
    mult = multiples_rate(estimate_lambda(fit))
    return ErrorBudget(fn, fp, mult, 0.0)


def post_budget(fit: MixtureFit, th: Thresholds) -> ErrorBudget:
    """Errors of offline classification with bins at ``post_low``/``post_high``."""
    if fit.n_peaks < 3:
        raise ValueError("post-analysis budget needs the two-ion peak")
    a1 = fit.areas[1]
    fn = fit.area_below(1, th.post_low) / a1
    fp = fit.area_above(0, th.post_low) / a1
    mult = fit.area_below(2, th.post_high) / a1
    sad = fit.area_above(1, th.post_high) / a1
    return ErrorBudget(fn, fp, mult, sad)


def timed_error(n: int) -> float:
    """Relative one-sigma Poisson error of a timed dose of ``n`` ions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1.0 / math.sqrt(n)


# -- per-pulse classification and per-site reconstruction -------------------

def classify_amplitudes(a, th: Thresholds, *, mode: str = "two",
                        one_ion_amplitude: float | None = None) -> np.ndarray:
    """Ion numbers for an array of amplitudes.

    ``mode="two"`` counts anything above ``post_high`` as two ions;
    ``mode="round"`` uses ``max(2, round(a / one_ion_amplitude))`` there.
    """
    a = np.asarray(a, dtype=float)
    n = np.where(a <= th.post_low, 0, np.where(a <= th.post_high, 1, 2))
    if mode == "round":
        if not one_ion_amplitude:
            raise ValueError("mode='round' needs one_ion_amplitude")
        high = a > th.post_high
        n = np.where(high, np.maximum(2, np.rint(a / one_ion_amplitude)), n)
    elif mode != "two":
        raise ValueError(f"unknown mode {mode!r}")
    return n.astype(np.int64)


def classify_pulse(amplitude: float, th: Thresholds, *, mode: str = "two",
                   one_ion_amplitude: float | None = None) -> int:
    return int(classify_amplitudes(amplitude, th, mode=mode,
                                   one_ion_amplitude=one_ion_amplitude))


@dataclass
class SiteReconstruction:
    site_index: np.ndarray
    counts: np.ndarray
    mean: float
    sigma: float
    method: str
    preset: int | None = None
    values: np.ndarray = field(default_factory=lambda: np.empty(0))
    occurrences: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def fwhm(self) -> float:
        return FWHM_PER_SIGMA * self.sigma

    @property
    def timed_sigma(self) -> float:
        return self.preset * timed_error(self.preset) if self.preset else float("nan")

    @property
    def timed_fwhm(self) -> float:
        return FWHM_PER_SIGMA * self.timed_sigma


def _fit_integer_gaussian(values, occ):
    n = occ.sum()
    mean0 = float((values * occ).sum() / n)
    sd0 = float(np.sqrt(((values - mean0) ** 2 * occ).sum() / n))
    lo_e, hi_e = values - 0.5, values + 0.5

    def resid(q):
        amp, mu, s = q
        mod = amp * (ndtr((hi_e - mu) / s) - ndtr((lo_e - mu) / s))
        return (mod - occ) / np.sqrt(np.maximum(mod, 1.0))

    res = least_squares(resid, [n, mean0, max(sd0, 0.3)],
                        bounds=([0, values.min() - 10, 0.05], [np.inf, values.max() + 10, np.inf]))
    if res.status <= 0:
        raise MixtureFitError(f"site histogram fit did not converge: {res.message}", last=res.x)
    return float(res.x[1]), float(res.x[2])


def reconstruct_sites(logs, th: Thresholds, *, preset: int | None = None, mode: str = "two",
                      one_ion_amplitude: float | None = None,
                      min_sites: int = 30) -> SiteReconstruction:
    """Ions per site from offline classification of every pulse.

    The per-site histogram is fitted with a single Gaussian (integer bins);
    with fewer than three distinct values the sample mean and standard
    deviation are used instead.
    """
    logs = list(logs)
    if len(logs) < min_sites:
        raise ValueError(f"need at least {min_sites} sites, got {len(logs)}")
    counts = np.array([
        classify_amplitudes(lg.amplitude, th, mode=mode, one_ion_amplitude=one_ion_amplitude).sum()
        for lg in logs], dtype=np.int64)
    sites = np.array([lg.site_index for lg in logs], dtype=np.int64)
    if preset is None:
        preset = getattr(logs[0], "preset", None)
    values, occ = np.unique(counts, return_counts=True)
    if len(values) < 3:
        mean, sigma, method = float(counts.mean()), float(counts.std()), "moments"
    else:
        mean, sigma = _fit_integer_gaussian(values.astype(float), occ.astype(float))
        method = "gaussian"
    return SiteReconstruction(sites, counts, mean, sigma, method, preset, values, occ)
