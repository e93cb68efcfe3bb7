"""Emitter activation, confocal PL maps and conversion-yield estimation.

Each implanted ion independently becomes an optically active emitter with
probability ``yield_p``.  Emitters appear in the PL map as Gaussian spots of
peak brightness ~``kcps_per_siv``; the spot amplitude at each site is binned
into an emitter number and the site histogram is fitted with a Poisson
distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, least_squares
from scipy.stats import poisson

from .streams import as_generator

__all__ = [
    "ActivationConfig",
    "SiteEmitters",
    "PlMap",
    "SpotFit",
    "PoissonYield",
    "site_layout",
    "sample_activation",
    "synthesize_pl_map",
    "fit_spot",
    "classify_site_rate",
    "fit_poisson_yield",
    "yield_interval",
    "poisson_histogram",
]


@dataclass(frozen=True)
class ActivationConfig:
    yield_p: float = 0.0298
    kcps_per_siv: float = 10.7
    kcps_sigma: float = 0.2
    background_kcps: float = 0.0
    psf_sigma: float = 0.15
    jitter_sigma: float = 0.03
    pitch: float = 2.0
    pixel_um: float = 0.1
    pixel_noise_kcps: float = 0.0
    bin_kcps: float = 10.0
    spot_diameter: float = 2.0
    hbt_cutoff_kcps: float = 25.0

    def __post_init__(self):
        if not 0.0 <= self.yield_p <= 1.0:
            raise ValueError("yield_p must lie in [0, 1]")
        if self.kcps_per_siv <= 0:
            raise ValueError("kcps_per_siv must be > 0")
        if self.psf_sigma <= 0 or self.pixel_um <= 0 or self.bin_kcps <= 0:
            raise ValueError("psf_sigma, pixel_um and bin_kcps must be > 0")
        if min(self.kcps_sigma, self.background_kcps, self.jitter_sigma,
               self.pixel_noise_kcps) < 0:
            raise ValueError("noise terms and background must be >= 0")


@dataclass
class SiteEmitters:
    site_index: int
    n_ions: int
    n_siv: int
    x_um: float = 0.0
    y_um: float = 0.0
    pl_amplitude: float = float("nan")
    n_siv_est: int | None = None

    def __post_init__(self):
        if not 0 <= self.n_siv <= self.n_ions:
            raise ValueError("need 0 <= n_siv <= n_ions")


@dataclass(frozen=True)
class PlMap:
    """PL count rate (kcps) on a regular grid; ``kcps[j, i]`` at ``(x[i], y[j])``."""

    x_um: np.ndarray
    y_um: np.ndarray
    kcps: np.ndarray

    def to_rows(self):
        for j, y in enumerate(self.y_um):
            for i, x in enumerate(self.x_um):
                yield float(x), float(y), float(self.kcps[j, i])


@dataclass(frozen=True)
class SpotFit:
    amplitude: float
    x_um: float
    y_um: float
    sigma_um: float
    offset: float
    degraded: bool = False


@dataclass(frozen=True)
class PoissonYield:
    """Poisson rate per site and conversion yield with asymmetric errors."""

    lam: float
    lam_plus: float
    lam_minus: float
    mean_ions: float
    yield_: float
    yield_plus: float
    yield_minus: float
    n_sites: int
    upper_only: bool = False


def site_layout(rows: int, cols: int, pitch: float, n_arrays: int = 1,
                margin: float | None = None) -> np.ndarray:
    """``(x, y)`` positions in µm of every site, arrays stacked along y.

    Sites are numbered row-major within each array, arrays consecutively,
    matching the controller's site indices.  Consecutive arrays are
    separated by one empty row.
    """
    margin = pitch if margin is None else margin
    pos = []
    for a in range(n_arrays):
        for r in range(rows):
            for c in range(cols):
                pos.append((margin + c * pitch, margin + (a * (rows + 1) + r) * pitch))
    return np.array(pos, dtype=float)


def sample_activation(n_ions, cfg: ActivationConfig, rng):
    """Binomial number of active emitters among ``n_ions`` implanted ions."""
    n = np.asarray(n_ions)
    if np.any(n < 0):
        raise ValueError("n_ions must be >= 0")
    out = as_generator(rng).binomial(n, cfg.yield_p)
    return int(out) if np.ndim(out) == 0 else out


def synthesize_pl_map(sites, cfg: ActivationConfig, rng, *, extent=None) -> PlMap:
    """Render emitters as Gaussian spots on a background.

    Every emitter gets a peak brightness drawn from
    ``Normal(kcps_per_siv, kcps_sigma)`` and a placement offset of
    ``jitter_sigma`` µm around its site.  ``extent = (width, height)``
    defaults to the site bounding box plus one pitch.
    """
    rng = as_generator(rng)
    sites = list(sites)
    if extent is None:
        xs = [s.x_um for s in sites] or [0.0]
        ys = [s.y_um for s in sites] or [0.0]
        extent = (max(xs) + cfg.pitch, max(ys) + cfg.pitch)
    px = cfg.pixel_um
    x = np.arange(0.0, extent[0] + px / 2, px)
    y = np.arange(0.0, extent[1] + px / 2, px)
    img = np.full((len(y), len(x)), float(cfg.background_kcps))
    reach = 6 * cfg.psf_sigma
    two_s2 = 2 * cfg.psf_sigma ** 2
    for s in sites:
        for _ in range(s.n_siv):
            amp = max(rng.normal(cfg.kcps_per_siv, cfg.kcps_sigma), 0.0)
            ex = s.x_um + cfg.jitter_sigma * rng.standard_normal()
            ey = s.y_um + cfg.jitter_sigma * rng.standard_normal()
            i0, i1 = np.searchsorted(x, [ex - reach, ex + reach])
            j0, j1 = np.searchsorted(y, [ey - reach, ey + reach])
            gx = np.exp(-(x[i0:i1] - ex) ** 2 / two_s2)
            gy = np.exp(-(y[j0:j1] - ey) ** 2 / two_s2)
            img[j0:j1, i0:i1] += amp * np.outer(gy, gx)
    if cfg.pixel_noise_kcps > 0:
        img += cfg.pixel_noise_kcps * rng.standard_normal(img.shape)
        np.clip(img, 0.0, None, out=img)
    return PlMap(x, y, img)


def fit_spot(pl: PlMap, center, diameter: float = 2.0, *, psf_guess: float = 0.15) -> SpotFit:
    """Fit a symmetric 2-D Gaussian plus offset inside a circular window.

    Returns the fitted peak amplitude above the offset.  A window with no
    structure gives amplitude 0; if the optimiser fails, the windowed maximum
    is returned with ``degraded=True``.
    """
    cx, cy = center
    r = diameter / 2
    i0, i1 = np.searchsorted(pl.x_um, [cx - r, cx + r], side="left")
    j0, j1 = np.searchsorted(pl.y_um, [cy - r, cy + r], side="left")
    if i0 >= i1 or j0 >= j1:
        raise ValueError("spot window lies outside the map")
    xx, yy = np.meshgrid(pl.x_um[i0:i1], pl.y_um[j0:j1])
    zz = pl.kcps[j0:j1, i0:i1]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    xw, yw, zw = xx[inside], yy[inside], zz[inside]
    if zw.size == 0:
        raise ValueError("spot window contains no pixels")
    zmin, zmax = float(zw.min()), float(zw.max())
    if zmax - zmin <= 1e-9 * max(1.0, abs(zmax)):
        return SpotFit(0.0, cx, cy, psf_guess, zmin)

    k = int(np.argmax(zw))
    p0 = [zmax - zmin, xw[k], yw[k], psf_guess, zmin]

    def resid(p):
        a, x0, y0, s, off = p
        return a * np.exp(-((xw - x0) ** 2 + (yw - y0) ** 2) / (2 * s * s)) + off - zw

    lo = [0.0, cx - r, cy - r, 0.01, -np.inf]
    hi = [np.inf, cx + r, cy + r, 2 * diameter, np.inf]
    try:
        res = least_squares(resid, p0, bounds=(lo, hi), x_scale="jac")
        ok = res.status > 0
    except (ValueError, np.linalg.LinAlgError):
        ok = False
    if not ok:
        return SpotFit(zmax - zmin, xw[k], yw[k], psf_guess, zmin, degraded=True)
    a, x0, y0, s, off = res.x
    return SpotFit(float(a), float(x0), float(y0), float(s), float(off))


def classify_site_rate(amplitude, cfg: ActivationConfig):
    """Emitter number from bins centred on multiples of ``cfg.bin_kcps``.

    With the default 10 kcps spacing the bins are 0±5, 10±5, 20±5, ...
    """
    a = np.asarray(amplitude, dtype=float)
    if np.any(a < 0):
        raise ValueError("amplitude must be >= 0")
    n = np.floor(a / cfg.bin_kcps + 0.5).astype(np.int64)
    return int(n) if n.ndim == 0 else n


def poisson_histogram(counts):
    """Observed emitter-number histogram and the fitted Poisson expectation."""
    counts = np.asarray(counts, dtype=np.int64)
    k = np.arange(counts.max() + 2 if counts.size else 1)
    occ = np.bincount(counts, minlength=len(k))[:len(k)]
    lam = counts.mean() if counts.size else 0.0
    return k, occ, counts.size * poisson.pmf(k, lam)


def _profile_bounds(total: int, n: int, lam: float, delta: float):
    """Rates where the Poisson log-likelihood has dropped by ``delta``."""

    def drop(x):
        ll = -n * x + (total * math.log(x) if total else 0.0)
        ll_hat = -n * lam + (total * math.log(lam) if total else 0.0)
        return ll_hat - ll - delta

    if total == 0:
        return 0.0, delta / n
    step = math.sqrt(lam / n)
    lo_edge = lam
    while lo_edge > 0 and drop(lo_edge) < 0:
        lo_edge = max(lo_edge - step, lam * 1e-12)
        if lo_edge == lam * 1e-12:
            break
    hi_edge = lam
    while drop(hi_edge) < 0:
        hi_edge += step
    lower = brentq(drop, lo_edge, lam) if drop(lo_edge) > 0 else 0.0
    upper = brentq(drop, lam, hi_edge)
    return lower, upper


def yield_interval(lam: float, lam_plus: float, lam_minus: float, mean_ions: float,
                   ion_plus: float = 0.0, ion_minus: float = 0.0):
    """Yield ``lam / mean_ions`` with asymmetric errors.

    ``ion_plus``/``ion_minus`` are relative errors on the ion number (the
    true number may be ``ion_plus`` higher or ``ion_minus`` lower than the
    counted one).  More ions than counted lowers the yield, so ``ion_plus``
    enters the minus side.  Relative errors add in quadrature.
    """
    if mean_ions <= 0:
        raise ValueError("mean_ions must be > 0")
    y = lam / mean_ions
    if lam > 0:
        rel_p = math.hypot(lam_plus / lam, ion_minus)
        rel_m = math.hypot(lam_minus / lam, ion_plus)
        return y, y * rel_p, y * rel_m
    return y, lam_plus / mean_ions, 0.0


def fit_poisson_yield(counts, mean_ions: float, *, ion_error=(0.0, 0.0),
                      delta_loglik: float = 0.5, min_sites: int = 100) -> PoissonYield:
    """Maximum-likelihood Poisson rate of emitters per site, and the yield.

    The rate's errors come from the profile likelihood (a drop of
    ``delta_loglik``; 0.5 gives one-sigma bounds).  ``ion_error`` is
    ``(plus, minus)`` relative error on the ion number per site, propagated
    into the yield.  All-zero data give a one-sided upper bound.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.size
    if n < min_sites:
        raise ValueError(f"need at least {min_sites} sites, got {n}")
    if np.any(counts < 0):
        raise ValueError("emitter counts must be >= 0")
    total = int(counts.sum())
    lam = total / n
    lower, upper = _profile_bounds(total, n, lam, delta_loglik)
    y, yp, ym = yield_interval(lam, upper - lam, lam - lower, mean_ions, *ion_error)
    return PoissonYield(lam, upper - lam, lam - lower, float(mean_ions), y, yp, ym, n,
                        upper_only=(total == 0))
