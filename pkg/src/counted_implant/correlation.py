"""Photon statistics of few-emitter sites.

Emitters are modelled as three-level systems (ground, excited, shelving
state).  The module simulates detector timestamps of a Hanbury-Brown-Twiss
setup, builds the normalised coincidence histogram, fits the three-level
g2 function and classifies sites as single-photon emitters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares

from .streams import as_generator

__all__ = [
    "G2ModelParams",
    "BackgroundRatio",
    "EmitterDynamics",
    "CoincidenceHistogram",
    "G2Fit",
    "G2FitError",
    "g2_model",
    "background_correct",
    "background_ratio",
    "simulate_photon_streams",
    "coincidence_histogram",
    "fit_g2",
    "classify_spe",
    "nv_separation",
    "nearest_neighbour_distance",
]


@dataclass(frozen=True)
class G2ModelParams:
    """Parameters of the three-level g2 function.

    ``n_emitters`` may be ``inf`` (no antibunching).  ``t1`` and ``t2`` are
    in ns.
    """

    n_emitters: float = 1.0
    a: float = 0.0
    t1: float = 2.33
    t2: float = 6.23

    def __post_init__(self):
        if not self.n_emitters >= 1:
            raise ValueError("n_emitters must be >= 1")
        if self.a < 0:
            raise ValueError("a must be >= 0")
        if not (self.t1 > 0 and self.t2 > 0):
            raise ValueError("t1 and t2 must be > 0")

    @property
    def g2_zero(self) -> float:
        return 1.0 - 1.0 / self.n_emitters


@dataclass(frozen=True)
class BackgroundRatio:
    """Emitter (``E``) and background (``B``) count rates in kcps."""

    E: float
    B: float

    def __post_init__(self):
        if not 0 <= self.B <= self.E or self.E <= 0:
            raise ValueError("need 0 <= B <= E and E > 0")

    @property
    def rho(self) -> float:
        return (self.E - self.B) / self.E


def background_ratio(E: float, B: float) -> float:
    """Single-photon fraction of the total count rate."""
    return BackgroundRatio(E, B).rho


@dataclass(frozen=True)
class EmitterDynamics:
    """Rates (1/ns) of the three-level jump process and the detection efficiency.

    The defaults put the decay constants of g2 at 2.33 ns and 6.23 ns and
    the collection efficiency so that one emitter is detected at ~10.7 kcps.
    """

    k_ex: float = 0.149
    k_r: float = 0.25
    k_isc: float = 0.06
    k_d: float = 0.1305
    collection: float = 1.513e-4

    def __post_init__(self):
        if min(self.k_ex, self.k_r, self.k_isc, self.k_d) < 0:
            raise ValueError("rates must be >= 0")
        if not 0.0 <= self.collection <= 1.0:
            raise ValueError("collection must lie in [0, 1]")

    def generator(self) -> np.ndarray:
        """Rate matrix ``Q`` (rows sum to zero) over (ground, excited, shelf)."""
        kx, kr, ki, kd = self.k_ex, self.k_r, self.k_isc, self.k_d
        return np.array([[-kx, kx, 0.0],
                         [kr, -(kr + ki), ki],
                         [kd, 0.0, -kd]])

    def populations(self) -> np.ndarray:
        """Steady-state occupation of (ground, excited, shelf)."""
        kx, kr, ki, kd = self.k_ex, self.k_r, self.k_isc, self.k_d
        w = np.array([kd * (kr + ki), kd * kx, kx * ki])
        s = w.sum()
        if s == 0:
            return np.array([1.0, 0.0, 0.0])
        return w / s

    def emission_rate(self) -> float:
        """Photons emitted per ns in steady state."""
        return float(self.k_r * self.populations()[1])

    def detected_kcps(self) -> float:
        return self.emission_rate() * self.collection * 1e6

    def g2_exact(self, t) -> np.ndarray:
        """Exact single-emitter g2 from the master equation.

        After a detection the emitter is in the ground state; g2 is the
        excited population at lag ``|t|`` over its steady-state value.
        """
        t = np.abs(np.atleast_1d(np.asarray(t, dtype=float)))
        q = self.generator()
        pe = self.populations()[1]
        out = np.array([expm(q * ti)[0, 1] for ti in t]) / pe
        return out

    def g2_params(self) -> G2ModelParams:
        """Closed-form (a, t1, t2) of the single-emitter g2."""
        q = self.generator()
        ev = np.sort(-np.linalg.eigvals(q).real)[1:]
        l1, l2 = ev[1], ev[0]
        # coefficient of exp(-l2 t) in P_e(t | ground) / P_e(inf)
        kx, kr, ki, kd = self.k_ex, self.k_r, self.k_isc, self.k_d
        pe = self.populations()[1]
        # P_e(t) = pe + c1 e^{-l1 t} + c2 e^{-l2 t}, with P_e(0)=0 and P_e'(0)=k_ex
        c1 = (kx - l2 * pe) / (l2 - l1)
        c2 = -pe - c1
        return G2ModelParams(1.0, c2 / pe, 1.0 / l1, 1.0 / l2)


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Lag-bin centres (ns), normalised g2 and raw coincidence counts."""

    lags_ns: np.ndarray
    g2: np.ndarray
    counts: np.ndarray
    bin_ns: float
    norm: float
    duration_ns: float
    n_a: int
    n_b: int

    @property
    def g2_err(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.counts, 1.0)) / self.norm


class G2FitError(RuntimeError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class G2Fit:
    params: G2ModelParams
    stderr: dict
    g2_zero: float
    g2_zero_err: float
    chi2_red: float
    no_antibunching: bool
    rho: float = 1.0
    extra: dict = field(default_factory=dict)


def g2_model(t, p: G2ModelParams):
    """Three-level g2 of ``N`` identical independent emitters."""
    at = np.abs(np.asarray(t, dtype=float))
    inv_n = 1.0 / p.n_emitters
    e1, e2 = np.exp(-at / p.t1), np.exp(-at / p.t2)
    # grouped so that t = 0 gives exactly zero
    shape = (1.0 - e1) - p.a * (e1 - e2)
    out = 1.0 - inv_n + inv_n * shape
    return float(out) if out.ndim == 0 else out


def background_correct(g_exp, rho: float):
    """Remove uncorrelated background from a measured g2."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    r2 = rho * rho
    return (np.asarray(g_exp, dtype=float) - 1.0 + r2) / r2


def _emitter_times(dyn: EmitterDynamics, duration_ns: float, rng) -> np.ndarray:
    # excitation attempts are i.i.d.; emissions are the radiative ones
    k_out = dyn.k_r + dyn.k_isc
    if dyn.k_ex == 0 or dyn.k_r == 0:
        return np.empty(0)
    p_isc = dyn.k_isc / k_out
    mean_attempt = 1 / dyn.k_ex + 1 / k_out + (p_isc / dyn.k_d if dyn.k_d > 0 else 0.0)
    if dyn.k_d == 0 and dyn.k_isc > 0:
        mean_attempt = math.inf
    out = []
    t0 = 0.0
    while t0 < duration_ns:
        n = int(min(max((duration_ns - t0) / min(mean_attempt, duration_ns) * 1.05, 1) + 64, 2_000_000))
        dt = rng.exponential(1 / dyn.k_ex, n) + rng.exponential(1 / k_out, n)
        isc = rng.random(n) < p_isc
        if dyn.k_isc > 0:
            shelf = rng.exponential(1 / dyn.k_d, n) if dyn.k_d > 0 else np.full(n, np.inf)
            dt = dt + np.where(isc, shelf, 0.0)
        t = t0 + np.cumsum(dt)
        out.append(t[~isc])
        t0 = t[-1]
    times = np.concatenate(out)
    return times[times < duration_ns]


def simulate_photon_streams(n_emitters: int, dyn: EmitterDynamics, background_kcps: float,
                            duration_s: float, rng):
    """Detector timestamps (ns) of an HBT measurement.

    Each emitter is an independent three-level jump process starting in the
    ground state; emissions are detected with ``dyn.collection`` and sent to
    either detector with equal probability.  Background is a homogeneous
    Poisson stream of ``background_kcps`` split the same way.

    Returns ``(t_a, t_b)``, sorted float arrays in ns.
    """
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    if n_emitters < 0 or background_kcps < 0:
        raise ValueError("n_emitters and background must be >= 0")
    rng = as_generator(rng)
    dur_ns = duration_s * 1e9
    parts = []
    for _ in range(int(n_emitters)):
        t = _emitter_times(dyn, dur_ns, rng)
        parts.append(t[rng.random(t.size) < dyn.collection])
    n_bg = rng.poisson(background_kcps * 1e3 * duration_s)
    parts.append(rng.uniform(0.0, dur_ns, n_bg))
    t = np.sort(np.concatenate(parts))
    to_a = rng.random(t.size) < 0.5
    return t[to_a], t[~to_a]


def coincidence_histogram(ts_a, ts_b, bin_ns: float = 0.5, window_ns: float = 50.0,
                          duration_ns: float | None = None) -> CoincidenceHistogram:
    """Histogram of lags ``t_b - t_a`` within ``±window_ns``.

    Bins are centred on multiples of ``bin_ns`` (one bin centred on zero).
    Counts are normalised by ``rate_a * rate_b * bin * duration`` so that
    uncorrelated light gives 1.  ``duration_ns`` defaults to the span of
    both streams.
    """
    if bin_ns <= 0 or window_ns < bin_ns:
        raise ValueError("need bin_ns > 0 and window_ns >= bin_ns")
    a = np.sort(np.asarray(ts_a, dtype=float))
    b = np.sort(np.asarray(ts_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both timestamp streams must be non-empty")
    if duration_ns is None:
        duration_ns = max(a[-1], b[-1]) - min(a[0], b[0])
    if duration_ns <= 0:
        raise ValueError("duration must be > 0")

    n_half = int(round(window_ns / bin_ns))
    lo_edge = -(n_half + 0.5) * bin_ns
    hi_edge = (n_half + 0.5) * bin_ns
    counts = np.zeros(2 * n_half + 1, dtype=np.int64)
    # process in chunks to bound memory
    chunk = 1 << 18
    for s in range(0, a.size, chunk):
        aa = a[s:s + chunk]
        lo = np.searchsorted(b, aa + lo_edge, side="left")
        hi = np.searchsorted(b, aa + hi_edge, side="left")
        m = hi - lo
        if m.sum() == 0:
            continue
        idx = np.repeat(lo - np.cumsum(np.r_[0, m[:-1]]), m) + np.arange(m.sum())
        lags = b[idx] - np.repeat(aa, m)
        k = np.floor((lags - lo_edge) / bin_ns).astype(np.int64)
        k = k[(k >= 0) & (k < counts.size)]
        counts += np.bincount(k, minlength=counts.size)
    rate_a = a.size / duration_ns
    rate_b = b.size / duration_ns
    norm = rate_a * rate_b * bin_ns * duration_ns
    lags = np.arange(-n_half, n_half + 1) * bin_ns
    return CoincidenceHistogram(lags, counts / norm, counts, float(bin_ns), float(norm),
                                float(duration_ns), int(a.size), int(b.size))


def _binned_model(lags, bin_ns, inv_n, a, t1, t2, sub=9):
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    t = np.abs(lags[:, None] + offs[None, :] * bin_ns)
    shape = 1.0 - (1.0 + a) * np.exp(-t / t1) + a * np.exp(-t / t2)
    return (1.0 - inv_n + inv_n * shape).mean(axis=1)


def fit_g2(hist: CoincidenceHistogram, rho: float = 1.0, *, p0=None,
           antibunching_sigma: float = 3.0) -> G2Fit:
    """Background-correct a histogram and fit the three-level g2.

    The fit parameter is ``1/N`` (bounded to [0, 1]) so that a flat
    histogram converges to ``N = inf``.  The model is averaged over each
    bin.  When ``1/N`` is not ``antibunching_sigma`` standard errors above
    zero the result is flagged ``no_antibunching``.

    Raises
    ------
    G2FitError
        If the optimiser does not converge.
    """
    g = background_correct(hist.g2, rho)
    err = hist.g2_err / (rho * rho)
    lags = hist.lags_ns

    def resid(p):
        return (_binned_model(lags, hist.bin_ns, *p) - g) / err

    if p0 is None:
        p0 = [float(np.clip(1.0 - g[np.argmin(np.abs(lags))], 0.05, 1.0)), 0.3, 2.0, 8.0]
    lo = [0.0, 0.0, 0.05, 0.05]
    hi = [1.0, 20.0, 200.0, 1000.0]
    p0 = np.clip(p0, np.add(lo, 1e-6), np.subtract(hi, 1e-6))
    res = least_squares(resid, p0, bounds=(lo, hi), x_scale="jac", max_nfev=2000)
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise G2FitError(f"g2 fit did not converge: {res.message}", last=res.x)
    inv_n, a, t1, t2 = (float(v) for v in res.x)
    dof = max(g.size - 4, 1)
    chi2 = float(np.sum(res.fun ** 2)) / dof
    try:
        cov = np.linalg.pinv(res.jac.T @ res.jac) * max(chi2, 1.0)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(4, np.nan)
    no_ab = not inv_n > antibunching_sigma * se[0]
    n = math.inf if inv_n <= 0 else 1.0 / inv_n
    params = G2ModelParams(max(n, 1.0), a, t1, t2)
    stderr = {"inv_n": float(se[0]), "a": float(se[1]), "t1": float(se[2]), "t2": float(se[3])}
    return G2Fit(params, stderr, 1.0 - inv_n, float(se[0]), chi2, no_ab, float(rho))


def classify_spe(fit) -> str:
    """Label a site from its fitted ``g2(0)``.

    ``single`` below 0.5, ``multi`` for 0.5-0.7 (read as two emitters),
    ``non_classical_only`` above 0.7 but still below 1, ``classical`` at 1.
    Accepts a :class:`G2Fit`, :class:`G2ModelParams` or a plain number.
    """
    if isinstance(fit, G2Fit):
        g0 = fit.g2_zero
    elif isinstance(fit, G2ModelParams):
        g0 = fit.g2_zero
    else:
        g0 = float(fit)
    if g0 < 0.5:
        return "single"
    if g0 <= 0.7:
        return "multi"
    if g0 < 1.0:
        return "non_classical_only"
    return "classical"


def nv_separation(n_ppb, conv_yield, carbon_density_cm3: float = 1.76e23):
    """Mean NV spacing (nm) from nitrogen content and conversion yield."""
    n_ppb = np.asarray(n_ppb, dtype=float)
    conv_yield = np.asarray(conv_yield, dtype=float)
    if np.any(n_ppb < 0) or np.any(conv_yield < 0) or carbon_density_cm3 <= 0:
        raise ValueError("inputs must be non-negative")
    density = n_ppb * 1e-9 * carbon_density_cm3 * conv_yield
    if np.any(density <= 0):
        raise ValueError("NV density is zero")
    sep = density ** (-1.0 / 3.0) * 1e7
    return float(sep) if sep.ndim == 0 else sep


def nearest_neighbour_distance(density_cm3: float, rng, size=None):
    """Distance (nm) to the nearest point of a 3-D Poisson process."""
    if density_cm3 <= 0:
        raise ValueError("density must be > 0")
    u = as_generator(rng).random(size)
    r_cm = (-np.log1p(-u) * 3.0 / (4.0 * math.pi * density_cm3)) ** (1.0 / 3.0)
    return r_cm * 1e7
