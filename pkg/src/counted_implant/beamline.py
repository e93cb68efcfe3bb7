"""Ion beam and detector signal chain.

A pulsed focused ion beam delivers a Poisson number of ions per pulse, with
a mean that may drift linearly over a run.  Each ion generates electron-hole
pairs in the diamond, a fraction ``cce`` of which induces charge on the probe
pads; the charge-sensitive preamplifier converts each collected pair into
``volts_per_pair`` and the spectroscopy amplifier multiplies by
``shaper_gain``.  Amplitudes are Gaussian around ``k * A1`` with a width that
grows with the number of ions in the pulse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .streams import as_generator

__all__ = [
    "BeamConfig",
    "DetectorConfig",
    "IbicMap",
    "lambda_at",
    "sample_pulse",
    "sample_pulses",
    "run_mean_lambda",
    "drift_for_run_mean",
    "amplitude_for_ions",
    "calibration_curve",
    "simulate_ibic",
    "preamp_trace",
    "fit_step_height",
]


@dataclass(frozen=True)
class BeamConfig:
    """Pulsed beam settings.

    ``lambda0`` is the mean number of ions per pulse at the start of the run;
    ``drift_rate`` is the fractional change of that mean per pulse.
    """

    lambda0: float = 0.1
    drift_rate: float = 0.0
    pulse_length: float = 225e-9

    def __post_init__(self):
        if not self.lambda0 >= 0:
            raise ValueError(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.pulse_length <= 0:
            raise ValueError("pulse_length must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    """Charge generation and amplifier chain.

    Widths (V) of the ``k``-ion amplitude peak combine electronic noise,
    per-ion charge fluctuation and a pile-up term for each pair of ions
    arriving in the same pulse::

        sigma_k**2 = noise_sigma0**2 + k * noise_sigma_ion**2
                     + k*(k-1)/2 * noise_sigma_pileup**2
    """

    pairs_direct: float = 6.8e3
    pairs_recoil: float = 4.9e3
    cce: float = 0.83
    volts_per_pair: float = 0.64e-6
    shaper_gain: float = 189.0
    noise_sigma0: float = 0.194
    noise_sigma_ion: float = 0.21
    noise_sigma_pileup: float = 0.65

    def __post_init__(self):
        for name in ("pairs_direct", "pairs_recoil", "volts_per_pair", "shaper_gain",
                     "noise_sigma0", "noise_sigma_ion", "noise_sigma_pileup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.cce <= 1.0:
            raise ValueError(f"cce must lie in [0, 1], got {self.cce}")

    @property
    def pairs_per_ion(self) -> float:
        return self.pairs_direct + self.pairs_recoil

    @property
    def step_height(self) -> float:
        """Preamplifier step per ion, before the shaper (V)."""
        return self.pairs_per_ion * self.cce * self.volts_per_pair

    @property
    def per_ion_amplitude(self) -> float:
        """Mean spectroscopy-amplifier amplitude of a one-ion pulse (V)."""
        return self.step_height * self.shaper_gain

    def width(self, k):
        k = np.asarray(k, dtype=float)
        var = (self.noise_sigma0 ** 2 + k * self.noise_sigma_ion ** 2
               + 0.5 * k * (k - 1) * self.noise_sigma_pileup ** 2)
        return np.sqrt(var)


@dataclass(frozen=True)
class IbicMap:
    """Charge-collection efficiency measured over a scanned area.

    ``cce`` has shape ``(len(y_um), len(x_um))``.  ``profile`` is the
    noise-free efficiency used to generate the map and ``plateau`` marks the
    cells deep inside the active region.
    """

    x_um: np.ndarray
    y_um: np.ndarray
    cce: np.ndarray
    profile: np.ndarray
    plateau: np.ndarray
    active_um: tuple[float, float]
    edge_um: float

    def to_rows(self):
        """Yield ``(x_um, y_um, cce)`` rows in row-major order."""
        for j, y in enumerate(self.y_um):
            for i, x in enumerate(self.x_um):
                yield float(x), float(y), float(self.cce[j, i])


def lambda_at(beam: BeamConfig, pulse_index) -> np.ndarray | float:
    """Mean ions per pulse at ``pulse_index``; clamped at zero."""
    t = np.asarray(pulse_index, dtype=float)
    lam = np.maximum(beam.lambda0 * (1.0 + beam.drift_rate * t), 0.0)
    return float(lam) if lam.ndim == 0 else lam


def sample_pulse(beam: BeamConfig, pulse_index: int, rng) -> int:
    """Number of ions in one pulse."""
    if pulse_index < 0:
        raise ValueError("pulse_index must be >= 0")
    return int(as_generator(rng).poisson(lambda_at(beam, pulse_index)))


def sample_pulses(beam: BeamConfig, start: int, n: int, rng) -> np.ndarray:
    """Ion counts for pulses ``start .. start+n-1``."""
    if start < 0 or n < 0:
        raise ValueError("start and n must be >= 0")
    lam = lambda_at(beam, np.arange(start, start + n))
    return as_generator(rng).poisson(lam)


def run_mean_lambda(beam: BeamConfig, n_pulses: int) -> float:
    """Average of the per-pulse mean over pulses ``0 .. n_pulses-1``."""
    if n_pulses < 1:
        raise ValueError("n_pulses must be >= 1")
    last = beam.lambda0 * (1.0 + beam.drift_rate * (n_pulses - 1))
    if last >= 0:
        # the ramp never reaches the clamp: closed form
        return beam.lambda0 * (1.0 + beam.drift_rate * (n_pulses - 1) / 2.0)
    return float(np.mean(lambda_at(beam, np.arange(n_pulses))))


def drift_for_run_mean(lambda0: float, target_mean: float, n_pulses: int) -> float:
    """Linear drift rate that makes the run mean equal ``target_mean``."""
    if lambda0 <= 0 or n_pulses < 2:
        raise ValueError("need lambda0 > 0 and n_pulses >= 2")
    return 2.0 * (target_mean / lambda0 - 1.0) / (n_pulses - 1)


def amplitude_for_ions(k, det: DetectorConfig, rng):
    """Spectroscopy-amplifier amplitude (V) for pulses carrying ``k`` ions.

    ``k`` may be a scalar or an array; the result has the same shape.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 0):
        raise ValueError("ion count must be >= 0")
    rng = as_generator(rng)
    mean = k_arr * det.per_ion_amplitude
    amp = mean + det.width(k_arr) * rng.standard_normal(k_arr.shape)
    return float(amp) if amp.ndim == 0 else amp


def calibration_curve(det: DetectorConfig, rng, ions=range(10), n_pulses: int = 10_000):
    """Mean and standard deviation of amplitudes for each ion number.

    Returns ``(k, mean, std)`` arrays.
    """
    rng = as_generator(rng)
    ks = np.asarray(list(ions))
    means = np.empty(len(ks))
    stds = np.empty(len(ks))
    for i, k in enumerate(ks):
        a = amplitude_for_ions(np.full(n_pulses, k), det, rng)
        means[i] = a.mean()
        stds[i] = a.std(ddof=1)
    return ks, means, stds


def _logistic(d, edge):
    if edge <= 0:
        return (d >= 0).astype(float)
    return 0.5 * (1.0 + np.tanh(0.5 * d / edge))


def simulate_ibic(det: DetectorConfig, area, mean_ions_per_pulse: float, rng,
                  *, active_um=(60.0, 24.0), edge_um: float = 1.0,
                  pixel_um: float = 1.0, pulses_per_pixel: int = 200) -> IbicMap:
    """Scan the beam over ``area = (width, height)`` µm and map the CCE.

    Each pixel receives ``pulses_per_pixel`` Poisson pulses.  The CCE estimate
    is the summed amplitude divided by the amplitude that the same ions would
    give at full collection.  The true efficiency is ``det.cce`` inside the
    ``active_um`` rectangle (centred in the area) and rolls off logistically
    over ``edge_um``.
    """
    width, height = area
    if width <= 0 or height <= 0:
        raise ValueError("area must be positive")
    rng = as_generator(rng)
    x = np.arange(pixel_um / 2, width, pixel_um)
    y = np.arange(pixel_um / 2, height, pixel_um)
    xx, yy = np.meshgrid(x, y)
    aw, ah = active_um
    dx = aw / 2 - np.abs(xx - width / 2)
    dy = ah / 2 - np.abs(yy - height / 2)
    profile = det.cce * _logistic(dx, edge_um) * _logistic(dy, edge_um)
    plateau = (dx >= 6 * edge_um) & (dy >= 6 * edge_um)

    full = det.pairs_per_ion * det.volts_per_pair * det.shaper_gain
    k = rng.poisson(mean_ions_per_pulse, size=profile.shape + (pulses_per_pixel,))
    amp = k * (full * profile)[..., None] + det.width(k) * rng.standard_normal(k.shape)
    n_ions = k.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(n_ions > 0, amp.sum(axis=-1) / (n_ions * full), 0.0)
    cce = np.clip(est, 0.0, 1.0)
    return IbicMap(x, y, cce, profile, plateau, (aw, ah), edge_um)


def preamp_trace(k: int, det: DetectorConfig, rng=None, *, noise_v: float = 2e-4,
                 tau_us: float = 50.0, arrival_us: float = 20.0,
                 duration_us: float = 200.0, dt_us: float = 0.2):
    """Charge-sensitive preamplifier output for a pulse of ``k`` ions.

    A step of ``k * det.step_height`` at ``arrival_us`` that decays with time
    constant ``tau_us``.  With ``rng=None`` the trace is noise free.
    Returns ``(t, v)`` with ``t`` in seconds.
    """
    if k < 0:
        raise ValueError("ion count must be >= 0")
    t_us = np.arange(0.0, duration_us, dt_us)
    after = t_us >= arrival_us
    v = np.where(after, k * det.step_height * np.exp(-(t_us - arrival_us) / tau_us), 0.0)
    if rng is not None and noise_v > 0:
        v = v + noise_v * as_generator(rng).standard_normal(v.shape)
    return t_us * 1e-6, v


def fit_step_height(t, v):
    """Fit baseline + decaying step to a preamplifier trace.

    The arrival time is located from the largest sample-to-sample rise; the
    baseline, step height and decay constant are then fitted by least squares.
    Returns ``(height, arrival_time, tau)`` in volts and seconds.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    i0 = int(np.argmax(np.diff(v))) + 1
    t0 = t[i0]

    def model(tt, base, height, tau):
        return base + np.where(tt >= t0, height * np.exp(-(tt - t0) / tau), 0.0)

    h0 = max(v[i0:i0 + 5].mean() - v[:i0].mean(), 1e-9)
    tau0 = (t[-1] - t0) / 4
    popt, _ = curve_fit(model, t, v, p0=[v[:i0].mean(), h0, tau0],
                        bounds=([-np.inf, 0.0, (t[1] - t[0])], [np.inf, np.inf, np.inf]))
    return float(popt[1]), float(t0), float(popt[2])
