"""Why count ions instead of timing the beam?

A timed dose of 30 ions has a Poisson spread of 1/sqrt(30), about 18 %.
Counting detector pulses removes most of that spread, at the price of a few
detector errors.  This script builds the amplitude spectrum of a detector
with the default settings, fits it, and prints the resulting error budget
for live (threshold) counting and for offline re-classification of the
recorded pulses.

    python demos/counting_budget.py
"""

import numpy as np

from counted_implant.beamline import BeamConfig, DetectorConfig, calibration_curve
from counted_implant.controller import ImplantPlan, expected_overimplant, implant_arrays
from counted_implant.pipeline import format_table1
from counted_implant.pulsefit import (Thresholds, build_histogram, estimate_lambda, fit_mixture,
                                      in_situ_budget, post_budget, timed_error)

det = DetectorConfig()
print(f"one ion gives {det.per_ion_amplitude * 1e3:.1f} mV after shaping")

# pulse height is linear in the number of ions per pulse
ions, mean_v, sd_v = calibration_curve(det, np.random.default_rng(0), ions=range(6),
                                       n_pulses=2000)
slope = np.polyfit(ions, mean_v, 1)[0]
print(f"calibration slope {slope:.4f} V/ion, widths {np.round(sd_v, 3)}")

# Two arrays of 160 sites with a slowly rising beam current.
plan = ImplantPlan()
logs = implant_arrays(plan, BeamConfig(0.1, 4.9e-6), det, master_seed=7, n_arrays=2)
amps = np.concatenate([lg.amplitude for lg in logs])
print(f"{amps.size} pulses recorded for {len(logs)} sites")

hist = build_histogram(amps, 0.02)
fit = fit_mixture(hist, 3, model="ladder")
lam = estimate_lambda(fit)
print(f"peak means {np.round(fit.means, 3)} V, widths {np.round(fit.widths, 3)} V")
print(f"ions per pulse from the peak areas: {lam:.4f}\n")

th = Thresholds()
ins, post = in_situ_budget(fit, th), post_budget(fit, th)
print(format_table1({"timed": timed_error(plan.preset), "in_situ": ins, "post": post}))

# Live counting over-implants: missed ions are replaced and multiples
# count once.  The estimate below is first order in the two rates.
true_mean = np.mean([lg.implanted_true for lg in logs])
print(f"expected over-implant {expected_overimplant(ins.fn_rate, ins.mult_rate):.1%}, "
      f"simulated {true_mean / plan.preset - 1:.1%}")
