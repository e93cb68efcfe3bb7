"""Is a bright spot a single emitter?

A single three-level emitter never emits two photons at once, so the
intensity correlation g2 dips to zero at zero delay; with N emitters the
dip only reaches 1 - 1/N.  The emitter's shelving state adds bunching
on a slower time scale.  This script simulates photon arrival times on
the two detectors of a Hanbury Brown and Twiss setup, builds the
coincidence histogram and fits it.  It then shows what uncorrelated
background does to the dip and how to remove it.  Finally it prints the
NV spacing against which single emitters must be resolved.

    python demos/photon_statistics.py
"""

from dataclasses import replace

import numpy as np

from counted_implant.correlation import (EmitterDynamics, background_ratio, classify_spe,
                                         coincidence_histogram, fit_g2, nv_separation,
                                         simulate_photon_streams)

dyn = EmitterDynamics()
p = dyn.g2_params()
print(f"rates give t1 = {p.t1:.2f} ns, t2 = {p.t2:.2f} ns, bunching a = {p.a:.3f}")
print(f"detected count rate {dyn.detected_kcps():.1f} kcps at collection {dyn.collection:g}")

# Thinning does not change g2, so simulate with every photon detected.
fast = replace(dyn, collection=1.0)
rng = np.random.default_rng(4)
for n in (1, 2, 3):
    a, b = simulate_photon_streams(n, fast, 0.0, 1e-3, rng)
    fit = fit_g2(coincidence_histogram(a, b, duration_ns=1e6))
    print(f"{n} emitter(s): g2(0) = {fit.g2_zero:.3f} +- {fit.g2_zero_err:.3f} "
          f"-> {classify_spe(fit)}")
# Two emitters sit right on the 0.5 cut, so about half of them pass as
# single; the PL brightness is what rules them out.

signal = fast.emission_rate() * 1e6
bg = signal / 3
a, b = simulate_photon_streams(1, fast, bg, 1e-3, rng)
h = coincidence_histogram(a, b, duration_ns=1e6)
rho = background_ratio(signal + bg, bg)
raw, corrected = fit_g2(h), fit_g2(h, rho)
print(f"\nwith background (rho = {rho:.2f}): raw g2(0) = {raw.g2_zero:.3f}, "
      f"corrected {corrected.g2_zero:.3f}")

print("\nmean NV spacing (nm)")
for ppb in (1.0, 0.1):
    print(f"  N {ppb:g} ppb: " + ", ".join(
        f"{nv_separation(ppb, y):.0f} at {y:.0%} conversion" for y in (0.45, 0.10)))
