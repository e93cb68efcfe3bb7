"""From implanted ions to optically active emitters.

Only a few percent of the implanted ions become active emitters.  The
number per site is therefore close to Poisson.  This script renders a
photoluminescence map of two implanted arrays, fits a spot at every site,
turns the brightness into an emitter number and fits the Poisson rate.
Dividing by the ions per site gives the conversion yield.

    python demos/emitter_yield.py
"""

import numpy as np

from counted_implant.activation import (SiteEmitters, classify_site_rate, fit_poisson_yield,
                                        fit_spot, poisson_histogram, sample_activation,
                                        site_layout, synthesize_pl_map)
from counted_implant.config import RunConfig
from counted_implant.controller import implant_arrays
from counted_implant.pulsefit import reconstruct_sites
from counted_implant.streams import child_rng

cfg = RunConfig()
act = cfg.activation
seed = 21
logs = implant_arrays(cfg.plan, cfg.beam, cfg.detector, seed, n_arrays=2)
rec = reconstruct_sites(logs, cfg.thresholds, preset=cfg.plan.preset)

xy = site_layout(cfg.plan.rows, cfg.plan.cols, cfg.plan.pitch, n_arrays=2)
sites = []
for i, (lg, (x, y)) in enumerate(zip(logs, xy)):
    k = sample_activation(lg.implanted_true, act, child_rng(seed, "activation", i))
    sites.append(SiteEmitters(i, lg.implanted_true, k, float(x), float(y)))
pl = synthesize_pl_map(sites, act, child_rng(seed, "plmap"))
print(f"PL map {pl.kcps.shape[1]} x {pl.kcps.shape[0]} pixels, peak {pl.kcps.max():.1f} kcps")

amp = np.array([max(fit_spot(pl, (s.x_um, s.y_um), act.spot_diameter).amplitude, 0.0)
                for s in sites])
est = classify_site_rate(amp, act)
truth = np.array([s.n_siv for s in sites])
print(f"emitter number correct at {np.mean(est == truth):.1%} of sites")

k, occ, expected = poisson_histogram(est)
print("emitters  sites  poisson")
for row in zip(k, occ, expected):
    print("{:8d} {:6d} {:8.1f}".format(*row))

fit = fit_poisson_yield(est, rec.mean)
print(f"\nemitters per site {fit.lam:.3f} +{fit.lam_plus:.3f}/-{fit.lam_minus:.3f}")
print(f"yield {fit.yield_:.2%} +{fit.yield_plus:.2%}/-{fit.yield_minus:.2%} "
      f"at {rec.mean:.1f} ions per site (true yield {act.yield_p:.2%})")
