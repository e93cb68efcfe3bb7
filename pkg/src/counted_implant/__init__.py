"""Simulation and analysis of counted single-ion implantation.

Modules
-------
beamline
    Poisson ion pulses and the detector amplitude chain.
controller
    In-situ counting loop with a single channel analyzer.
pulsefit
    Amplitude-histogram mixture fits, error budgets, per-site reconstruction.
activation
    Emitter activation, PL maps, spot fits and conversion yield.
correlation
    Three-level photon statistics, HBT correlator and g2 fits.
pipeline, cli
    Stage runner and command-line entry point.
"""

__version__ = "0.1.0"
