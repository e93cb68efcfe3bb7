"""Run configuration read from an INI file.

Every section mirrors one module's configuration object::

    [run]         master_seed, n_arrays
    [beam]        BeamConfig fields
    [detector]    DetectorConfig fields
    [plan]        ImplantPlan fields
    [thresholds]  post_low, post_high (in_situ is plan.sca_threshold),
                  bin_width, mixture_model, multi_mode
    [activation]  ActivationConfig fields
    [hbt]         EmitterDynamics rates, simulation and correlator settings

Unknown sections or keys are rejected.  Omitted keys take their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .activation import ActivationConfig
from .beamline import BeamConfig, DetectorConfig
from .controller import ImplantPlan
from .pulsefit import Thresholds

__all__ = ["ConfigError", "HbtConfig", "AnalysisConfig", "RunConfig", "load_config",
           "parse_config"]


class ConfigError(ValueError):
    """The configuration file is malformed or inconsistent."""


@dataclass(frozen=True)
class HbtConfig:
    """HBT simulation and analysis settings.

    ``collection`` is the detection efficiency used when simulating photon
    streams.  Thinning does not change the normalised g2, so simulations use
    a much larger value than the real ``nominal_collection`` to obtain
    enough coincidences in a short stream; the background rate is scaled by
    the same factor so that the emitter-to-background ratio is preserved.
    """

    k_ex: float = 0.149
    k_r: float = 0.25
    k_isc: float = 0.06
    k_d: float = 0.1305
    nominal_collection: float = 1.513e-4
    collection: float = 1.0
    background_kcps: float = 0.0
    duration_s: float = 1e-3
    bin_ns: float = 0.5
    window_ns: float = 50.0
    max_sites: int = 11
    second_emitter_prob: float = 0.18
    nv_ppb: float = 1.0
    nv_yield: float = 0.10

    def __post_init__(self):
        if min(self.k_ex, self.k_r, self.k_isc, self.k_d) < 0:
            raise ValueError("rates must be >= 0")
        if not 0 < self.nominal_collection <= 1 or not 0 < self.collection <= 1:
            raise ValueError("collection efficiencies must lie in (0, 1]")
        if self.duration_s <= 0 or self.bin_ns <= 0 or self.window_ns < self.bin_ns:
            raise ValueError("need duration_s > 0, bin_ns > 0 and window_ns >= bin_ns")
        if not 0 <= self.second_emitter_prob <= 1:
            raise ValueError("second_emitter_prob must lie in [0, 1]")
        if self.max_sites < 0 or self.background_kcps < 0:
            raise ValueError("max_sites and background_kcps must be >= 0")


@dataclass(frozen=True)
class AnalysisConfig:
    bin_width: float = 0.02
    mixture_model: str = "ladder"
    multi_mode: str = "two"

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be > 0")
        if self.mixture_model not in ("free", "ladder"):
            raise ValueError("mixture_model must be 'free' or 'ladder'")
        if self.multi_mode not in ("two", "round"):
            raise ValueError("multi_mode must be 'two' or 'round'")


# The beam drifts from 0.1 to ~0.124 ions/pulse over one 160-site array.
DEFAULT_DRIFT = 4.9e-6


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 1
    n_arrays: int = 2
    beam: BeamConfig = field(default_factory=lambda: BeamConfig(drift_rate=DEFAULT_DRIFT))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    plan: ImplantPlan = field(default_factory=ImplantPlan)
    thresholds: Thresholds = field(default_factory=Thresholds)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    activation: ActivationConfig = field(default_factory=ActivationConfig)
    hbt: HbtConfig = field(default_factory=HbtConfig)

    def __post_init__(self):
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if self.n_arrays < 1:
            raise ConfigError("n_arrays must be >= 1")

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else dataclasses.replace(self, master_seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "run": {"master_seed": self.master_seed, "n_arrays": self.n_arrays},
            "beam": dataclasses.asdict(self.beam),
            "detector": dataclasses.asdict(self.detector),
            "plan": dataclasses.asdict(self.plan),
            "thresholds": {"post_low": self.thresholds.post_low,
                           "post_high": self.thresholds.post_high,
                           **dataclasses.asdict(self.analysis)},
            "activation": dataclasses.asdict(self.activation),
            "hbt": dataclasses.asdict(self.hbt),
        }

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}"
                         for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(cls, section: str, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, text in raw.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = fields[key].default
        try:
            if isinstance(default, bool):
                val = text.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                val = int(float(text)) if float(text).is_integer() else int(text)
            elif isinstance(default, float):
                val = float(text)
            else:
                val = text.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from exc
        out[key] = val
    return out


def _build(cls, section, raw, **extra):
    kwargs = _coerce(cls, section, raw)
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse and validate INI text."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"run", "beam", "detector", "plan", "thresholds", "activation", "hbt"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in known}

    run = sec["run"]
    for key in run:
        if key not in ("master_seed", "n_arrays"):
            raise ConfigError(f"[run] unknown key {key!r}")
    try:
        seed = int(run.get("master_seed", 1))
        n_arrays = int(run.get("n_arrays", 2))
    except ValueError as exc:
        raise ConfigError(f"[run] {exc}") from exc

    beam_raw = dict(sec["beam"])
    beam_raw.setdefault("drift_rate", str(DEFAULT_DRIFT))
    beam = _build(BeamConfig, "beam", beam_raw)
    det = _build(DetectorConfig, "detector", sec["detector"])
    plan = _build(ImplantPlan, "plan", sec["plan"])

    th_raw = dict(sec["thresholds"])
    an_keys = {f.name for f in dataclasses.fields(AnalysisConfig)}
    an_raw = {k: th_raw.pop(k) for k in list(th_raw) if k in an_keys}
    if "in_situ" in th_raw:
        if float(th_raw["in_situ"]) != plan.sca_threshold:
            raise ConfigError("[thresholds] in_situ must equal [plan] sca_threshold")
        del th_raw["in_situ"]
    thresholds = _build(Thresholds, "thresholds", th_raw, in_situ=plan.sca_threshold)
    analysis = _build(AnalysisConfig, "thresholds", an_raw)
    act_raw = dict(sec["activation"])
    act_raw.setdefault("pitch", repr(plan.pitch))
    activation = _build(ActivationConfig, "activation", act_raw)
    if activation.pitch != plan.pitch:
        raise ConfigError("[activation] pitch must equal [plan] pitch")
    hbt = _build(HbtConfig, "hbt", sec["hbt"])
    return RunConfig(seed, n_arrays, beam, det, plan, thresholds, analysis, activation, hbt)


def load_config(path) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
