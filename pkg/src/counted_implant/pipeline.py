"""Stage runner: simulation, analysis and report, persisted to one run directory.

Layout of a run directory::

    config.ini            effective configuration (seed included)
    implant/              pulses.csv, sites_truth.csv, calibration.csv, ibic.csv
    pulses/               amplitude_hist.csv, mixture_fit.json, budget.csv,
                          sites.csv, site_hist.csv, site_stats.json
    pl/                   pl_map.csv, pl_truth.csv, emitters.csv,
                          emitter_hist.csv, yield.json
    hbt/                  sites.csv, streams/site_NNNNN_{a,b}.txt (ps),
                          g2.csv, fits.csv
    report/               report.json, report.txt, table1.csv
    manifest.json

Each stage reads only files written by earlier stages, so analysis can be
repeated without re-simulating.
"""

from __future__ import annotations

import functools
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy.special import ndtr

from . import __version__
from .activation import (SiteEmitters, PlMap, classify_site_rate, fit_poisson_yield, fit_spot,
                         poisson_histogram, sample_activation, site_layout, synthesize_pl_map)
from .beamline import calibration_curve, simulate_ibic
from .config import ConfigError, RunConfig, load_config
from .controller import SiteLog, implant_arrays
from .correlation import (EmitterDynamics, background_correct, classify_spe,
                          coincidence_histogram, fit_g2, g2_model, nearest_neighbour_distance,
                          nv_separation, simulate_photon_streams)
from .io import (atomic_write_text, read_csv_columns, read_json, read_timestamps, sha256_file,
                 write_csv, write_json, write_timestamps)
from .pulsefit import (ErrorBudget, build_histogram, estimate_lambda, fit_mixture, in_situ_budget,
                       post_budget, reconstruct_sites, timed_error)
from .streams import child_rng

__all__ = [
    "StageError",
    "Report",
    "STAGES",
    "emit_table1",
    "table1_values",
    "load_run_config",
    "simulate_implant",
    "analyze_pulses",
    "simulate_pl",
    "analyze_pl",
    "simulate_hbt",
    "analyze_hbt",
    "build_report",
    "run_pipeline",
    "write_manifest",
]

# (N ppb, conversion yield) pairs of the NV spacing table
NV_ASSUMPTIONS = ((1.0, 0.45), (0.1, 0.45), (1.0, 0.10), (0.1, 0.10))


class StageError(RuntimeError):
    """A stage failed inside one of the library modules."""

    def __init__(self, stage: str, module: str, exc: BaseException):
        super().__init__(f"{module}: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.module = module
        self.original = exc


def _stage(name: str, module: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(cfg: RunConfig, out, *args, **kwargs):
            out = Path(out)
            try:
                result = fn(cfg, out, *args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(name, module, exc) from exc
            write_manifest(cfg, out)
            return result
        wrapper.stage_name = name
        return wrapper
    return deco


# -- error table -------------------------------------------------------------

def table1_values(budgets) -> dict:
    """Signed percentages per row and column.

    ``budgets`` maps ``"timed"`` to the relative timed error and
    ``"in_situ"``/``"post"`` to :class:`ErrorBudget` objects.  Rows that do
    not apply are ``None``.
    """
    timed = float(budgets["timed"])
    ins: ErrorBudget = budgets["in_situ"]
    post: ErrorBudget = budgets["post"]
    pct = 100.0
    return {
        "False Negative": (None, pct * ins.fn_rate, pct * post.fn_rate),
        "False Positive": (None, -pct * ins.fp_rate, -pct * post.fp_rate),
        "Multiples": (None, pct * ins.mult_rate, pct * post.mult_rate),
        "Single as Double": (None, None, -pct * post.single_as_double_rate),
        "Total": ((pct * timed, -pct * timed),
                  (pct * ins.total_plus, -pct * ins.total_minus),
                  (pct * post.total_plus, -pct * post.total_minus)),
    }


def _cell(v, digits):
    if v is None:
        return "-"
    if isinstance(v, tuple):
        return f"{v[0]:+.{digits}f}/{v[1]:+.{digits}f}"
    return f"{v:+.{digits}f}"


def emit_table1(budgets, *, digits: int = 4) -> str:
    """Error table as CSV text (percent, positive where ions go uncounted)."""
    lines = ["row,timed_pct,in_situ_pct,post_pct"]
    for row, cols in table1_values(budgets).items():
        lines.append(",".join([row] + [_cell(c, digits) for c in cols]))
    return "\n".join(lines) + "\n"


def format_table1(budgets, *, digits: int = 2) -> str:
    vals = table1_values(budgets)
    head = f"{'Implant':<18}{'Timed':>18}{'In-Situ':>18}{'Post-analysis':>18}"
    out = [head, "-" * len(head)]
    for row, cols in vals.items():
        out.append(f"{row:<18}" + "".join(f"{_cell(c, digits):>18}" for c in cols))
    return "\n".join(out) + "\n"


# -- helpers -----------------------------------------------------------------

def load_run_config(out, config_path=None, seed=None) -> RunConfig:
    """Explicit config file, else the run directory's ``config.ini``, else defaults."""
    if config_path is not None:
        cfg = load_config(config_path)
    elif (Path(out) / "config.ini").exists():
        cfg = load_config(Path(out) / "config.ini")
    else:
        cfg = RunConfig()
    try:
        return cfg.with_seed(seed)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_site_logs(path, preset) -> list[SiteLog]:
    c = read_csv_columns(path, {"site_index": np.int64, "array_index": np.int64,
                                "pulse_index": np.int64, "true_ions": np.int64,
                                "sca_fired": np.int64})
    sites = c["site_index"]
    if sites.size == 0:
        return []
    order = np.argsort(sites, kind="stable")
    bounds = np.flatnonzero(np.diff(sites[order])) + 1
    logs = []
    for idx in np.split(order, bounds):
        logs.append(SiteLog(int(sites[idx[0]]), preset, c["pulse_index"][idx],
                            c["true_ions"][idx], c["amplitude"][idx],
                            c["sca_fired"][idx].astype(bool), int(c["array_index"][idx[0]])))
    return logs


def _dynamics(cfg: RunConfig) -> EmitterDynamics:
    h = cfg.hbt
    return EmitterDynamics(h.k_ex, h.k_r, h.k_isc, h.k_d, h.collection)


def _stream_paths(out: Path, site: int):
    d = out / "hbt" / "streams"
    return d / f"site_{site:05d}_a.txt", d / f"site_{site:05d}_b.txt"


# -- stages ------------------------------------------------------------------

@_stage("simulate implant", "controller")
def simulate_implant(cfg: RunConfig, out: Path) -> dict:
    atomic_write_text(out / "config.ini", cfg.to_ini())
    logs = implant_arrays(cfg.plan, cfg.beam, cfg.detector, cfg.master_seed, cfg.n_arrays)
    d = out / "implant"

    def pulse_rows():
        for lg in logs:
            for p, k, a, f in zip(lg.pulse_index, lg.true_ions, lg.amplitude, lg.sca_fired):
                yield lg.site_index, lg.array_index, p, k, a, f

    write_csv(d / "pulses.csv",
              ["site_index", "array_index", "pulse_index", "true_ions", "amplitude", "sca_fired"],
              pulse_rows())
    pos = site_layout(cfg.plan.rows, cfg.plan.cols, cfg.plan.pitch, cfg.n_arrays)
    write_csv(d / "sites_truth.csv",
              ["site_index", "array_index", "row", "col", "x_um", "y_um", "n_pulses", "counted",
               "implanted_true"],
              ((lg.site_index, lg.array_index, lg.row, lg.col, pos[lg.site_index][0],
                pos[lg.site_index][1], lg.n_pulses, lg.counted, lg.implanted_true) for lg in logs))

    k, mean, std = calibration_curve(cfg.detector, child_rng(cfg.master_seed, "calibration"),
                                     n_pulses=2000)
    write_csv(d / "calibration.csv", ["ions", "mean_v", "std_v"], zip(k, mean, std))
    ibic = simulate_ibic(cfg.detector, (80.0, 40.0), 1.0, child_rng(cfg.master_seed, "ibic"),
                         pulses_per_pixel=50)
    write_csv(d / "ibic.csv", ["x_um", "y_um", "cce"], ibic.to_rows())
    true = np.array([lg.implanted_true for lg in logs])
    return {"n_sites": len(logs), "n_pulses": int(sum(lg.n_pulses for lg in logs)),
            "true_mean": float(true.mean())}


@_stage("analyze pulses", "pulsefit")
def analyze_pulses(cfg: RunConfig, out: Path) -> dict:
    logs = _load_site_logs(out / "implant" / "pulses.csv", cfg.plan.preset)
    if not logs:
        raise ValueError("no pulses recorded")
    amps = np.concatenate([lg.amplitude for lg in logs])
    hist = build_histogram(amps, cfg.analysis.bin_width)
    fit = fit_mixture(hist, 3, model=cfg.analysis.mixture_model)
    lam = estimate_lambda(fit)
    th = cfg.thresholds
    ins = in_situ_budget(fit, th)
    post = post_budget(fit, th)
    timed = timed_error(cfg.plan.preset)
    budgets = {"timed": timed, "in_situ": ins, "post": post}
    d = out / "pulses"

    comp = fit.component_counts(hist.edges)
    write_csv(d / "amplitude_hist.csv",
              ["center_v", "count", "model_total"] + [f"peak{i}" for i in range(fit.n_peaks)],
              ((c, n, comp[:, i].sum(), *comp[:, i]) for i, (c, n) in
               enumerate(zip(hist.centers, hist.counts))))
    write_json(d / "mixture_fit.json", {
        "model": cfg.analysis.mixture_model, "areas": fit.areas, "means": fit.means,
        "widths": fit.widths, "chi2_red": fit.chi2_red, "n_events": fit.n_events,
        "lambda": lam, "timed": timed, "in_situ": ins.as_dict(), "post": post.as_dict()})
    atomic_write_text(d / "budget.csv", emit_table1(budgets))

    rec = reconstruct_sites(logs, th, preset=cfg.plan.preset, mode=cfg.analysis.multi_mode,
                            one_ion_amplitude=float(fit.means[1]), min_sites=1)
    true = np.array([lg.implanted_true for lg in logs])
    counted = np.array([lg.counted for lg in logs])
    write_csv(d / "sites.csv", ["site_index", "n_reconstructed", "n_true", "counted"],
              zip(rec.site_index, rec.counts, true, counted))
    n = np.arange(min(rec.counts.min(), cfg.plan.preset) - 5,
                  max(rec.counts.max(), cfg.plan.preset) + 6)
    occ = np.array([(rec.counts == v).sum() for v in n])
    n_sites = len(logs)

    def gauss(mu, s):
        return n_sites * (ndtr((n + 0.5 - mu) / s) - ndtr((n - 0.5 - mu) / s))

    sigma = max(rec.sigma, 1e-9)
    write_csv(d / "site_hist.csv", ["ions", "occurrences", "gaussian_fit", "timed_gaussian"],
              zip(n, occ, gauss(rec.mean, sigma), gauss(cfg.plan.preset, rec.timed_sigma)))
    stats = {"n_sites": n_sites, "mean": rec.mean, "sigma": rec.sigma, "fwhm": rec.fwhm,
             "method": rec.method, "preset": cfg.plan.preset,
             "timed_sigma": rec.timed_sigma, "timed_fwhm": rec.timed_fwhm,
             "sample_mean": float(rec.counts.mean()), "sample_sigma": float(rec.counts.std(ddof=1))
             if n_sites > 1 else 0.0,
             "true_mean": float(true.mean()),
             "true_sigma": float(true.std(ddof=1)) if n_sites > 1 else 0.0}
    write_json(d / "site_stats.json", stats)
    return {"lambda": lam, "in_situ": ins, "post": post, "timed": timed, "sites": stats}


@_stage("simulate pl", "activation")
def simulate_pl(cfg: RunConfig, out: Path) -> dict:
    t = read_csv_columns(out / "implant" / "sites_truth.csv",
                         {"site_index": np.int64, "implanted_true": np.int64})
    sites = []
    for s, x, y, n in zip(t["site_index"], t["x_um"], t["y_um"], t["implanted_true"]):
        k = sample_activation(int(n), cfg.activation, child_rng(cfg.master_seed, "activation", int(s)))
        sites.append(SiteEmitters(int(s), int(n), int(k), float(x), float(y)))
    pl = synthesize_pl_map(sites, cfg.activation, child_rng(cfg.master_seed, "plmap"))
    d = out / "pl"
    write_csv(d / "pl_map.csv", ["x_um", "y_um", "kcps"], pl.to_rows())
    write_csv(d / "pl_truth.csv", ["site_index", "x_um", "y_um", "n_ions", "n_siv_true"],
              ((s.site_index, s.x_um, s.y_um, s.n_ions, s.n_siv) for s in sites))
    return {"n_sites": len(sites), "mean_siv": float(np.mean([s.n_siv for s in sites]))}


def _load_pl_map(path) -> PlMap:
    c = read_csv_columns(path)
    x = np.unique(c["x_um"])
    y = np.unique(c["y_um"])
    return PlMap(x, y, c["kcps"].reshape(len(y), len(x)))


@_stage("analyze pl", "activation")
def analyze_pl(cfg: RunConfig, out: Path) -> dict:
    act = cfg.activation
    pl = _load_pl_map(out / "pl" / "pl_map.csv")
    t = read_csv_columns(out / "pl" / "pl_truth.csv",
                         {"site_index": np.int64, "n_ions": np.int64, "n_siv_true": np.int64})
    rows = []
    est = []
    for s, x, y, n, k in zip(t["site_index"], t["x_um"], t["y_um"], t["n_ions"], t["n_siv_true"]):
        f = fit_spot(pl, (x, y), act.spot_diameter, psf_guess=act.psf_sigma)
        amp = max(f.amplitude, 0.0)
        n_est = classify_site_rate(amp, act)
        est.append(n_est)
        rows.append((s, n, k, amp, n_est, f.offset, f.degraded))
    d = out / "pl"
    write_csv(d / "emitters.csv", ["site_index", "n_ions", "n_siv_true", "amplitude_kcps",
                                   "n_siv_est", "offset_kcps", "degraded"], rows)
    est = np.array(est)
    k, occ, expected = poisson_histogram(est)
    write_csv(d / "emitter_hist.csv", ["emitters", "occurrences", "poisson_fit"],
              zip(k, occ, expected))

    stats_path = out / "pulses" / "site_stats.json"
    fit_path = out / "pulses" / "mixture_fit.json"
    if stats_path.exists():
        mean_ions = read_json(stats_path)["mean"]
        source = "pulses/site_stats.json"
    else:
        mean_ions = float(t["n_ions"].mean())
        source = "pl/pl_truth.csv"
    ion_err = (0.0, 0.0)
    if fit_path.exists():
        post = read_json(fit_path)["post"]
        ion_err = (post["total_plus"], post["total_minus"])
    py = fit_poisson_yield(est, mean_ions, ion_error=ion_err, min_sites=1)
    accuracy = float(np.mean(est == t["n_siv_true"]))
    result = {"lambda": py.lam, "lambda_plus": py.lam_plus, "lambda_minus": py.lam_minus,
              "mean_ions": py.mean_ions, "mean_ions_source": source,
              "ion_error_plus": ion_err[0], "ion_error_minus": ion_err[1],
              "yield": py.yield_, "yield_plus": py.yield_plus, "yield_minus": py.yield_minus,
              "n_sites": py.n_sites, "upper_only": py.upper_only,
              "classification_accuracy": accuracy}
    write_json(d / "yield.json", result)
    return result


@_stage("simulate hbt", "correlation")
def simulate_hbt(cfg: RunConfig, out: Path) -> dict:
    h = cfg.hbt
    e = read_csv_columns(out / "pl" / "emitters.csv",
                         {"site_index": np.int64, "n_siv_true": np.int64, "n_siv_est": np.int64})
    # sites read as one emitter from their PL rate, below the brightness cutoff
    cand = np.flatnonzero((e["n_siv_est"] == 1) & (e["amplitude_kcps"] < cfg.activation.hbt_cutoff_kcps))
    cand = cand[:h.max_sites]
    dyn = _dynamics(cfg)
    scale = h.collection / h.nominal_collection
    density = h.nv_ppb * 1e-9 * 1.76e23 * h.nv_yield
    rows = []
    for i in cand:
        site = int(e["site_index"][i])
        rng = child_rng(cfg.master_seed, "hbt", site)
        second = bool(rng.random() < h.second_emitter_prob)
        sep = float(nearest_neighbour_distance(density, rng)) if second else float("nan")
        n_em = int(e["n_siv_true"][i]) + int(second)
        ta, tb = simulate_photon_streams(n_em, dyn, h.background_kcps * scale, h.duration_s, rng)
        pa, pb = _stream_paths(out, site)
        write_timestamps(pa, ta)
        write_timestamps(pb, tb)
        amp = float(e["amplitude_kcps"][i])
        rho = amp / (amp + h.background_kcps) if amp > 0 else 1.0
        rows.append((site, int(e["n_siv_true"][i]), int(second), sep, n_em, amp, rho,
                     ta.size, tb.size))
    write_csv(out / "hbt" / "sites.csv",
              ["site_index", "n_siv_true", "second_emitter", "separation_nm", "n_emitters",
               "pl_amplitude_kcps", "rho", "n_a", "n_b"], rows)
    return {"n_sites": len(rows)}


@_stage("analyze hbt", "correlation")
def analyze_hbt(cfg: RunConfig, out: Path, *, bin_ns=None, window_ns=None, rho=None) -> dict:
    h = cfg.hbt
    bin_ns = h.bin_ns if bin_ns is None else bin_ns
    window_ns = h.window_ns if window_ns is None else window_ns
    s = read_csv_columns(out / "hbt" / "sites.csv",
                         {"site_index": np.int64, "n_emitters": np.int64})
    g2_rows, fit_rows = [], []
    labels = []
    for site, n_em, r in zip(s["site_index"], s["n_emitters"], s["rho"]):
        site = int(site)
        r = float(r if rho is None else rho)
        pa, pb = _stream_paths(out, site)
        ta, tb = read_timestamps(pa), read_timestamps(pb)
        if ta.size == 0 or tb.size == 0:
            fit_rows.append((site, n_em, r, *([float("nan")] * 8), 1, "no_signal"))
            labels.append("no_signal")
            continue
        hist = coincidence_histogram(ta, tb, bin_ns, window_ns, duration_ns=h.duration_s * 1e9)
        f = fit_g2(hist, r)
        label = "classical" if f.no_antibunching else classify_spe(f)
        labels.append(label)
        corr = background_correct(hist.g2, r)
        model = g2_model(hist.lags_ns, f.params)
        g2_rows.extend((site, t, c, g, gc, m) for t, c, g, gc, m in
                       zip(hist.lags_ns, hist.counts, hist.g2, corr, model))
        p = f.params
        fit_rows.append((site, n_em, r, f.g2_zero, f.g2_zero_err, p.n_emitters, p.a, p.t1, p.t2,
                         f.chi2_red, int(f.no_antibunching), label))
    d = out / "hbt"
    write_csv(d / "g2.csv", ["site_index", "lag_ns", "counts", "g2_raw", "g2_corrected",
                             "g2_fit"], g2_rows)
    write_csv(d / "fits.csv", ["site_index", "n_emitters_sim", "rho", "g2_zero", "g2_zero_err",
                               "n_fit", "a", "t1_ns", "t2_ns", "chi2_red", "no_antibunching",
                               "label"], fit_rows)
    n_single = labels.count("single")
    return {"n_sites": len(labels), "n_single": n_single,
            "fraction_single": n_single / len(labels) if labels else float("nan")}


# -- report ------------------------------------------------------------------

@dataclass
class Report:
    """Summary of one run; every value is read back from an artifact file."""

    table1: dict
    lambda_fit: float
    sites: dict
    yield_: dict
    spe: dict
    nv_table: list
    notes: list = field(default_factory=list)
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"table1": self.table1, "lambda_fit": self.lambda_fit, "sites": self.sites,
                "yield": self.yield_, "spe": self.spe, "nv_table": self.nv_table,
                "notes": self.notes, "sources": self.sources}

    def to_text(self) -> str:
        ins = ErrorBudget(**{k: self.table1["in_situ"][k] for k in
                             ("fn_rate", "fp_rate", "mult_rate", "single_as_double_rate")})
        post = ErrorBudget(**{k: self.table1["post"][k] for k in
                              ("fn_rate", "fp_rate", "mult_rate", "single_as_double_rate")})
        out = ["Counting error budget (percent of implanted ions)", "",
               format_table1({"timed": self.table1["timed"], "in_situ": ins, "post": post}),
               f"Ions per pulse from peak areas: {self.lambda_fit:.4f}", ""]
        s = self.sites
        out += ["Ions per site (post-analysis)",
                f"  sites {s['n_sites']}, mean {s['mean']:.2f}, sigma {s['sigma']:.2f}, "
                f"FWHM {s['fwhm']:.2f} (timed FWHM {s['timed_fwhm']:.2f})",
                f"  true mean {s['true_mean']:.2f}, true sigma {s['true_sigma']:.2f}", ""]
        y = self.yield_
        out += ["Emitter yield",
                f"  emitters per site {y['lambda']:.3f} +{y['lambda_plus']:.3f}/-{y['lambda_minus']:.3f}",
                f"  yield {100 * y['yield']:.2f} +{100 * y['yield_plus']:.2f}/"
                f"-{100 * y['yield_minus']:.2f} %  (mean ions {y['mean_ions']:.2f})", ""]
        p = self.spe
        out += ["Photon statistics",
                f"  sites measured {p['n_sites']}, single-photon {p['n_single']} "
                f"({100 * p['fraction_single']:.0f} %)" if p["n_sites"] else
                "  no HBT candidates",
                "  labels: " + ", ".join(f"{k} {v}" for k, v in sorted(p["labels"].items())), ""]
        out += ["NV spacing (nm)"]
        out += [f"  N {r['n_ppb']:g} ppb, yield {100 * r['conv_yield']:g} %: {r['separation_nm']:.0f}"
                for r in self.nv_table]
        if self.notes:
            out += ["", "Notes"] + [f"  - {n}" for n in self.notes]
        return "\n".join(out) + "\n"


def build_report(cfg: RunConfig, out) -> Report:
    out = Path(out)
    fitj = read_json(out / "pulses" / "mixture_fit.json")
    stats = read_json(out / "pulses" / "site_stats.json")
    yj = read_json(out / "pl" / "yield.json")
    fits_path = out / "hbt" / "fits.csv"
    labels = {}
    if fits_path.exists() and fits_path.stat().st_size > 0:
        f = read_csv_columns(fits_path, {"label": str})
        for lab in f.get("label", []):
            labels[str(lab)] = labels.get(str(lab), 0) + 1
    n_hbt = sum(labels.values())
    spe = {"n_sites": n_hbt, "n_single": labels.get("single", 0),
           "fraction_single": labels.get("single", 0) / n_hbt if n_hbt else float("nan"),
           "labels": labels}
    nv = [{"n_ppb": n, "conv_yield": c, "separation_nm": nv_separation(n, c)}
          for n, c in NV_ASSUMPTIONS]
    table1 = {"timed": fitj["timed"], "in_situ": fitj["in_situ"], "post": fitj["post"]}
    notes = []
    fp_in = fitj["in_situ"]["fp_rate"]
    if fp_in > 1e-9:
        notes.append(f"in-situ false-positive rate {fp_in:.2e} is above 1 ppb: the zero-ion "
                     "noise tail reaches the SCA threshold at this noise level")
    return Report(table1, fitj["lambda"], stats, yj, spe, nv, notes,
                  {"table1": "pulses/mixture_fit.json", "lambda_fit": "pulses/mixture_fit.json",
                   "sites": "pulses/site_stats.json", "yield": "pl/yield.json",
                   "spe": "hbt/fits.csv", "nv_table": "computed"})


def report(cfg: RunConfig, out) -> Report:
    return _report_stage(cfg, out)


@_stage("report", "report")
def _report_stage(cfg: RunConfig, out: Path) -> Report:
    rep = build_report(cfg, out)
    d = out / "report"
    write_json(d / "report.json", rep.to_dict())
    atomic_write_text(d / "report.txt", rep.to_text())
    fitj = read_json(out / "pulses" / "mixture_fit.json")
    budgets = {"timed": fitj["timed"],
               "in_situ": ErrorBudget(**{k: fitj["in_situ"][k] for k in
                                         ("fn_rate", "fp_rate", "mult_rate", "single_as_double_rate")}),
               "post": ErrorBudget(**{k: fitj["post"][k] for k in
                                      ("fn_rate", "fp_rate", "mult_rate", "single_as_double_rate")})}
    atomic_write_text(d / "table1.csv", emit_table1(budgets))
    return rep


STAGES = {
    ("simulate", "implant"): simulate_implant,
    ("analyze", "pulses"): analyze_pulses,
    ("simulate", "pl"): simulate_pl,
    ("analyze", "pl"): analyze_pl,
    ("simulate", "hbt"): simulate_hbt,
    ("analyze", "hbt"): analyze_hbt,
    ("report", None): report,
}


def write_manifest(cfg: RunConfig, out) -> Path:
    """Record the config digest, seed, software versions and artifact hashes."""
    out = Path(out)
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
            files[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "config_sha256": cfg.digest(),
        "master_seed": cfg.master_seed,
        "versions": {"counted_implant": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "files": files,
    }
    return write_json(out / "manifest.json", manifest)


def run_pipeline(config_path=None, out="run", *, seed=None, config: RunConfig | None = None) -> Report:
    """Run every stage in order and return the report."""
    out = Path(out)
    cfg = config if config is not None else load_config(config_path)
    cfg = cfg.with_seed(seed)
    simulate_implant(cfg, out)
    analyze_pulses(cfg, out)
    simulate_pl(cfg, out)
    analyze_pl(cfg, out)
    simulate_hbt(cfg, out)
    analyze_hbt(cfg, out)
    return report(cfg, out)

