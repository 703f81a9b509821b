"""Command-line interface, configuration ingestion, result serialization,
and the source-pair tuning-range matcher.

Config files are JSON with explicit unit suffixes in every key carrying a
physical quantity (`t1_ps`, `delta_omega_ns_inv`, `fwhm_pm`); unknown
keys are rejected so a mistyped or wrongly-united key fails loudly
instead of silently falling back to a default. Every output file carries
the sha256 hash of the resolved configuration that produced it, and all
commands are deterministic given (config, seed).

Exit codes: 0 success, 2 invalid configuration or usage, 3 numerical
failure (fit non-convergence, filter regime violation, degenerate data).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .units_core import (
    EnergySplitting,
    Frequency,
    Rate,
    Wavelength,
    wavelength_to_angular_frequency,
)
from .wavepacket import Charge, EmitterParams
from .overlap_analytics import (
    FilterParams,
    FilterRegimeError,
    SourcePair,
    apply_filter,
    make_source_pair,
    mwo_no_dephasing,
    mwo_voigt_averaged,
    mwo_with_dephasing,
    remote_upper_bound,
)
from .spectral_noise import DelayVisibilitySeries, individual_indistinguishability
from .hom_montecarlo import (
    HomExperimentConfig,
    Polarization,
    analytic_prediction,
    estimate_visibility,
    simulate_histogram,
    write_histogram_csv,
    write_visibility_json,
)
from .estimation import (
    LifetimeModel,
    LifetimeTrace,
    RankDeficiencyError,
    fit_delay_visibility,
    fit_lifetime,
    fit_reflectivity,
    read_reflectivity_csv,
)

__all__ = [
    "CavityParams",
    "CatalogEntry",
    "SourceCatalog",
    "RunConfig",
    "config_hash",
    "load_run_config",
    "load_catalog",
    "demo_catalog",
    "match_pairs",
    "run_pipeline",
    "main",
]


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class CavityParams:
    """Micropillar cavity mode: center, quality factor, QD-cavity detuning."""

    x_c: Wavelength
    q: float
    detuning_pm: float = 0.0

    def __post_init__(self) -> None:
        if not self.q > 0:
            raise ValueError(f"quality factor must be > 0, got {self.q}")

    @property
    def fwhm_pm(self) -> float:
        return self.x_c.value / self.q * 1e3


@dataclass(frozen=True)
class CatalogEntry:
    label: str
    emitter: EmitterParams
    cavity: CavityParams
    tuning_range_nm: tuple[float, float]
    peak_brightness: float = 1.0

    def __post_init__(self) -> None:
        lo, hi = self.tuning_range_nm
        if not lo < hi:
            raise ValueError(f"{self.label}: tuning range must satisfy min < max")

    @property
    def sample(self) -> str:
        # sources live on physical samples named by the label prefix: I_A
        # and I_B share sample I, II_A/II_B/II_C sample II
        return self.label.split("_")[0]


@dataclass(frozen=True)
class SourceCatalog:
    sources: tuple[CatalogEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(self.sources))
        labels = [s.label for s in self.sources]
        if len(set(labels)) != len(labels):
            raise ValueError("catalog labels must be unique")

    def __getitem__(self, label: str) -> CatalogEntry:
        for entry in self.sources:
            if entry.label == label:
                return entry
        raise KeyError(label)


@dataclass(frozen=True)
class RunConfig:
    pair: SourcePair
    experiment: HomExperimentConfig
    filter: Optional[FilterParams]
    seed: int
    outputs: Path
    workers: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an explicit integer")
        object.__setattr__(self, "outputs", Path(self.outputs))


# ---------------------------------------------------------------------------
# Config ingestion

def config_hash(resolved: dict) -> str:
    """sha256 over the canonical JSON form of a resolved configuration.

    The `outputs` directory is excluded: it is plumbing, and the same
    physics run must hash identically wherever its artifacts land.
    """
    hashable = {k: v for k, v in resolved.items() if k != "outputs"}
    canonical = json.dumps(hashable, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _take(d: dict, context: str, required: Sequence[str] = (),
          optional: Optional[dict] = None) -> dict:
    """Validate a config section: every required key present, none unknown."""
    optional = optional or {}
    out = {}
    for key in required:
        if key not in d:
            raise ValueError(f"{context}: missing required key '{key}'")
        out[key] = d[key]
    for key, default in optional.items():
        out[key] = d.get(key, default)
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)} "
                         "(check unit suffixes)")
    return out


_EMITTER_OPTIONAL = {
    "gamma_star_ns_inv": 0.0,
    "delta_omega_ns_inv": 0.0,
    "tau_c_ns": 1400.0,
    "wavelength_nm": 0.0,
    "fss_uev": 0.0,
    "theta_rad": 0.0,
    "charge": "CX",
    "brightness": 1.0,
    "sideband_fraction": 0.05,
}


def emitter_from_dict(d: dict, context: str = "emitter") -> EmitterParams:
    vals = _take(d, context, required=("t1_ps",), optional=_EMITTER_OPTIONAL)
    omega0 = (wavelength_to_angular_frequency(Wavelength(vals["wavelength_nm"]))
              if vals["wavelength_nm"] else Frequency(0.0))
    try:
        charge = Charge(vals["charge"])
    except ValueError:
        raise ValueError(f"{context}: charge must be 'X' or 'CX', got {vals['charge']!r}")
    return EmitterParams(
        t1_ps=float(vals["t1_ps"]),
        gamma_star=Rate(float(vals["gamma_star_ns_inv"])),
        delta_omega=Rate(float(vals["delta_omega_ns_inv"])),
        tau_c_ns=float(vals["tau_c_ns"]),
        omega0=omega0,
        fss=EnergySplitting(float(vals["fss_uev"])),
        theta_rad=float(vals["theta_rad"]),
        charge=charge,
        brightness=float(vals["brightness"]),
        sideband_fraction=float(vals["sideband_fraction"]),
    )


def _filter_from_dict(d: dict) -> FilterParams:
    vals = _take(d, "filter", required=("center_nm", "fwhm_pm"))
    return FilterParams(center=Wavelength(float(vals["center_nm"])),
                        fwhm_pm=float(vals["fwhm_pm"]))


def load_run_config(path: str | Path, *, seed_override: Optional[int] = None,
                    pulses_override: Optional[int] = None,
                    filter_fwhm_override: Optional[float] = None,
                    out_override: Optional[str] = None,
                    workers: int = 1) -> tuple[RunConfig, str]:
    """Parse a run config file and apply CLI overrides.

    Returns the config plus the hash of the *resolved* dict, so the same
    effective parameters hash identically however they were supplied.
    """
    with Path(path).open() as fh:
        raw = json.load(fh)
    top = _take(raw, "config", required=("pair", "experiment", "seed"),
                optional={"filter": None, "outputs": "."})
    pair_d = _take(top["pair"], "pair", required=("a", "b"),
                   optional={"mean_detuning_ns_inv": 0.0, "s_classical": None})

    resolved = json.loads(json.dumps(raw))  # deep copy, JSON-typed
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    if pulses_override is not None:
        resolved["experiment"]["n_pulses"] = int(pulses_override)
    if out_override is not None:
        resolved["outputs"] = out_override
    if filter_fwhm_override is not None:
        if resolved.get("filter"):
            resolved["filter"]["fwhm_pm"] = float(filter_fwhm_override)
        else:
            wl = pair_d["a"].get("wavelength_nm", 0.0)
            if not wl:
                raise ValueError("--filter-fwhm-pm without a filter section "
                                 "requires pair.a.wavelength_nm for the center")
            resolved["filter"] = {"center_nm": wl,
                                  "fwhm_pm": float(filter_fwhm_override)}

    a = emitter_from_dict(resolved["pair"]["a"], "pair.a")
    b = emitter_from_dict(resolved["pair"]["b"], "pair.b")
    filt = _filter_from_dict(resolved["filter"]) if resolved.get("filter") else None
    exp_d = _take(resolved["experiment"], "experiment", required=("n_pulses",),
                  optional={"rep_period_ns": 12.2, "jitter_sigma_ps": 12.0,
                            "g2": 0.0, "blink_on_prob": 0.9,
                            "blink_dwell_ns": 100.0, "bin_width_ps": 50.0,
                            "window_peaks": 3})
    experiment = HomExperimentConfig(
        n_pulses=int(exp_d["n_pulses"]),
        rep_period_ns=float(exp_d["rep_period_ns"]),
        jitter_sigma_ps=float(exp_d["jitter_sigma_ps"]),
        g2=float(exp_d["g2"]),
        blink_on_prob=float(exp_d["blink_on_prob"]),
        blink_dwell_ns=float(exp_d["blink_dwell_ns"]),
        bin_width_ps=float(exp_d["bin_width_ps"]),
        window_peaks=int(exp_d["window_peaks"]),
    )
    mean_detuning = Frequency(float(pair_d["mean_detuning_ns_inv"]))
    if filt is not None:
        a, _ = apply_filter(a, filt)
        b, _ = apply_filter(b, filt)
    pair = make_source_pair(a, b, mean_detuning, filt=filt,
                            s_classical=pair_d["s_classical"])
    cfg = RunConfig(pair=pair, experiment=experiment, filter=filt,
                    seed=int(resolved["seed"]),
                    outputs=Path(resolved.get("outputs", ".")),
                    workers=workers)
    return cfg, config_hash(resolved)


# ---------------------------------------------------------------------------
# Catalog + pair matching

def load_catalog(path: str | Path) -> tuple[SourceCatalog, str]:
    with Path(path).open() as fh:
        raw = json.load(fh)
    top = _take(raw, "catalog", required=("sources",))
    entries = []
    for src in top["sources"]:
        vals = _take(src, f"source {src.get('label', '?')}",
                     required=("label", "emitter", "cavity", "tuning_range_nm"),
                     optional={"peak_brightness": 1.0})
        cav = _take(vals["cavity"], f"{vals['label']}.cavity",
                    required=("x_c_nm", "q"), optional={"detuning_pm": 0.0})
        entries.append(CatalogEntry(
            label=str(vals["label"]),
            emitter=emitter_from_dict(vals["emitter"], f"{vals['label']}.emitter"),
            cavity=CavityParams(Wavelength(float(cav["x_c_nm"])), float(cav["q"]),
                                float(cav["detuning_pm"])),
            tuning_range_nm=(float(vals["tuning_range_nm"][0]),
                             float(vals["tuning_range_nm"][1])),
            peak_brightness=float(vals["peak_brightness"]),
        ))
    return SourceCatalog(tuple(entries)), config_hash(raw)


def match_pairs(catalog: SourceCatalog) -> list[tuple[str, str, tuple[float, float]]]:
    """All cross-sample source pairs with intersecting tuning ranges.

    Sources on the same physical sample share one voltage-tuned chip and
    are not remote pairs, so only pairs with different label prefixes are
    eligible. Sorted by descending intersection width (ties by label), so
    the output is independent of catalog ordering.
    """
    if not catalog.sources:
        raise ValueError("catalog is empty")
    found = []
    for i, p in enumerate(catalog.sources):
        for q in catalog.sources[i + 1:]:
            if p.sample == q.sample:
                continue
            lo = max(p.tuning_range_nm[0], q.tuning_range_nm[0])
            hi = min(p.tuning_range_nm[1], q.tuning_range_nm[1])
            if lo < hi:
                a, b = sorted((p, q), key=lambda e: (e.sample, e.label))
                found.append((a.label, b.label, (lo, hi)))
    found.sort(key=lambda t: (-(t[2][1] - t[2][0]), t[0], t[1]))
    return found


def demo_catalog() -> SourceCatalog:
    """The five-source demo catalog: two sources on sample I, three on II.

    Emitter numbers follow the characterized resonant pair (X excitons
    with fine-structure beating, measured noise parameters) and the LA
    pairs (trions); tuning ranges are chosen to respect the documented
    constraints (II_A cannot tune below 924.847 nm, its brightest point)
    and to produce exactly the four realizable cross-sample pairs.
    """

    def emitter(t1, gs, dw, fss=0.0, charge="CX", wl=924.9, p_sb=0.05):
        return emitter_from_dict({
            "t1_ps": t1, "gamma_star_ns_inv": gs, "delta_omega_ns_inv": dw,
            "fss_uev": fss, "charge": charge, "wavelength_nm": wl,
            "sideband_fraction": p_sb,
        })

    entries = (
        CatalogEntry("I_A", emitter(162.0, 0.17, 4.7, fss=6.3, charge="X", wl=924.847),
                     CavityParams(Wavelength(924.734), 2900.0, 113.0),
                     (924.60, 925.00), 0.124),
        CatalogEntry("I_B", emitter(240.0, 0.10, 3.0, wl=925.00),
                     CavityParams(Wavelength(924.95), 2800.0, 50.0),
                     (924.90, 925.15), 0.10),
        CatalogEntry("II_A", emitter(128.0, 0.03, 2.12, fss=6.7, charge="X", wl=924.847),
                     CavityParams(Wavelength(924.817), 1700.0, 30.0),
                     (924.847, 924.88), 0.185),
        CatalogEntry("II_B", emitter(212.0, 0.10, 3.0, wl=925.00),
                     CavityParams(Wavelength(924.96), 1900.0, 40.0),
                     (924.92, 925.20), 0.12),
        CatalogEntry("II_C", emitter(219.0, 0.10, 3.0, wl=924.80),
                     CavityParams(Wavelength(924.75), 2100.0, 50.0),
                     (924.65, 924.84), 0.11),
    )
    return SourceCatalog(entries)


# ---------------------------------------------------------------------------
# Pipeline

def run_pipeline(config: RunConfig, cfg_hash: str) -> dict:
    """Analytic predictions, both-polarization Monte Carlo, visibility
    estimate and bound check; writes all artifacts into config.outputs."""
    out = config.outputs
    out.mkdir(parents=True, exist_ok=True)
    pair = config.pair

    m_plain = mwo_no_dephasing(pair.a.gamma, pair.b.gamma, pair.mean_detuning)
    m_deph = mwo_with_dephasing(pair)
    m_avg = mwo_voigt_averaged(pair)
    bound = remote_upper_bound(pair.s_classical, 1.0, 1.0)
    overlap_report = {
        "s_classical": pair.s_classical,
        "m_no_dephasing": m_plain,
        "m_dephasing": m_deph,
        "m_averaged": m_avg,
        "m_event_mean": analytic_prediction(pair),
        "upper_bound": bound,
        "config_hash": cfg_hash,
    }
    with (out / "overlap.json").open("w") as fh:
        json.dump(overlap_report, fh, sort_keys=True, indent=2)
        fh.write("\n")

    h_par = simulate_histogram(pair, config.experiment, Polarization.PARALLEL,
                               config.seed, workers=config.workers)
    h_perp = simulate_histogram(pair, config.experiment, Polarization.PERPENDICULAR,
                                config.seed, workers=config.workers)
    write_histogram_csv(h_par, out / "histogram_par.csv", config_hash=cfg_hash)
    write_histogram_csv(h_perp, out / "histogram_perp.csv", config_hash=cfg_hash)

    est = estimate_visibility(h_par, h_perp, config.experiment.rep_period_ns)
    write_visibility_json(est, out / "visibility.json", config_hash=cfg_hash,
                          seed=config.seed)
    summary = dict(overlap_report, v_tpi=est.v_tpi, sigma=est.sigma,
                   bound_satisfied=bool(est.v_tpi <= bound + 3.0 * est.sigma))
    return summary


# ---------------------------------------------------------------------------
# Subcommands

def _emit(payload: dict, out_dir: Optional[str], filename: str) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / filename).write_text(text)


def _cmd_overlap(args: argparse.Namespace) -> int:
    config, h = load_run_config(args.config,
                                filter_fwhm_override=args.filter_fwhm_pm,
                                seed_override=args.seed)
    pair = config.pair
    payload = {
        "s_classical": pair.s_classical,
        "m_no_dephasing": mwo_no_dephasing(pair.a.gamma, pair.b.gamma,
                                           pair.mean_detuning),
        "m_dephasing": mwo_with_dephasing(pair),
        "m_averaged": mwo_voigt_averaged(pair),
        "m_event_mean": analytic_prediction(pair),
        "config_hash": h,
    }
    _emit(payload, args.out, "overlap.json")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    config, h = load_run_config(args.config, seed_override=args.seed,
                                pulses_override=args.pulses,
                                filter_fwhm_override=args.filter_fwhm_pm,
                                out_override=args.out, workers=args.workers)
    summary = run_pipeline(config, h)
    sys.stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_fit_lifetime(args: argparse.Namespace) -> int:
    trace = LifetimeTrace.from_csv(args.data, background=args.background)
    result = fit_lifetime(trace, LifetimeModel(args.model))
    payload = {"params": result.params, "sigmas": result.sigmas,
               "residual_norm": result.residual_norm,
               "converged": result.converged, "n_iter": result.n_iter}
    _emit(payload, args.out, "fit_lifetime.json")
    if not result.converged:
        print("fit did not converge", file=sys.stderr)
        return 3
    return 0


def _cmd_fit_reflectivity(args: argparse.Namespace) -> int:
    wl, refl = read_reflectivity_csv(args.data)
    result = fit_reflectivity(wl, refl)
    payload = {"params": result.params, "sigmas": result.sigmas,
               "residual_norm": result.residual_norm,
               "converged": result.converged, "n_iter": result.n_iter}
    _emit(payload, args.out, "fit_reflectivity.json")
    if not result.converged:
        print("fit did not converge", file=sys.stderr)
        return 3
    return 0


def _parse_override(text: str) -> tuple[str, float, float]:
    parts = text.split(":")
    if len(parts) != 3 or parts[0] not in ("filtered", "unfiltered"):
        raise ValueError(
            f"outlier override must be filtered|unfiltered:DELAY_NS:SIGMA, got {text!r}")
    return parts[0], float(parts[1]), float(parts[2])


def _cmd_fit_delay(args: argparse.Namespace) -> int:
    filtered = DelayVisibilitySeries.from_csv(args.filtered, filtered=True)
    unfiltered = DelayVisibilitySeries.from_csv(args.unfiltered, filtered=False)
    overrides = [_parse_override(o) for o in (args.outlier or [])]
    gamma = Rate(1000.0 / args.t1_ps)
    result = fit_delay_visibility(filtered, unfiltered, gamma,
                                  sigma_overrides=overrides or None)
    payload = {"params": result.params, "sigmas": result.sigmas,
               "residual_norm": result.residual_norm,
               "converged": result.converged, "n_iter": result.n_iter}
    _emit(payload, args.out, "fit_delay.json")
    if not result.converged:
        print("fit did not converge", file=sys.stderr)
        return 3
    return 0


def _cmd_match_pairs(args: argparse.Namespace) -> int:
    if args.config:
        catalog, h = load_catalog(args.config)
    else:
        catalog = demo_catalog()
        h = config_hash({"demo_catalog": [s.label for s in catalog.sources]})
    pairs = match_pairs(catalog)
    payload = {
        "pairs": [{"a": a, "b": b,
                   "common_range_nm": [lo, hi],
                   "width_pm": (hi - lo) * 1e3}
                  for a, b, (lo, hi) in pairs],
        "config_hash": h,
    }
    _emit(payload, args.out, "pairs.json")
    return 0


def _cmd_predict_delay(args: argparse.Namespace) -> int:
    config, h = load_run_config(args.config,
                                filter_fwhm_override=args.filter_fwhm_pm)
    source = config.pair.a if args.source == "a" else config.pair.b
    tau = source.tau_c_ns
    delays = np.linspace(0.0, 3.0 * tau, 201)
    vis = np.array([individual_indistinguishability(source, d) for d in delays])
    series = DelayVisibilitySeries(delays, vis, np.zeros_like(vis),
                                   source_label=args.source,
                                   filtered=config.filter is not None)
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "predicted_delay.csv"
    series.to_csv(path, header_comment=f"config_hash={h}")
    sys.stdout.write(f"wrote {path}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remotehom",
        description="Two-photon interference of remote single-photon sources: "
                    "analytics, simulation, and fitting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("overlap", help="analytic overlap report for a pair")
    add_common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--filter-fwhm-pm", type=float, default=None)
    p.set_defaults(func=_cmd_overlap)

    p = sub.add_parser("simulate", help="coincidence histograms + visibility")
    add_common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pulses", type=int, default=None)
    p.add_argument("--filter-fwhm-pm", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit-lifetime", help="fit a decay trace CSV")
    p.add_argument("data", help="CSV with header time_ps,counts")
    p.add_argument("--model", choices=[m.value for m in LifetimeModel],
                   default="mono_exp")
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_fit_lifetime)

    p = sub.add_parser("fit-reflectivity", help="fit a Lorentzian reflectivity dip")
    p.add_argument("data", help="CSV with header wavelength_nm,reflectivity")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_fit_reflectivity)

    p = sub.add_parser("fit-delay", help="joint delay-visibility fit for one source")
    p.add_argument("filtered", help="CSV delay_ns,visibility,sigma_v (filtered)")
    p.add_argument("unfiltered", help="CSV delay_ns,visibility,sigma_v (unfiltered)")
    p.add_argument("--t1-ps", type=float, required=True,
                   help="radiative lifetime from the lifetime fit")
    p.add_argument("--outlier", action="append", default=None,
                   metavar="SERIES:DELAY_NS:SIGMA",
                   help="inflate one point's uncertainty, e.g. unfiltered:12.2:0.1")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_fit_delay)

    p = sub.add_parser("match-pairs", help="cross-sample tuning-range matches")
    add_common(p, config_required=False)
    p.set_defaults(func=_cmd_match_pairs)

    p = sub.add_parser("predict-delay", help="emit the delay-visibility curve")
    add_common(p)
    p.add_argument("--filter-fwhm-pm", type=float, default=None)
    p.add_argument("--source", choices=["a", "b"], default="a")
    p.set_defaults(func=_cmd_predict_delay)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (FilterRegimeError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
