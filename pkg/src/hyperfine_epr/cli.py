"""Command-line front end: ``hyperfine-epr <command> [options]``.

Settings come from three layers, later ones winning: built-in defaults, a
JSON file given with ``--config`` (keys are the long option names with
dashes replaced by underscores), and explicit command-line flags.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 a fit that
did not converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import plotting
from .fitting import (
    FREE_PARAMETERS,
    FitProblem,
    InconsistentDataError,
    MeasuredPeak,
    calibrate_field,
    dpph_frequency,
    file_digest,
    fit_calibration_map,
    fit_parameters,
    match_peaks,
    simulated_lines,
)
from .lsq import ConvergenceError, RankDeficientError
from .spectrum import (
    ReferenceCoverageError,
    SpectrumTrace,
    build_reference,
    detect_peaks,
    fit_lorentzian,
    peak_area_vs_temperature,
    read_trace,
    robust_noise,
    subtract_background,
    synthesize,
    write_peak_report,
    write_trace,
)
from .spin import FieldVector, SpinSystem, load_spin_system, preset, preset_names
from .transitions import (
    ExcitationGeometry,
    FieldScanError,
    ThermalModel,
    field_line,
    field_scan,
    populations,
    solve,
    spin_polarisation,
    transition_catalog,
    write_catalog_csv,
)
from .zefoz import scan_directions, track_branches, write_branch_csv, write_zefoz_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

COMMON_DEFAULTS = {
    "preset": "this_work",
    "spin_system": None,
    "b0_theta": 0.0,
    "b0_phi": 0.0,
    "geometry": "faraday",
    "b_start": 0.0,
    "b_stop": 50.0,
    "b_step": 0.5,
    "f_min": 0.0,
    "f_max": 6000.0,
    "t_mk": 10.0,
    "t_min_mk": 20.0,
    "out": "out",
    "seed": 0,
    "threads": None,
    "threshold": 1e-4,
}

COMMAND_DEFAULTS = {
    "simulate": {
        "traces": False,
        "df": 0.1,
        "linewidth": 1.84,
        "noise": 0.0,
        "depth_db": 1.0,
        "temperatures_mk": None,
        "compare": None,
        "plot": True,
    },
    "fit-zero-field": {
        "geometry": "voigt",
        "f_min": 1800.0,
        "f_max": 3500.0,
        "peaks": None,
        "trace_files": None,
        "reference": None,
        "free": "a_parallel,a_perp,quadrupole_p",
        "fix": None,
        "initial_preset": None,
        "misalignment": 0.0,
        "exclude_margin": 20.0,
        "peak_snr": 10.0,
        "plot": True,
    },
    "zefoz": {
        "geometry": "voigt",
        "b_stop": 30.0,
        "b_step": 0.1,
        "f_min": 1800.0,
        "f_max": 3500.0,
        "thetas": None,
        "f0": None,
        "f0_tolerance": 10.0,
        "plot": True,
    },
    "calibrate": {"trace_files": None, "dpph_window": 100.0, "fit_halfwidth": 25.0, "plot": True},
    "thermal": {"trace_files": None, "reference": None, "window": None, "plot": True},
    "background": {"trace_files": None, "exclude": None, "exclude_margin": 20.0, "plot": True},
}


@dataclass
class RunConfig:
    """Resolved settings for one command."""

    command: str
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)  # key -> "default" | "config" | "flag"

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def validate(self):
        v = self.values
        errors = []
        for key in ("b0_theta", "b0_phi", "b_start", "b_stop", "b_step", "f_min", "f_max", "t_mk", "t_min_mk"):
            x = v.get(key)
            if not isinstance(x, (int, float)) or isinstance(x, bool) or not math.isfinite(x):
                errors.append(f"{key}: must be a finite number, got {x!r}")
        if not errors:
            if not v["b_step"] > 0:
                errors.append(f"b_step: must be positive, got {v['b_step']}")
            if v["b_start"] > v["b_stop"]:
                errors.append(f"b_start: {v['b_start']} exceeds b_stop {v['b_stop']}")
            if v["b_start"] < 0:
                errors.append(f"b_start: field magnitudes are nonnegative, got {v['b_start']}")
            if not v["f_max"] > v["f_min"]:
                errors.append(f"f_min/f_max: window [{v['f_min']}, {v['f_max']}] is empty")
            if not v["t_min_mk"] > 0:
                errors.append(f"t_min_mk: must be positive, got {v['t_min_mk']}")
            if v["t_mk"] < 0:
                errors.append(f"t_mk: must be nonnegative, got {v['t_mk']}")
        if v.get("geometry") not in ("faraday", "voigt"):
            errors.append(f"geometry: must be 'faraday' or 'voigt', got {v.get('geometry')!r}")
        thr = v.get("threads")
        if thr is not None and (not isinstance(thr, int) or thr < 1):
            errors.append(f"threads: must be a positive integer, got {thr!r}")
        if v.get("spin_system") is None and v.get("preset") not in preset_names():
            errors.append(f"preset: unknown {v.get('preset')!r}; available {preset_names()}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    @property
    def thermal(self) -> ThermalModel:
        return ThermalModel(self.t_mk / 1e3, self.t_min_mk / 1e3)

    @property
    def n_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def system(self) -> SpinSystem:
        if self.spin_system:
            try:
                return load_spin_system(self.spin_system)
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"spin_system: cannot load {self.spin_system}: {exc}") from exc
        return preset(self.preset)

    def geometry_obj(self, theta=None) -> ExcitationGeometry:
        theta = self.b0_theta if theta is None else theta
        return ExcitationGeometry.from_angles(theta, self.b0_phi, self.geometry)

    def out_dir(self) -> Path:
        p = Path(self.out)
        p.mkdir(parents=True, exist_ok=True)
        return p

    def as_record(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values) if k not in ("out", "threads", "config")}


def resolve_config(command, args: argparse.Namespace) -> RunConfig:
    values = dict(COMMON_DEFAULTS)
    values.update(COMMAND_DEFAULTS.get(command, {}))
    sources = {k: "default" for k in values}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        values.update(loaded)
        sources.update({k: "config" for k in loaded})
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
            sources[key] = "flag"
    return RunConfig(command, values, sources).validate()


# -- small helpers ------------------------------------------------------------------


def _created():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.isoformat(timespec="seconds")


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _float_list(text, name):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        items = text
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        return [float(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc


def _window(text, name="window"):
    vals = _float_list(text, name)
    if vals is None:
        return None
    if len(vals) != 2 or not vals[1] > vals[0]:
        raise ConfigError(f"{name}: expected LO,HI with HI > LO, got {text!r}")
    return tuple(vals)


def _read_traces(paths, stage="read traces"):
    if not paths:
        raise ConfigError(f"{stage}: no trace files given")
    out = []
    for p in paths:
        try:
            out.append(read_trace(p))
        except (OSError, ValueError) as exc:
            raise DataError(f"{stage}: {exc}") from exc
    return out


def _read_peak_list(path) -> list[MeasuredPeak]:
    """CSV with column frequency_MHz and optional weight, field_mT."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "frequency_MHz" not in reader.fieldnames:
                raise DataError(f"read peaks: {path} needs a 'frequency_MHz' column")
            peaks = []
            for row in reader:
                peaks.append(
                    MeasuredPeak(
                        float(row["frequency_MHz"]),
                        float(row.get("weight") or 1.0),
                        float(row.get("field_mT") or 0.0),
                    )
                )
    except OSError as exc:
        raise DataError(f"read peaks: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"read peaks: {path}: {exc}") from exc
    return peaks


def _model_windows(system, geometry_kind, theta, phi, trace, margin, thermal, threshold):
    """Frequency intervals where the model expects absorption in a trace."""
    b = FieldVector.from_polar(trace.field_mT, theta, phi)
    geometry = ExcitationGeometry.from_angles(theta, phi, geometry_kind)
    cat = transition_catalog(
        solve(system, b), system, geometry, thermal,
        trace.frequencies[0] - margin, trace.frequencies[-1] + margin, threshold,
    )
    return [(r.frequency - margin, r.frequency + margin) for r in cat]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ReferenceCoverageError as exc:
        raise DataError(f"{name}: {exc}") from exc
    except (ValueError, FieldScanError) as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise DataError(f"{name}: {exc}") from exc


def _log(msg):
    print(msg, file=sys.stderr)


# -- simulate -------------------------------------------------------------------------


def _compare_presets(cfg, scan_a, other_name):
    """Per-field largest shift between matched lines of two parameter sets."""
    other = preset(other_name)
    geometry = cfg.geometry_obj()
    scan_b = field_scan(other, [p.field for p in scan_a], geometry, cfg.thermal,
                        cfg.f_min, cfg.f_max, cfg.threshold, threads=cfg.n_threads)
    rows = []
    for pa, pb in zip(scan_a, scan_b):
        fa = [r.frequency for r in pa.catalog]
        fb = [(r.frequency, r.intensity) for r in pb.catalog]
        if not fa or not fb:
            rows.append((pa.field.magnitude, math.nan, 0))
            continue
        asg = match_peaks(fa, [f for f, _ in fb], gate=None)
        diffs = [abs(d) for _, s, d in asg.pairs if s is not None]
        rows.append((pa.field.magnitude, max(diffs), len(diffs)))
    return rows


def cmd_simulate(cfg: RunConfig) -> int:
    system = cfg.system()
    geometry = cfg.geometry_obj()
    out = cfg.out_dir()
    fields = field_line(cfg.b_start, cfg.b_stop, cfg.b_step, cfg.b0_theta, cfg.b0_phi)
    t0 = time.perf_counter()
    scan = _stage("field scan", field_scan, system, fields, geometry, cfg.thermal,
                  cfg.f_min, cfg.f_max, cfg.threshold, threads=cfg.n_threads)
    write_catalog_csv(scan, out / "catalog.csv")
    nlines = sum(len(p.catalog) for p in scan)
    _log(f"simulate: {len(scan)} field points, {nlines} lines ({time.perf_counter() - t0:.2f} s)")

    if cfg.traces:
        temps = _float_list(cfg.temperatures_mk, "temperatures_mk")
        rng_seed = int(cfg.seed)
        f_hi = cfg.f_max if math.isfinite(cfg.f_max) else max(
            (r.frequency for p in scan for r in p.catalog), default=cfg.f_min + 100.0) + 50.0
        grid = np.arange(cfg.f_min, f_hi + 0.5 * cfg.df, cfg.df)
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        temp_list = temps if temps else [None]
        k = 0
        for point in scan:
            for t_mk in temp_list:
                cat = point.catalog
                if t_mk is not None:
                    thermal = ThermalModel(t_mk / 1e3, cfg.t_min_mk / 1e3)
                    cat = transition_catalog(point.eigensystem, system, geometry, thermal,
                                             cfg.f_min, cfg.f_max, 0.0)
                spec = synthesize(cat, grid, cfg.linewidth, noise_seed=rng_seed + k,
                                  noise_sigma=cfg.noise, field_mT=point.field.magnitude)
                trace = SpectrumTrace(point.field.magnitude, grid, -cfg.depth_db * spec.amplitudes,
                                      temperature_mK=t_mk)
                name = f"trace_B{point.field.magnitude:08.3f}mT"
                if t_mk is not None:
                    name += f"_T{t_mk:09.3f}mK"
                write_trace(trace, tdir / f"{name}.csv")
                k += 1
        _log(f"simulate: wrote {k} synthetic traces to {tdir}")

    if cfg.compare:
        if cfg.compare not in preset_names():
            raise ConfigError(f"compare: unknown preset {cfg.compare!r}")
        rows = _compare_presets(cfg, scan, cfg.compare)
        _write_csv(out / "compare.csv", ["field_mT", "max_abs_diff_MHz", "n_matched"],
                   [[f"{b:.6f}", f"{d:.6f}", n] for b, d, n in rows])
        if cfg.plot:
            plotting.plot_comparison([r[0] for r in rows], [r[1] for r in rows], out / "compare.svg",
                                     (cfg.preset, cfg.compare))

    if cfg.plot:
        plotting.plot_branches(scan, out / "branches.svg", title=cfg.spin_system or cfg.preset,
                               f_min=cfg.f_min, f_max=cfg.f_max)
    return EXIT_OK


# -- fit-zero-field -------------------------------------------------------------------


def _parse_fixes(text) -> dict:
    if not text:
        return {}
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    fixes = {}
    for item in items:
        name, sep, value = str(item).partition("=")
        name = name.strip()
        if not sep or name not in FREE_PARAMETERS:
            raise ConfigError(f"fix: expected NAME=VALUE with NAME in {FREE_PARAMETERS}, got {item!r}")
        try:
            fixes[name] = float(value)
        except ValueError as exc:
            raise ConfigError(f"fix: bad value in {item!r}") from exc
    return fixes


def _peaks_from_traces(cfg, system, out):
    traces = _read_traces(cfg.trace_files, "read traces")
    zero = [t for t in traces if abs(t.field_mT) < 1e-9]
    if not zero:
        raise DataError("read traces: no zero-field trace among the inputs")
    if cfg.reference:
        reference = _read_traces([cfg.reference], "read reference")[0]
    elif len(traces) > 1:
        windows = [
            _model_windows(system, cfg.geometry, cfg.b0_theta + cfg.misalignment, cfg.b0_phi, t,
                           cfg.exclude_margin, cfg.thermal, cfg.threshold)
            for t in traces
        ]
        reference = _stage("background", build_reference, traces, windows)
    else:
        reference = None
    peaks, fits = [], []
    for trace in zero:
        if reference is not None:
            data = _stage("background", subtract_background, trace, reference)
        else:
            data = trace.with_amplitudes(np.median(trace.amplitudes) - trace.amplitudes)
        data = data.window(cfg.f_min, cfg.f_max)
        prominence = cfg.peak_snr * robust_noise(data) or None
        centres = _stage("peak detection", detect_peaks, data, prominence)
        for c in centres:
            try:
                fit = fit_lorentzian(data, (c - 5.0, c + 5.0))
            except (ConvergenceError, ValueError) as exc:
                _log(f"peak fit near {c:.3f} MHz failed ({exc}); using the detected maximum")
                peaks.append(MeasuredPeak(c, 1.0, 0.0))
                continue
            if not fit.amplitude > 0:
                _log(f"peak near {c:.3f} MHz dropped: fitted amplitude {fit.amplitude:.3g}")
                continue
            fits.append(fit)
            peaks.append(MeasuredPeak(fit.center, 1.0, 0.0))
    write_peak_report(fits, out / "peaks.csv")
    return peaks, zero[0] if reference is None else subtract_background(zero[0], reference)


def cmd_fit_zero_field(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    baseline = cfg.system()
    fixes = _parse_fixes(cfg.fix)
    free = [s.strip() for s in str(cfg.free).split(",") if s.strip()] if cfg.free else []
    free = [p for p in free if p not in fixes]
    bad = [p for p in free if p not in FREE_PARAMETERS]
    if bad:
        raise ConfigError(f"free: unknown parameters {bad}; choose from {list(FREE_PARAMETERS)}")
    if not free:
        raise ConfigError("free: no parameters left to fit")
    base_changes = {k: v for k, v in fixes.items() if k != "misalignment_deg"}
    baseline = baseline.with_params(**base_changes)
    misalignment = fixes.get("misalignment_deg", cfg.misalignment)
    start = preset(cfg.initial_preset) if cfg.initial_preset else None
    if cfg.initial_preset and cfg.initial_preset not in preset_names():
        raise ConfigError(f"initial_preset: unknown {cfg.initial_preset!r}")

    if (cfg.peaks is None) == (not cfg.trace_files):
        raise ConfigError("peaks/trace_files: give exactly one of --peaks or --traces")
    inputs = {}
    trace_for_plot = None
    if cfg.peaks is not None:
        peaks = _read_peak_list(cfg.peaks)
        inputs[str(cfg.peaks)] = file_digest(cfg.peaks)
    else:
        peaks, trace_for_plot = _peaks_from_traces(cfg, baseline, out)
        for p in cfg.trace_files:
            inputs[str(p)] = file_digest(p)
    if not peaks:
        stage = "read peaks" if cfg.peaks is not None else "peak detection"
        raise DataError(f"{stage}: no peaks detected")
    if start is not None:
        start = start.with_params(**base_changes)

    try:
        problem = FitProblem(
            peaks, free, baseline, cfg.geometry, cfg.b0_theta, cfg.b0_phi, misalignment,
            cfg.thermal, cfg.f_min, cfg.f_max, cfg.threshold,
        )
    except ValueError as exc:
        raise DataError(f"fit setup: {exc}") from exc
    t0 = time.perf_counter()
    result = fit_parameters(problem, initial=start)
    _log(f"fit: rms {result.rms:.4g} MHz after {result.iterations} iterations "
         f"({result.reason}; {time.perf_counter() - t0:.2f} s)")
    for k, v in result.parameters.items():
        _log(f"  {k} = {v:.6f} +- {result.sigmas.get(k, math.nan):.3g}")
    for row in result.flagged:
        _log(f"  misfit: measured {row['measured_mhz']:.3f} MHz, residual {row['residual_mhz']}")
    report = result.to_json_dict(inputs=inputs, created=_created())
    report["config"] = cfg.as_record()
    _write_json(report, out / "fit_report.json")
    if cfg.plot:
        plotting.plot_zero_field_overlay(result, out / "fit_overlay.svg", trace=trace_for_plot)
    return EXIT_OK


# -- zefoz ----------------------------------------------------------------------------------


def cmd_zefoz(cfg: RunConfig) -> int:
    system = cfg.system()
    out = cfg.out_dir()
    thetas = _float_list(cfg.thetas, "thetas") or [cfg.b0_theta]
    t0 = time.perf_counter()
    results = _stage(
        "field scan", scan_directions, system, thetas, cfg.b0_phi, cfg.b_start, cfg.b_stop, cfg.b_step,
        f0=cfg.f0, f0_tolerance=cfg.f0_tolerance, geometry_kind=cfg.geometry, thermal=cfg.thermal,
        f_min=cfg.f_min, f_max=cfg.f_max, threshold=cfg.threshold, threads=cfg.n_threads,
    )
    summary = []
    for theta in thetas:
        branches, reports = results[theta]
        tag = "" if len(thetas) == 1 else f"_theta{theta:g}"
        write_zefoz_csv(reports, out / f"zefoz{tag}.csv")
        ids = {r.branch_id for r in reports}
        for br in branches:
            if br.branch_id in ids:
                write_branch_csv(br, out / f"branch{tag}_{br.branch_id}.csv")
        for r in reports:
            summary.append([f"{theta:.6f}", r.branch_id, f"{r.f0:.6f}", f"{r.b_star:.6f}",
                            f"{r.f_star:.6f}", f"{r.s2:.6e}"])
        if cfg.plot:
            plotting.plot_zefoz(branches, reports, out / f"zefoz{tag}.svg")
        _log(f"zefoz: theta {theta:g} deg, {len(branches)} branches, {len(reports)} turning points")
        for r in reports:
            _log(f"  branch {r.branch_id} (f0 {r.f0:.3f} MHz): B* = {r.b_star:.4f} mT, "
                 f"f* = {r.f_star:.3f} MHz, S2 = {r.s2:.4g} MHz/mT^2")
    if len(thetas) > 1:
        _write_csv(out / "zefoz_directions.csv",
                   ["theta_deg", "branch_id", "f0_MHz", "B_star_mT", "f_star_MHz", "S2_MHz_per_mT2"], summary)
    _log(f"zefoz: done in {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


# -- calibrate -----------------------------------------------------------------------------

FALLBACK_NOTE = (
    "fallback: without a usable DPPH line the field can be calibrated from the "
    "I=0 erbium line, f = g_eff mu_B B, with the g-factor of the nominal direction"
)


def cmd_calibrate(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    rows, skipped = [], []
    paths = cfg.trace_files or []
    if not paths:
        raise ConfigError("trace_files: no DPPH traces given")
    for path in paths:
        try:
            trace = read_trace(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"read traces: {exc}") from exc
        expected = dpph_frequency(trace.field_mT)
        data = trace.with_amplitudes(np.median(trace.amplitudes) - trace.amplitudes)
        try:
            lo, hi = expected - cfg.dpph_window, expected + cfg.dpph_window
            if np.count_nonzero((data.frequencies >= lo) & (data.frequencies <= hi)) < 5:
                raise ValueError(f"trace does not cover the expected DPPH frequency {expected:.3f} MHz")
            data = data.window(lo, hi)
            centres = detect_peaks(data)
            if not centres:
                raise ValueError("no DPPH dip found")
            c = max(centres, key=lambda x: np.interp(x, data.frequencies, data.amplitudes))
            fit = fit_lorentzian(data, (c - cfg.fit_halfwidth, c + cfg.fit_halfwidth))
            b_cal = calibrate_field(fit)
        except (ConvergenceError, ValueError) as exc:
            _log(f"warning: {path}: {exc}; file skipped")
            skipped.append({"file": str(path), "reason": str(exc)})
            continue
        rows.append((str(path), trace.field_mT, fit.center, fit.fwhm, b_cal))
    if skipped:
        _log(FALLBACK_NOTE)
    if len(rows) < 2:
        raise DataError(f"calibrate: {len(rows)} usable DPPH lines, need two; {FALLBACK_NOTE}")
    rows.sort(key=lambda r: (r[1], r[0]))
    cmap = fit_calibration_map([r[1] for r in rows], [r[4] for r in rows])
    _write_csv(out / "calibration.csv",
               ["file", "nominal_mT", "center_MHz", "fwhm_MHz", "calibrated_mT"],
               [[Path(f).name, f"{b:.6f}", f"{c:.6f}", f"{w:.6f}", f"{bc:.9f}"] for f, b, c, w, bc in rows])
    _write_json({"scale": cmap.scale, "offset_mT": cmap.offset, "n_points": len(rows),
                 "skipped": skipped, "metadata": {"created": _created()}},
                out / "calibration.json")
    _log(f"calibrate: B_cal = {cmap.scale:.8f} * B_nom + {cmap.offset:.3e} mT from {len(rows)} files")
    if cfg.plot:
        plotting.plot_calibration([r[1] for r in rows], [r[4] for r in rows], cmap, out / "calibration.svg")
    return EXIT_OK


# -- thermal -------------------------------------------------------------------------------


def predicted_polarisation(system, geometry, field, window, temperatures_K, t_min_K, threshold=1e-4):
    """P_s of the strongest modelled line in ``window`` at T_eff(T) and at T itself."""
    eig = solve(system, field)
    cat = transition_catalog(eig, system, geometry, None, window[0], window[1], threshold)
    if not cat:
        raise DataError(f"thermal: the model has no line in {window[0]}-{window[1]} MHz")
    line = max(cat, key=lambda r: r.matrix_element_sq)
    eff, raw = [], []
    for t in temperatures_K:
        t_eff = ThermalModel(t, t_min_K).effective
        eff.append(spin_polarisation(populations(eig, t_eff), *line.pair))
        raw.append(spin_polarisation(populations(eig, max(t, 1e-12)), *line.pair))
    return np.array(eff), np.array(raw), line


def cmd_thermal(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    window = _window(cfg.window)
    if window is None:
        raise ConfigError("window: give the line window as LO,HI (MHz)")
    traces = _read_traces(cfg.trace_files, "read traces")
    missing = [t.label for t in traces if t.temperature_mK is None]
    if missing:
        raise DataError(f"read traces: no '# temperature_mK=' in {missing}")
    reference = _read_traces([cfg.reference], "read reference")[0] if cfg.reference else None
    if reference is None:
        traces = [t.with_amplitudes(np.median(t.amplitudes) - t.amplitudes) for t in traces]
    points = _stage("peak areas", peak_area_vs_temperature,
                    [(t.temperature_mK / 1e3, t) for t in traces], window, reference)
    good = [p for p in points if p.normalized_area is not None]
    for p in points:
        if p.error:
            _log(f"warning: T = {p.temperature * 1e3:.3f} mK: {p.error}")
    if len(good) < 2:
        raise DataError("peak areas: fewer than two temperatures could be fitted")
    system = cfg.system()
    b = FieldVector.from_polar(traces[0].field_mT, cfg.b0_theta, cfg.b0_phi)
    temps = np.array([p.temperature for p in good])
    eff, raw, line = predicted_polarisation(system, cfg.geometry_obj(), b, window, temps,
                                            cfg.t_min_mk / 1e3, cfg.threshold)
    eff_n, raw_n = eff / eff.max(), raw / raw.max()
    meas = np.array([p.normalized_area for p in good])
    rows = [[f"{t * 1e3:.6f}", f"{p.area:.9e}", f"{m:.9f}", f"{e:.9f}", f"{r:.9f}"]
            for t, p, m, e, r in zip(temps, good, meas, eff_n, raw_n)]
    _write_csv(out / "thermal.csv", ["T_mK", "area", "normalized_area", "Ps_Teff_norm", "Ps_T_norm"], rows)
    mis_eff = float(np.max(np.abs(meas - eff_n)))
    mis_raw = float(np.max(np.abs(meas - raw_n)))
    _write_json({"line_MHz": line.frequency, "levels": list(line.pair), "t_min_mK": cfg.t_min_mk,
                 "max_misfit_Teff": mis_eff, "max_misfit_T": mis_raw,
                 "metadata": {"created": _created()}}, out / "thermal.json")
    _log(f"thermal: max misfit {mis_eff:.4f} with T_eff, {mis_raw:.4f} with sensor T")
    if cfg.plot:
        plotting.plot_thermal(np.column_stack([temps * 1e3, meas, eff_n, raw_n]), out / "thermal.svg")
    return EXIT_OK


# -- background ----------------------------------------------------------------------------


def cmd_background(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    traces = _read_traces(cfg.trace_files, "read traces")
    if cfg.exclude is not None:
        spec = cfg.exclude
        if isinstance(spec, str):
            try:
                with open(spec) as fh:
                    spec = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"exclude: cannot read {spec}: {exc}") from exc
        if not isinstance(spec, dict):
            raise ConfigError("exclude: expected an object mapping trace file names to [[lo, hi], ...]")
        windows = [[tuple(w) for w in spec.get(Path(t.label).name, spec.get(t.label, []))] for t in traces]
    else:
        system = cfg.system()
        windows = [
            _model_windows(system, cfg.geometry, cfg.b0_theta, cfg.b0_phi, t, cfg.exclude_margin,
                           cfg.thermal, cfg.threshold)
            for t in traces
        ]
    reference = _stage("background", build_reference, traces, windows)
    write_trace(reference, out / "reference.csv")
    subtracted = []
    for t in traces:
        s = subtract_background(t, reference)
        subtracted.append(s)
        write_trace(s, out / f"subtracted_{Path(t.label).stem}.csv")
    _log(f"background: reference from {len(traces)} traces written to {out / 'reference.csv'}")
    if cfg.plot:
        plotting.plot_background(traces, reference, subtracted, out / "background.svg")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "fit-zero-field": cmd_fit_zero_field,
    "zefoz": cmd_zefoz,
    "calibrate": cmd_calibrate,
    "thermal": cmd_thermal,
    "background": cmd_background,
}


def _add_common(p):
    g = p.add_argument_group("common")
    g.add_argument("--config", metavar="PATH", help="JSON file with default settings")
    g.add_argument("--preset", metavar="NAME", help=f"parameter preset ({', '.join(preset_names())})")
    g.add_argument("--spin-system", metavar="PATH", help="spin-system JSON (overrides --preset)")
    g.add_argument("--b0-theta", type=float, metavar="DEG", help="polar angle of B0 from c")
    g.add_argument("--b0-phi", type=float, metavar="DEG", help="azimuth of B0")
    g.add_argument("--geometry", choices=["faraday", "voigt"])
    g.add_argument("--b-start", type=float, metavar="mT")
    g.add_argument("--b-stop", type=float, metavar="mT")
    g.add_argument("--b-step", type=float, metavar="mT")
    g.add_argument("--f-min", type=float, metavar="MHz")
    g.add_argument("--f-max", type=float, metavar="MHz")
    g.add_argument("--t-mk", type=float, metavar="mK", help="sensor temperature")
    g.add_argument("--t-min-mk", type=float, metavar="mK", help="spin-temperature floor")
    g.add_argument("--threshold", type=float, help="relative intensity cut")
    g.add_argument("--out", metavar="DIR", help="output directory")
    g.add_argument("--seed", type=int, metavar="N")
    g.add_argument("--threads", type=int, metavar="N", help="worker threads (default: logical CPUs)")
    g.add_argument("--no-plot", dest="plot", action="store_const", const=False, help="skip SVG output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperfine-epr",
        description="Spin-Hamiltonian simulation and analysis of hyperfine EPR spectra.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="transition catalogue over a field scan")
    _add_common(p)
    p.add_argument("--traces", action="store_const", const=True, help="also write synthetic traces")
    p.add_argument("--df", type=float, metavar="MHz", help="trace frequency step")
    p.add_argument("--linewidth", type=float, metavar="MHz", help="Lorentzian FWHM of synthetic lines")
    p.add_argument("--noise", type=float, help="Gaussian noise sigma added to synthetic traces")
    p.add_argument("--depth-db", type=float, help="dip depth (dB) of a unit-intensity line")
    p.add_argument("--temperatures-mk", metavar="LIST", help="write traces at these sensor temperatures")
    p.add_argument("--compare", metavar="PRESET", help="tabulate line shifts against another preset")

    p = sub.add_parser("fit-zero-field", help="fit A_par, A_perp, P to zero-field peaks")
    _add_common(p)
    p.add_argument("--peaks", metavar="CSV", help="peak list (frequency_MHz[,weight,field_mT])")
    p.add_argument("--traces", dest="trace_files", nargs="+", metavar="CSV", help="trace files")
    p.add_argument("--reference", metavar="CSV", help="background reference trace")
    p.add_argument("--free", metavar="LIST", help=f"free parameters from {','.join(FREE_PARAMETERS)}")
    p.add_argument("--fix", metavar="NAME=VALUE", nargs="+", help="hold parameters at given values")
    p.add_argument("--initial-preset", metavar="NAME", help="starting values")
    p.add_argument("--misalignment", type=float, metavar="DEG")
    p.add_argument("--exclude-margin", type=float, metavar="MHz")
    p.add_argument("--peak-snr", type=float, help="detection prominence in units of the robust noise")

    p = sub.add_parser("zefoz", help="turning points of tracked branches")
    _add_common(p)
    p.add_argument("--thetas", metavar="LIST", help="batch of polar angles (deg)")
    p.add_argument("--f0", type=float, metavar="MHz", help="only branches starting near this frequency")
    p.add_argument("--f0-tolerance", type=float, metavar="MHz")

    p = sub.add_parser("calibrate", help="field calibration from DPPH traces")
    _add_common(p)
    p.add_argument("trace_files", nargs="*", metavar="TRACE")
    p.add_argument("--dpph-window", type=float, metavar="MHz")
    p.add_argument("--fit-halfwidth", type=float, metavar="MHz")

    p = sub.add_parser("thermal", help="peak area against temperature")
    _add_common(p)
    p.add_argument("trace_files", nargs="*", metavar="TRACE")
    p.add_argument("--window", metavar="LO,HI", help="frequency window of the line (MHz)")
    p.add_argument("--reference", metavar="CSV")

    p = sub.add_parser("background", help="stitch a reference trace and subtract it")
    _add_common(p)
    p.add_argument("trace_files", nargs="*", metavar="TRACE")
    p.add_argument("--exclude", metavar="JSON", help="exclusion windows per trace file")
    p.add_argument("--exclude-margin", type=float, metavar="MHz")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "trace_files", None) == []:
        args.trace_files = None
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except RankDeficientError as exc:
        _log(f"data error: fit: {exc}")
        return EXIT_DATA
    except ConvergenceError as exc:
        _log(f"convergence failure: {exc}")
        return EXIT_CONVERGENCE
    except (DataError, InconsistentDataError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except FieldScanError as exc:
        _log(f"data error: field scan: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
