"""Spectrum traces: synthesis, reference background, peak detection and Lorentzian fits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .lsq import ConvergenceError, RankDeficientError, levenberg_marquardt


@dataclass(frozen=True)
class SpectrumTrace:
    """Amplitude sampled on a strictly ascending frequency grid (MHz)."""

    field_mT: float
    frequencies: np.ndarray
    amplitudes: np.ndarray
    temperature_mK: float | None = None
    label: str = ""

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        a = np.asarray(self.amplitudes, dtype=float)
        if f.ndim != 1 or f.shape != a.shape:
            raise ValueError(f"frequencies {f.shape} and amplitudes {a.shape} must be equal-length 1-D arrays")
        if len(f) < 2:
            raise ValueError("a trace needs at least two samples")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequency grid must be strictly ascending")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "amplitudes", a)

    def with_amplitudes(self, amplitudes) -> "SpectrumTrace":
        return replace(self, amplitudes=np.asarray(amplitudes, dtype=float))

    def window(self, lo, hi) -> "SpectrumTrace":
        m = (self.frequencies >= lo) & (self.frequencies <= hi)
        return replace(self, frequencies=self.frequencies[m], amplitudes=self.amplitudes[m])

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.frequencies)))


@dataclass(frozen=True)
class PeakFit:
    center: float  # MHz
    fwhm: float  # MHz
    amplitude: float
    offset: float = 0.0
    residual_rms: float = 0.0
    field_mT: float | None = None
    iterations: int = 0
    sigmas: dict = field(default_factory=dict)

    @property
    def area(self) -> float:
        return 0.5 * math.pi * self.amplitude * self.fwhm


class LorentzianFitError(ConvergenceError):
    pass


def lorentzian(f, center, fwhm, amplitude=1.0, offset=0.0):
    """offset + amplitude * (G/2)^2 / ((f - center)^2 + (G/2)^2); peak height is ``amplitude``."""
    hw2 = (0.5 * fwhm) ** 2
    return offset + amplitude * hw2 / ((np.asarray(f) - center) ** 2 + hw2)


def synthesize(
    catalog,
    grid,
    linewidth=1.84,
    noise_seed=None,
    noise_sigma=0.0,
    field_mT=None,
) -> SpectrumTrace:
    """Sum of Lorentzians, one per transition, weighted by its intensity.

    ``linewidth`` is a FWHM in MHz: a scalar, one value per line, or a
    callable taking the record.  Gaussian noise of standard deviation
    ``noise_sigma`` is added from ``numpy.random.default_rng(noise_seed)``.
    """
    grid = np.asarray(grid, dtype=float)
    catalog = list(catalog)
    if callable(linewidth):
        widths = [float(linewidth(r)) for r in catalog]
    elif np.ndim(linewidth) == 0:
        widths = [float(linewidth)] * len(catalog)
    else:
        widths = [float(w) for w in linewidth]
        if len(widths) != len(catalog):
            raise ValueError("one linewidth per catalogue line expected")
    if any(not w > 0 for w in widths):
        raise ValueError("linewidths must be positive")
    amp = np.zeros_like(grid)
    for rec, w in zip(catalog, widths):
        amp += lorentzian(grid, rec.frequency, w, rec.intensity)
    if noise_sigma:
        amp = amp + np.random.default_rng(noise_seed).normal(0.0, noise_sigma, grid.shape)
    if field_mT is None:
        field_mT = catalog[0].field.magnitude if catalog else 0.0
    return SpectrumTrace(field_mT, grid, amp)


def _same_grid(a: SpectrumTrace, b: SpectrumTrace) -> bool:
    return a.frequencies.shape == b.frequencies.shape and np.array_equal(a.frequencies, b.frequencies)


def _gaps(mask, freqs):
    gaps = []
    k = 0
    while k < len(mask):
        if mask[k]:
            j = k
            while j + 1 < len(mask) and mask[j + 1]:
                j += 1
            gaps.append((float(freqs[k]), float(freqs[j])))
            k = j + 1
        else:
            k += 1
    return gaps


class ReferenceCoverageError(ValueError):
    def __init__(self, gaps):
        self.gaps = gaps
        text = ", ".join(f"[{lo:.6g}, {hi:.6g}] MHz" for lo, hi in gaps)
        super().__init__(f"no trace covers the grid in {text}")


def build_reference(traces: Sequence[SpectrumTrace], exclusion_windows=None, label="reference") -> SpectrumTrace:
    """Stitch a background trace from the absorption-free parts of several traces.

    ``exclusion_windows[k]`` lists ``(lo, hi)`` MHz intervals of trace ``k``
    that contain absorption.  Each grid point takes the median over the traces
    not excluded there.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    first = traces[0]
    for t in traces[1:]:
        if not _same_grid(first, t):
            raise ValueError("all traces must share one frequency grid")
    if exclusion_windows is None:
        exclusion_windows = [[] for _ in traces]
    if len(exclusion_windows) != len(traces):
        raise ValueError("one list of exclusion windows per trace expected")
    f = first.frequencies
    stack = np.vstack([t.amplitudes for t in traces])
    eligible = np.ones_like(stack, dtype=bool)
    for k, windows in enumerate(exclusion_windows):
        for lo, hi in windows:
            eligible[k] &= ~((f >= lo) & (f <= hi))
    uncovered = ~eligible.any(axis=0)
    if uncovered.any():
        raise ReferenceCoverageError(_gaps(uncovered, f))
    ref = np.nanmedian(np.where(eligible, stack, np.nan), axis=0)
    return SpectrumTrace(first.field_mT, f, ref, label=label)


def subtract_background(trace: SpectrumTrace, reference: SpectrumTrace) -> SpectrumTrace:
    """reference - trace: absorption dips become positive peaks."""
    if not _same_grid(trace, reference):
        raise ValueError("trace and reference grids differ")
    return replace(trace, amplitudes=reference.amplitudes - trace.amplitudes)


def robust_noise(trace: SpectrumTrace) -> float:
    """Noise standard deviation from the median absolute deviation of first differences."""
    d = np.diff(trace.amplitudes)
    mad = np.median(np.abs(d - np.median(d)))
    return float(1.4826 * mad / math.sqrt(2.0))


def detect_peaks(trace: SpectrumTrace, min_prominence=None, min_separation=1.0) -> list[float]:
    """Centres (MHz, ascending) of local maxima with enough prominence.

    Maxima closer than ``min_separation`` MHz are merged, keeping the
    taller one.  The default prominence is five times :func:`robust_noise`.
    """
    y = trace.amplitudes
    f = trace.frequencies
    if min_prominence is None:
        noise = robust_noise(trace)
        if noise == 0.0:
            noise = 1e-9 * max(float(np.ptp(y)), 1e-300)
        min_prominence = 5.0 * noise
    idx, _ = find_peaks(y, prominence=min_prominence)
    if len(idx) == 0:
        return []
    kept = []
    for k in sorted(idx, key=lambda k: -y[k]):
        if all(abs(f[k] - f[j]) >= min_separation for j in kept):
            kept.append(k)
    centres = []
    for k in sorted(kept):
        c = f[k]
        if 0 < k < len(f) - 1:
            # Parabola through the three samples around the maximum.
            y0, y1, y2 = y[k - 1], y[k], y[k + 1]
            x0, x1, x2 = f[k - 1], f[k], f[k + 1]
            denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
            a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
            b = (x2**2 * (y0 - y1) + x1**2 * (y2 - y0) + x0**2 * (y1 - y2)) / denom
            if a < 0:
                vertex = -b / (2 * a)
                if x0 <= vertex <= x2:
                    c = vertex
        centres.append(float(c))
    return centres


def _initial_guess(f, y):
    offset = float(np.median(np.concatenate([y[: max(2, len(y) // 10)], y[-max(2, len(y) // 10):]])))
    k = int(np.argmax(y))
    amplitude = float(y[k] - offset)
    half = offset + 0.5 * amplitude
    above = np.nonzero(y >= half)[0]
    width = float(f[above[-1]] - f[above[0]]) if len(above) > 1 else float(np.median(np.diff(f)) * 2)
    return offset, amplitude, float(f[k]), max(width, float(np.median(np.diff(f))))


def fit_lorentzian(
    trace: SpectrumTrace,
    window=None,
    initial: PeakFit | None = None,
    max_iter=200,
    xtol=1e-8,
) -> PeakFit:
    """Least-squares Lorentzian plus constant offset inside ``window`` (MHz interval)."""
    t = trace if window is None else trace.window(*window)
    f, y = t.frequencies, t.amplitudes
    if len(f) < 5:
        raise ValueError(f"fit window holds {len(f)} samples; at least 5 are needed")
    if initial is None:
        offset, amplitude, center, width = _initial_guess(f, y)
    else:
        offset, amplitude, center, width = initial.offset, initial.amplitude, initial.center, initial.fwhm
    # Centre is fitted as a shift from the window midpoint to keep the relative step meaningful.
    mid = 0.5 * (f[0] + f[-1])
    span = max(float(np.ptp(y)), 1e-300)
    step = float(np.median(np.diff(f)))

    def resid(p):
        return lorentzian(f, mid + p[2], p[3], p[1], p[0]) - y

    x0 = [offset, amplitude, center - mid, width]
    scale = [span, span, max(abs(width), step), max(abs(width), step)]
    try:
        res = levenberg_marquardt(
            resid, x0, x_scale=scale, xtol=xtol, max_iter=max_iter,
            names=["offset", "amplitude", "center", "fwhm"],
        )
    except RankDeficientError as exc:
        raise LorentzianFitError(f"Lorentzian fit is degenerate: {exc}", x=np.array(x0)) from exc
    except ConvergenceError as exc:
        raise LorentzianFitError(str(exc), x=exc.x, cost=exc.cost, iterations=exc.iterations) from exc
    off, amp, dc, gamma = res.x
    rms = math.sqrt(res.cost / len(f))
    try:
        cov = res.covariance()
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
        sigmas = dict(zip(["offset", "amplitude", "center", "fwhm"], map(float, sig)))
    except np.linalg.LinAlgError:
        sigmas = {}
    return PeakFit(
        center=float(mid + dc),
        fwhm=float(abs(gamma)),
        amplitude=float(amp),
        offset=float(off),
        residual_rms=rms,
        field_mT=trace.field_mT,
        iterations=res.iterations,
        sigmas=sigmas,
    )


@dataclass(frozen=True)
class AreaPoint:
    temperature: float  # K
    area: float | None
    normalized_area: float | None
    fit: PeakFit | None = None
    error: str | None = None


def peak_area_vs_temperature(traces, window, reference=None) -> list[AreaPoint]:
    """Lorentzian area of one line per temperature, normalised to the largest.

    ``traces`` is a sequence of ``(temperature_K, SpectrumTrace)``.  When a
    ``reference`` is given it is subtracted first.  Failed fits are kept as
    points carrying an error message.
    """
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError("need traces at two or more temperatures")
    points = []
    for temp, trace in traces:
        data = subtract_background(trace, reference) if reference is not None else trace
        try:
            fit = fit_lorentzian(data, window)
        except (ConvergenceError, ValueError) as exc:
            points.append(AreaPoint(float(temp), None, None, None, str(exc)))
            continue
        points.append(AreaPoint(float(temp), fit.area, None, fit))
    areas = [p.area for p in points if p.area is not None]
    top = max(areas) if areas else None
    out = []
    for p in points:
        norm = p.area / top if (p.area is not None and top) else None
        out.append(replace(p, normalized_area=norm))
    return sorted(out, key=lambda p: p.temperature)


def read_trace(path) -> SpectrumTrace:
    """Read a trace CSV (``# field_mT=``, optional ``# temperature_mK=``, then frequency_hz,amplitude_db)."""
    meta = {}
    freqs, amps = [], []
    header_seen = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, _, value = s[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                cols = [c.strip() for c in s.split(",")]
                if cols != ["frequency_hz", "amplitude_db"]:
                    raise ValueError(f"{path}:{lineno}: expected header 'frequency_hz,amplitude_db', got {s!r}")
                header_seen = True
                continue
            try:
                hz, db = (float(v) for v in s.split(","))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad data row {s!r}") from exc
            freqs.append(hz / 1e6)
            amps.append(db)
    if "field_mT" not in meta:
        raise ValueError(f"{path}: missing '# field_mT=' line")
    if not header_seen:
        raise ValueError(f"{path}: missing header line")
    temp = float(meta["temperature_mK"]) if "temperature_mK" in meta else None
    return SpectrumTrace(float(meta["field_mT"]), freqs, amps, temperature_mK=temp, label=str(path))


def write_trace(trace: SpectrumTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# field_mT={trace.field_mT:.6f}\n")
        if trace.temperature_mK is not None:
            fh.write(f"# temperature_mK={trace.temperature_mK:.6f}\n")
        fh.write("frequency_hz,amplitude_db\n")
        for f, a in zip(trace.frequencies, trace.amplitudes):
            fh.write(f"{f * 1e6:.3f},{a:.12g}\n")


PEAK_HEADER = ["field_mT", "center_MHz", "fwhm_MHz", "area", "residual_rms"]


def write_peak_report(fits: Sequence[PeakFit], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PEAK_HEADER)
        for p in sorted(fits, key=lambda p: ((p.field_mT or 0.0), p.center)):
            w.writerow([
                f"{(p.field_mT or 0.0):.6f}", f"{p.center:.6f}", f"{p.fwhm:.6f}",
                f"{p.area:.6e}", f"{p.residual_rms:.6e}",
            ])
