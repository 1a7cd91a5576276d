"""SVG figures for the command-line reports.

Plots are conveniences; the CSV/JSON files written next to them are the
record.  Output is made reproducible by fixing the SVG id salt and dropping
the date from the metadata.
"""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LogNorm  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "svg.hashsalt": "hyperfine-epr",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=5.0, height=None, nrows=1, sharex=False):
    height = height or width * GOLDEN
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, 1, figsize=(width, height), sharex=sharex, squeeze=False)
    return fig, axes[:, 0]


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_branches(scan, path, title=None, f_min=None, f_max=None, extra=None):
    """Transition frequency vs field, marker colour = intensity (log scale).

    ``extra`` is an optional ``(fields, freqs, label)`` overlay, e.g. the I=0 line.
    """
    fields, freqs, inten = [], [], []
    for point in scan:
        for rec in point.catalog:
            fields.append(point.field.magnitude)
            freqs.append(rec.frequency)
            inten.append(rec.intensity)
    fig, (ax,) = _figure()
    if inten:
        inten = np.asarray(inten)
        pos = inten[inten > 0]
        norm = LogNorm(vmin=max(pos.min(), pos.max() * 1e-4), vmax=pos.max()) if pos.size else None
        sc = ax.scatter(fields, np.asarray(freqs) / 1e3, c=np.clip(inten, norm.vmin if norm else 0, None),
                        s=3, cmap="viridis", norm=norm, linewidths=0)
        fig.colorbar(sc, ax=ax, label="relative intensity")
    if extra is not None:
        xb, yf, label = extra
        ax.plot(xb, np.asarray(yf) / 1e3, "+", color="tab:blue", ms=4, label=label)
        ax.legend(loc="best", frameon=False)
    ax.set_xlabel("$B_0$ (mT)")
    ax.set_ylabel("frequency (GHz)")
    if f_min is not None and f_max is not None and np.isfinite(f_max):
        ax.set_ylim(f_min / 1e3, f_max / 1e3)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_zero_field_overlay(result, path, trace=None, title=None):
    """Measured peaks against the fitted line positions."""
    fig, (ax,) = _figure(6.0)
    if trace is not None:
        ax.plot(trace.frequencies / 1e3, trace.amplitudes, color="0.4", lw=0.6, label="data")
    top = 1.0 if trace is None else float(np.max(trace.amplitudes))
    for k, row in enumerate(result.assignment):
        color = "tab:red" if row["flagged"] else "k"
        ax.axvline(row["measured_mhz"] / 1e3, color=color, ls="--", lw=0.8,
                   label="measured" if k == 0 else None)
    sim = sorted({row["simulated_mhz"] for row in result.assignment if row["simulated_mhz"] is not None})
    ax.plot(np.asarray(sim) / 1e3, np.full(len(sim), 1.05 * top), "v", color="tab:orange", label="fit")
    ax.set_xlabel("frequency (GHz)")
    ax.set_ylabel("signal (arb.)")
    ax.set_yticks([] if trace is None else ax.get_yticks())
    ax.legend(loc="best", frameon=False)
    ax.set_title(title or f"rms {result.rms:.3g} MHz")
    return _save(fig, path)


def plot_zefoz(branches, reports, path):
    """Tracked branches with their turning points, and the slope S1 below."""
    fig, (ax, ax2) = _figure(5.0, 5.0, nrows=2, sharex=True)
    by_id = {r.branch_id: r for r in reports}
    for br in branches:
        style = dict(lw=1.2) if br.branch_id in by_id else dict(lw=0.5, color="0.7")
        line, = ax.plot(br.fields, br.frequencies, **style)
        if br.branch_id in by_id and len(br.fields) >= 3:
            s1 = np.gradient(br.frequencies, br.fields)
            ax2.plot(br.fields, s1, color=line.get_color(), lw=1.0)
    for rep in reports:
        ax.plot([rep.b_star], [rep.f_star], "o", mfc="none", color="tab:red")
        ax2.axvline(rep.b_star, color="tab:red", lw=0.5, ls=":")
    ax2.axhline(0.0, color="k", lw=0.5)
    ax.set_ylabel("frequency (MHz)")
    ax2.set_ylabel("$S_1$ (MHz/mT)")
    ax2.set_xlabel("$B_0$ (mT)")
    return _save(fig, path)


def plot_linewidth(summary, path):
    fig, (ax,) = _figure()
    t = np.asarray(summary.table, float)
    ax.plot(t[:, 0], t[:, 2], "o", ms=3)
    ax.axvline(summary.b_min, color="tab:red", lw=0.6, ls="--")
    ax.set_xlabel("$B_0$ (mT)")
    ax.set_ylabel("FWHM (MHz)")
    return _save(fig, path)


def plot_thermal(rows, path):
    """rows: (T_mK, measured normalised area, P_s(T_eff) normalised, P_s(T) normalised)."""
    rows = np.asarray(rows, dtype=float)
    fig, (ax,) = _figure()
    ax.semilogx(rows[:, 0], rows[:, 1], "o", ms=4, label="peak area")
    ax.semilogx(rows[:, 0], rows[:, 2], "-", label="$P_s(T_{\\rm eff})$")
    ax.semilogx(rows[:, 0], rows[:, 3], "--", label="$P_s(T)$")
    ax.set_xlabel("T (mK)")
    ax.set_ylabel("normalised")
    ax.legend(loc="best", frameon=False)
    return _save(fig, path)


def plot_calibration(nominal, calibrated, cmap, path):
    nominal = np.asarray(nominal, float)
    fig, (ax,) = _figure()
    ax.plot(nominal, calibrated, "o", ms=4, label="DPPH")
    xs = np.linspace(min(0.0, nominal.min()), nominal.max(), 50)
    ax.plot(xs, cmap(xs), "-", lw=0.8, label=f"{cmap.scale:.6g} B + {cmap.offset:.3g}")
    ax.set_xlabel("nominal field (mT)")
    ax.set_ylabel("calibrated field (mT)")
    ax.legend(loc="best", frameon=False)
    return _save(fig, path)


def plot_background(traces, reference, subtracted, path):
    fig, (ax, ax2) = _figure(6.0, 5.0, nrows=2, sharex=True)
    for tr in traces:
        ax.plot(tr.frequencies / 1e3, tr.amplitudes, lw=0.5, alpha=0.6)
    ax.plot(reference.frequencies / 1e3, reference.amplitudes, "k", lw=1.0, label="reference")
    ax.legend(loc="best", frameon=False)
    ax.set_ylabel("$|S_{21}|$ (dB)")
    for tr in subtracted:
        ax2.plot(tr.frequencies / 1e3, tr.amplitudes, lw=0.6)
    ax2.set_ylabel("reference - trace (dB)")
    ax2.set_xlabel("frequency (GHz)")
    return _save(fig, path)


def plot_comparison(fields, differences, path, labels=("", "")):
    fig, (ax,) = _figure()
    ax.plot(fields, differences, "-")
    ax.set_xlabel("$B_0$ (mT)")
    ax.set_ylabel("max $|\\Delta f|$ (MHz)")
    ax.set_title(f"{labels[0]} vs {labels[1]}")
    return _save(fig, path)
