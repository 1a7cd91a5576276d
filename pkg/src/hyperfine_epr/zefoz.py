"""Branch tracking across field scans, field sensitivities and ZEFOZ turning points."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .spin import (
    DEGENERACY_TOL_MHZ,
    FieldVector,
    SpinSystem,
    assemble_hamiltonian,
    degenerate_blocks,
    field_derivative,
    solve,
)
from .spectrum import PeakFit

OVERLAP_THRESHOLD = 0.7


@dataclass
class TransitionBranch:
    """One level pair followed through a scan by eigenvector continuity."""

    branch_id: int
    fields: np.ndarray  # mT, strictly increasing
    frequencies: np.ndarray  # MHz
    intensities: np.ndarray
    levels: list  # (i, f) sorted-level indices at every point
    vectors: list = field(default_factory=list)  # (v_i, v_f) at every point
    min_gaps: np.ndarray | None = None  # MHz, distance of either level to any other level
    direction: np.ndarray | None = None  # unit field direction of the scan
    system: SpinSystem | None = None
    parent: int | None = None  # branch this one continues after a split
    note: str = ""

    def __len__(self):
        return len(self.fields)

    @property
    def f0(self) -> float:
        return float(self.frequencies[0])

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.fields))) if len(self.fields) > 1 else math.nan


def _level_map(prev_states, states):
    overlap = np.abs(prev_states.conj().T @ states)
    rows, cols = linear_sum_assignment(-overlap)
    mapping = np.empty(len(rows), dtype=int)
    mapping[rows] = cols
    return mapping, overlap[rows, cols][np.argsort(rows)]


def _min_gap(energies, k):
    others = np.delete(energies, k)
    return float(np.min(np.abs(others - energies[k]))) if others.size else math.inf


def track_branches(
    scan,
    pairs=None,
    threshold=OVERLAP_THRESHOLD,
    system: SpinSystem | None = None,
) -> list[TransitionBranch]:
    """Follow level pairs through a field scan.

    ``scan`` is the output of :func:`transitions.field_scan` (objects with
    ``field``, ``eigensystem`` and ``catalog``).  Levels are carried from one
    point to the next by maximal eigenvector overlap, so lines keep their
    identity through crossings.  When either level's overlap drops below
    ``threshold`` the branch is closed and a new one (with ``parent`` set)
    continues from the next point.

    By default the pairs present in the first catalogue are followed.
    """
    scan = list(scan)
    if not scan:
        raise ValueError("empty scan")
    mags = np.array([p.field.magnitude for p in scan])
    if np.any(np.diff(mags) <= 0):
        raise ValueError("scan fields must be strictly increasing in magnitude")
    if pairs is None:
        pairs = [r.pair for r in scan[0].catalog]
    nonzero = [p.field.as_array() for p in scan if p.field.magnitude > 0]
    direction = nonzero[-1] / np.linalg.norm(nonzero[-1]) if nonzero else None

    intensity_at = [{r.pair: r.intensity for r in p.catalog} for p in scan]
    maps, overlaps = [], []
    for a, b in zip(scan[:-1], scan[1:]):
        m, o = _level_map(a.eigensystem.states, b.eigensystem.states)
        maps.append(m)
        overlaps.append(o)

    branches: list[TransitionBranch] = []
    next_id = 0

    def new_branch(start, pair, parent=None, note=""):
        nonlocal next_id
        rec = dict(start=start, pair=pair, parent=parent, note=note, id=next_id, pts=[])
        next_id += 1
        return rec

    def finish(rec):
        pts = rec["pts"]
        ks = [k for k, _ in pts]
        lv = [pr for _, pr in pts]
        eigs = [scan[k].eigensystem for k in ks]
        branches.append(
            TransitionBranch(
                branch_id=rec["id"],
                fields=mags[ks],
                frequencies=np.array([e.energies[f] - e.energies[i] for e, (i, f) in zip(eigs, lv)]),
                intensities=np.array([intensity_at[k].get(pr, 0.0) for k, pr in zip(ks, lv)]),
                levels=lv,
                vectors=[(e.states[:, i].copy(), e.states[:, f].copy()) for e, (i, f) in zip(eigs, lv)],
                min_gaps=np.array(
                    [min(_min_gap(e.energies, i), _min_gap(e.energies, f)) for e, (i, f) in zip(eigs, lv)]
                ),
                direction=direction,
                system=system,
                parent=rec["parent"],
                note=rec["note"],
            )
        )

    for pair in pairs:
        rec = new_branch(0, tuple(pair))
        cur = tuple(pair)
        rec["pts"].append((0, cur))
        for k, (m, o) in enumerate(zip(maps, overlaps)):
            nxt = (int(m[cur[0]]), int(m[cur[1]]))
            worst = min(o[cur[0]], o[cur[1]])
            if worst < threshold:
                finish(rec)
                note = (
                    f"split between {mags[k]:.6g} and {mags[k + 1]:.6g} mT: "
                    f"overlap {worst:.3f} < {threshold}"
                )
                rec = new_branch(k + 1, nxt, parent=rec["id"], note=note)
            rec["pts"].append((k + 1, nxt))
            cur = nxt
        finish(rec)
    branches.sort(key=lambda b: b.branch_id)
    return branches


def branches_near(branches, f0, tolerance=10.0) -> list[TransitionBranch]:
    """Unsplit branches whose first frequency lies within ``tolerance`` MHz of ``f0``."""
    return [b for b in branches if b.parent is None and abs(b.f0 - f0) <= tolerance]


# -- derivatives ----------------------------------------------------------------


def _three_point(x, y):
    """First and second derivative at interior samples of a (possibly uneven) grid."""
    h1 = x[1:-1] - x[:-2]
    h2 = x[2:] - x[1:-1]
    y0, y1, y2 = y[:-2], y[1:-1], y[2:]
    d1 = (-h2 / (h1 * (h1 + h2))) * y0 + ((h2 - h1) / (h1 * h2)) * y1 + (h1 / (h2 * (h1 + h2))) * y2
    d2 = 2 * (y0 / (h1 * (h1 + h2)) - y1 / (h1 * h2) + y2 / (h2 * (h1 + h2)))
    return d1, d2


def branch_derivatives(branch: TransitionBranch):
    """(fields, S1, S2) at the interior points of a branch."""
    if len(branch) < 3:
        raise ValueError("need at least three points for central differences")
    d1, d2 = _three_point(branch.fields, branch.frequencies)
    return branch.fields[1:-1], d1, d2


@dataclass(frozen=True)
class Sensitivity:
    s1: float  # MHz/mT
    s2: float  # MHz/mT^2
    near_degenerate: bool = False

    def __iter__(self):
        return iter((self.s1, self.s2))


def sensitivity(branch: TransitionBranch, field_mT) -> Sensitivity:
    """Finite-difference S1 and S2 at ``field_mT`` (linear interpolation between samples)."""
    b, d1, d2 = branch_derivatives(branch)
    if not b[0] - 1e-12 <= field_mT <= b[-1] + 1e-12:
        raise ValueError(
            f"field {field_mT} mT is within one step of the branch ends "
            f"[{branch.fields[0]}, {branch.fields[-1]}]"
        )
    s1 = float(np.interp(field_mT, b, d1))
    s2 = float(np.interp(field_mT, b, d2))
    flag = False
    if branch.min_gaps is not None:
        k = int(np.argmin(np.abs(branch.fields - field_mT)))
        resolution = abs(s1) * branch.step + 1e-9
        flag = bool(branch.min_gaps[k] < 10 * max(resolution, DEGENERACY_TOL_MHZ))
    return Sensitivity(s1, s2, flag)


def _level_slope(system, field, direction, reference_vector):
    """dE/dB for the level best overlapping ``reference_vector``, with degenerate blocks handled."""
    eig = solve(system, field)
    dh = field_derivative(system, direction)
    overlap = np.abs(eig.states.conj().T @ reference_vector)
    k = int(np.argmax(overlap))
    for block in degenerate_blocks(eig.energies):
        if block.start <= k < block.stop:
            vb = eig.states[:, block]
            sub = vb.conj().T @ dh @ vb
            slopes, rot = np.linalg.eigh(0.5 * (sub + sub.conj().T))
            vecs = vb @ rot
            j = int(np.argmax(np.abs(vecs.conj().T @ reference_vector)))
            return float(slopes[j]), eig, vecs[:, j]
    raise AssertionError("level not found in any block")


def hellmann_feynman(system: SpinSystem, field: FieldVector, direction, vec_i, vec_f) -> float:
    """Analytic dF/dB = <f|dH/dB|f> - <i|dH/dB|i> for the levels nearest the given vectors."""
    si, _, _ = _level_slope(system, field, direction, vec_i)
    sf, _, _ = _level_slope(system, field, direction, vec_f)
    return sf - si


def branch_hellmann_feynman(branch: TransitionBranch, system: SpinSystem | None = None) -> np.ndarray:
    """Hellmann-Feynman S1 at every sample of a simulated branch."""
    system = system or branch.system
    if system is None or branch.direction is None:
        raise ValueError("Hellmann-Feynman needs the spin system and scan direction")
    out = []
    for b, (vi, vf) in zip(branch.fields, branch.vectors):
        out.append(hellmann_feynman(system, FieldVector.along(branch.direction, b), branch.direction, vi, vf))
    return np.array(out)


# -- turning points -------------------------------------------------------------


@dataclass(frozen=True)
class ZefozReport:
    branch_id: int
    f0: float  # MHz, first sample of the branch
    b_star: float  # mT
    f_star: float  # MHz
    s1_ends: tuple  # (S1 at first interior sample, S1 at last interior sample)
    s2: float  # MHz/mT^2 at b_star
    s1_residual: float  # |S1| left at b_star


def _sign_changes(s1):
    idx = []
    for k in range(len(s1) - 1):
        if s1[k] == 0.0 or np.sign(s1[k]) != np.sign(s1[k + 1]) and s1[k + 1] != 0.0:
            idx.append(k)
    return idx


def _exact_state(system, direction, b, vi, vf):
    field = FieldVector.along(direction, b)
    si, eig, wi = _level_slope(system, field, direction, vi)
    sf, _, wf = _level_slope(system, field, direction, vf)
    h = assemble_hamiltonian(system, field)
    freq = float(np.real(wf.conj() @ h @ wf) - np.real(wi.conj() @ h @ wi))
    return sf - si, freq, wi, wf


def find_zefoz(
    branch: TransitionBranch,
    tolerance=1e-3,
    system: SpinSystem | None = None,
    max_bisections=200,
) -> list[ZefozReport]:
    """Turning points (S1 = 0) of a branch.

    Sign changes of the finite-difference S1 are bracketed; with a spin
    system available they are refined by bisection on the analytic slope of
    re-diagonalised levels until ``|S1| < tolerance`` (MHz/mT).  Without one
    (measured branches) a parabola through the samples around the bracket
    is used.
    """
    if len(branch) < 5:
        raise ValueError("need at least five branch points")
    system = system or branch.system
    b, d1, _ = branch_derivatives(branch)
    ends = (float(d1[0]), float(d1[-1]))
    reports = []
    for k in _sign_changes(d1):
        lo, hi = float(b[k]), float(b[k + 1])
        if system is not None and branch.direction is not None and branch.vectors:
            j = k + 1  # index into branch samples matching interior point k
            vi, vf = branch.vectors[j]
            s_lo, _, vi, vf = _exact_state(system, branch.direction, lo, vi, vf)
            s_hi, _, _, _ = _exact_state(system, branch.direction, hi, vi, vf)
            mid, s_mid, f_mid = lo, s_lo, None
            for _ in range(max_bisections):
                mid = 0.5 * (lo + hi)
                s_mid, f_mid, wi, wf = _exact_state(system, branch.direction, mid, vi, vf)
                if abs(s_mid) < tolerance:
                    break
                if np.sign(s_mid) == np.sign(s_lo):
                    lo, s_lo, vi, vf = mid, s_mid, wi, wf
                else:
                    hi = mid
            h = 1e-3
            sp, _, _, _ = _exact_state(system, branch.direction, mid + h, vi, vf)
            sm, _, _, _ = _exact_state(system, branch.direction, mid - h, vi, vf)
            reports.append(
                ZefozReport(branch.branch_id, branch.f0, mid, f_mid, ends, (sp - sm) / (2 * h), abs(s_mid))
            )
        else:
            j = k + 1
            sl = slice(max(j - 1, 0), max(j - 1, 0) + 3)
            x, y = branch.fields[sl], branch.frequencies[sl]
            if len(x) < 3:
                continue
            a2, a1, a0 = np.polyfit(x, y, 2)
            if a2 == 0:
                continue
            bs = -a1 / (2 * a2)
            reports.append(
                ZefozReport(branch.branch_id, branch.f0, float(bs), float(np.polyval([a2, a1, a0], bs)),
                            ends, float(2 * a2), 0.0)
            )
    return reports


def scan_directions(system, thetas_deg, phi_deg=0.0, b_start=0.0, b_stop=30.0, b_step=0.1,
                    f0=None, f0_tolerance=10.0, geometry_kind="voigt", thermal=None,
                    f_min=0.0, f_max=np.inf, threshold=1e-4, tolerance=1e-3, threads=1):
    """Independent 1-D ZEFOZ searches for several polar angles of the field.

    Returns ``{theta: (branches, reports)}``.  Only branches starting within
    ``f0_tolerance`` of ``f0`` are searched when ``f0`` is given.
    """
    from .transitions import ExcitationGeometry, field_line, field_scan

    out = {}
    for theta in thetas_deg:
        geometry = ExcitationGeometry.from_angles(theta, phi_deg, geometry_kind)
        scan = field_scan(
            system, field_line(b_start, b_stop, b_step, theta, phi_deg), geometry, thermal,
            f_min, f_max, threshold, threads=threads,
        )
        branches = track_branches(scan, system=system)
        if f0 is not None:
            branches = branches_near(branches, f0, f0_tolerance)
        reports = []
        for br in branches:
            if len(br) >= 5:
                reports.extend(find_zefoz(br, tolerance))
        out[theta] = (branches, reports)
    return out


# -- linewidth -----------------------------------------------------------------------


@dataclass(frozen=True)
class LinewidthSummary:
    table: list  # (field mT, fwhm MHz), ascending field
    b_min: float | None
    gamma_min: float | None
    flat: bool
    offset_from_zefoz: float | None = None


def linewidth_vs_field(points, zefoz: ZefozReport | float | None = None, flat_rtol=1e-9) -> LinewidthSummary:
    """Locate the linewidth minimum with a parabola through the three narrowest points.

    ``points`` holds ``(field_mT, PeakFit)`` or ``(field_mT, fwhm)``; entries
    whose fit is ``None`` are skipped.
    """
    table = []
    for b, fit in points:
        if fit is None:
            continue
        gamma = fit.fwhm if isinstance(fit, PeakFit) else float(fit)
        if np.isfinite(gamma):
            table.append((float(b), float(gamma)))
    table.sort()
    if len(table) < 3:
        raise ValueError(f"need at least three valid linewidths, got {len(table)}")
    gammas = np.array([g for _, g in table])
    if np.ptp(gammas) <= flat_rtol * max(abs(gammas).max(), 1e-300):
        return LinewidthSummary(table, None, None, True, None)
    order = np.argsort(gammas, kind="stable")[:3]
    x = np.array([table[k][0] for k in order])
    y = gammas[order]
    a2, a1, a0 = np.polyfit(x, y, 2)
    if a2 <= 0:
        k = int(order[0])
        b_min, g_min = table[k]
    else:
        b_min = -a1 / (2 * a2)
        g_min = float(np.polyval([a2, a1, a0], b_min))
    offset = None
    if zefoz is not None:
        b_star = zefoz.b_star if isinstance(zefoz, ZefozReport) else float(zefoz)
        offset = abs(b_min - b_star)
    return LinewidthSummary(table, float(b_min), float(g_min), False, offset)


ZEFOZ_HEADER = ["branch_id", "f0_MHz", "B_star_mT", "f_star_MHz", "S2_MHz_per_mT2", "S1_residual"]
BRANCH_HEADER = ["field_mT", "f_center_MHz", "fwhm_MHz"]


def write_zefoz_csv(reports: Sequence[ZefozReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ZEFOZ_HEADER)
        for r in sorted(reports, key=lambda r: (r.f0, r.b_star, r.branch_id)):
            w.writerow([r.branch_id, f"{r.f0:.6f}", f"{r.b_star:.6f}", f"{r.f_star:.6f}",
                        f"{r.s2:.6e}", f"{r.s1_residual:.3e}"])


def write_branch_csv(branch: TransitionBranch, path, fwhm=None) -> None:
    """Centre frequency (and linewidth where known) against field."""
    widths = dict(fwhm or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BRANCH_HEADER)
        for b, f in zip(branch.fields, branch.frequencies):
            g = widths.get(round(float(b), 9))
            w.writerow([f"{b:.6f}", f"{f:.6f}", "" if g is None else f"{g:.6f}"])
