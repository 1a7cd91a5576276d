"""Hamiltonian parameter extraction, peak assignment, symmetry-rule checks and field calibration."""
from __future__ import annotations

import enum
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .constants import A_J_MHZ, DPPH_G, G_J, MU_B_MHZ_PER_MT
from .lsq import ConvergenceError, RankDeficientError, levenberg_marquardt
from .spin import FieldVector, SpinSystem, solve, unit_vector
from .spectrum import PeakFit
from .transitions import (
    DEFAULT_THRESHOLD,
    ExcitationGeometry,
    GeometryKind,
    ThermalModel,
    transition_catalog,
)

FREE_PARAMETERS = ("a_parallel", "a_perp", "quadrupole_p", "g_parallel", "g_perp", "misalignment_deg")
UNITS = {
    "a_parallel": "MHz",
    "a_perp": "MHz",
    "quadrupole_p": "MHz",
    "g_parallel": "",
    "g_perp": "",
    "misalignment_deg": "deg",
}
DEFAULT_GATE_MHZ = 50.0
EXHAUSTIVE_LIMIT = 10


class FitConvergenceError(ConvergenceError):
    pass


class InconsistentDataError(ValueError):
    pass


# -- simulated line lists ----------------------------------------------------


@dataclass(frozen=True)
class SimLine:
    """A resolvable line: transitions closer than the merge tolerance, intensity-weighted."""

    frequency: float
    intensity: float
    pairs: tuple = ()


def merge_lines(records, tolerance=1.0) -> list[SimLine]:
    records = sorted(records, key=lambda r: r.frequency)
    groups: list[list] = []
    for r in records:
        if groups and r.frequency - groups[-1][-1].frequency <= tolerance:
            groups[-1].append(r)
        else:
            groups.append([r])
    lines = []
    for g in groups:
        w = np.array([r.intensity for r in g])
        f = np.array([r.frequency for r in g])
        freq = float(np.sum(w * f) / w.sum()) if w.sum() > 0 else float(f.mean())
        lines.append(SimLine(freq, float(w.sum()), tuple(r.pair for r in g)))
    return lines


def simulated_lines(
    system: SpinSystem,
    field: FieldVector,
    geometry: ExcitationGeometry,
    thermal: ThermalModel | None = None,
    f_min=0.0,
    f_max=np.inf,
    threshold=DEFAULT_THRESHOLD,
    merge_tolerance=1.0,
) -> list[SimLine]:
    eig = solve(system, field)
    cat = transition_catalog(eig, system, geometry, thermal, f_min, f_max, threshold)
    return merge_lines(cat, merge_tolerance)


# -- assignment ---------------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    """``pairs[k] = (measured_index, simulated_index or None, mismatch MHz or None)``."""

    pairs: tuple
    cost: float  # sum of squared mismatches over assigned peaks, MHz^2

    @property
    def mapping(self) -> dict:
        return {m: s for m, s, _ in self.pairs}

    @property
    def unassigned(self) -> list[int]:
        return [m for m, s, _ in self.pairs if s is None]


def _freq_and_intensity(items):
    freqs, ints = [], []
    for it in items:
        if hasattr(it, "frequency"):
            freqs.append(float(it.frequency))
            ints.append(float(getattr(it, "intensity", 1.0)))
        else:
            freqs.append(float(it))
            ints.append(1.0)
    return np.array(freqs), np.array(ints)


def _assignment_cost_matrix(measured, sim_f, sim_i):
    cost = (measured[:, None] - sim_f[None, :]) ** 2
    # Tie-break toward stronger simulated lines without disturbing real differences.
    top = sim_i.max() if sim_i.size and sim_i.max() > 0 else 1.0
    return cost + 1e-9 * (1.0 - sim_i[None, :] / top)


def _optimal_columns(cost):
    n, m = cost.shape
    if n <= EXHAUSTIVE_LIMIT and m <= EXHAUSTIVE_LIMIT:
        if n <= m:
            best, best_cols = math.inf, None
            for cols in itertools.permutations(range(m), n):
                c = cost[np.arange(n), cols].sum()
                if c < best:
                    best, best_cols = c, cols
            return list(range(n)), list(best_cols)
        best, best_rows = math.inf, None
        for rows in itertools.permutations(range(n), m):
            c = cost[list(rows), np.arange(m)].sum()
            if c < best:
                best, best_rows = c, rows
        order = np.argsort(best_rows)
        return [best_rows[k] for k in order], [int(k) for k in order]
    rows, cols = linear_sum_assignment(cost)
    return list(rows), list(cols)


def match_peaks(measured, simulated, gate=DEFAULT_GATE_MHZ) -> Assignment:
    """One-to-one assignment minimising the summed squared frequency mismatch.

    Exhaustive search for up to ten peaks on both sides, the Hungarian
    algorithm beyond.  Assigned pairs further apart than ``gate`` MHz are
    reported as unassigned.
    """
    meas = np.asarray([float(m) for m in measured])
    sim_f, sim_i = _freq_and_intensity(simulated)
    if meas.size == 0 or sim_f.size == 0:
        raise ValueError("both peak lists must be nonempty")
    rows, cols = _optimal_columns(_assignment_cost_matrix(meas, sim_f, sim_i))
    chosen = dict(zip(rows, cols))
    pairs = []
    total = 0.0
    for m in range(len(meas)):
        s = chosen.get(m)
        if s is None:
            pairs.append((m, None, None))
            continue
        delta = float(sim_f[s] - meas[m])
        if gate is not None and abs(delta) > gate:
            pairs.append((m, None, None))
            continue
        pairs.append((m, int(s), delta))
        total += delta * delta
    return Assignment(tuple(pairs), total)


# -- parameter fit --------------------------------------------------------------


@dataclass(frozen=True)
class MeasuredPeak:
    frequency: float  # MHz
    weight: float = 1.0
    field_mT: float = 0.0


@dataclass
class FitProblem:
    """Measured peaks plus the model settings used to simulate them.

    Fields are applied along ``(b0_theta_deg + misalignment_deg, b0_phi_deg)``.
    """

    measured_peaks: Sequence[MeasuredPeak]
    free_parameters: Sequence[str] = ("a_parallel", "a_perp", "quadrupole_p")
    baseline: SpinSystem = field(default_factory=SpinSystem)
    geometry_kind: str = "voigt"
    b0_theta_deg: float = 0.0
    b0_phi_deg: float = 0.0
    misalignment_deg: float = 0.0
    thermal: ThermalModel = field(default_factory=ThermalModel)
    f_min: float = 1800.0
    f_max: float = 3500.0
    threshold: float = DEFAULT_THRESHOLD
    merge_tolerance: float = 1.0
    gate: float = DEFAULT_GATE_MHZ

    def __post_init__(self):
        self.measured_peaks = [
            p if isinstance(p, MeasuredPeak) else MeasuredPeak(*np.atleast_1d(p)) for p in self.measured_peaks
        ]
        self.free_parameters = tuple(self.free_parameters)
        unknown = [p for p in self.free_parameters if p not in FREE_PARAMETERS]
        if unknown:
            raise ValueError(f"unknown free parameters {unknown}; choose from {FREE_PARAMETERS}")
        if len(set(self.free_parameters)) != len(self.free_parameters):
            raise ValueError("free parameters repeated")
        if not self.measured_peaks:
            raise ValueError("no peaks to fit")
        if any(not (p.weight >= 0) for p in self.measured_peaks):
            raise ValueError("peak weights must be nonnegative")
        if not any(p.weight > 0 for p in self.measured_peaks):
            raise ValueError("at least one peak needs a positive weight")
        if len(self.measured_peaks) < len(self.free_parameters):
            raise ValueError(
                f"{len(self.measured_peaks)} peaks cannot determine {len(self.free_parameters)} free parameters"
            )

    def system_for(self, values: dict) -> SpinSystem:
        changes = {k: v for k, v in values.items() if k != "misalignment_deg"}
        return self.baseline.with_params(**changes)

    def field_for(self, magnitude, misalignment_deg) -> FieldVector:
        return FieldVector.from_polar(magnitude, self.b0_theta_deg + misalignment_deg, self.b0_phi_deg)

    def geometry_for(self, misalignment_deg) -> ExcitationGeometry:
        direction = unit_vector(self.b0_theta_deg + misalignment_deg, self.b0_phi_deg)
        return ExcitationGeometry(tuple(direction), GeometryKind(self.geometry_kind))

    def initial_values(self, start: SpinSystem | None = None) -> dict:
        src = start or self.baseline
        out = {}
        for name in self.free_parameters:
            out[name] = self.misalignment_deg if name == "misalignment_deg" else getattr(src, name)
        return out


@dataclass
class FitResult:
    parameters: dict
    sigmas: dict
    residuals: list  # per measured peak, simulated - measured MHz (None if unassigned)
    assignment: list  # dicts: measured, simulated, pairs, residual, flagged
    converged: bool
    iterations: int
    reason: str
    rms: float  # MHz, weighted
    system: SpinSystem
    misalignment_deg: float = 0.0
    sign_ambiguous: bool = False
    cost_history: list = field(default_factory=list)
    null_direction: list | None = None

    @property
    def flagged(self) -> list:
        return [row for row in self.assignment if row["flagged"]]

    def to_json_dict(self, inputs: dict | None = None, created=None) -> dict:
        created = created or datetime.now(timezone.utc).isoformat(timespec="seconds")
        return {
            "parameters": [
                {
                    "name": k,
                    "value": self.parameters[k],
                    "sigma": self.sigmas.get(k),
                    "unit": UNITS.get(k, ""),
                }
                for k in self.parameters
            ],
            "spin_system": self.system.to_dict(),
            "residuals_mhz": self.residuals,
            "assignment": self.assignment,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "reason": self.reason,
                "rms_mhz": self.rms,
                "sign_ambiguous": self.sign_ambiguous,
            },
            "inputs": inputs or {},
            "metadata": {"created": created},
        }


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class _Model:
    """Residual evaluation for one FitProblem."""

    def __init__(self, problem: FitProblem):
        self.problem = problem
        self.names = list(problem.free_parameters)
        by_field: dict[float, list[int]] = {}
        for k, p in enumerate(problem.measured_peaks):
            by_field.setdefault(float(p.field_mT), []).append(k)
        self.groups = sorted(by_field.items())
        self.freqs = np.array([p.frequency for p in problem.measured_peaks])
        self.sqrt_w = np.sqrt([p.weight for p in problem.measured_peaks])

    def values(self, x) -> dict:
        return dict(zip(self.names, map(float, x)))

    def lines(self, x):
        v = self.values(x)
        system = self.problem.system_for(v)
        mis = v.get("misalignment_deg", self.problem.misalignment_deg)
        geometry = self.problem.geometry_for(mis)
        out = {}
        for b, _ in self.groups:
            out[b] = simulated_lines(
                system,
                self.problem.field_for(b, mis),
                geometry,
                self.problem.thermal,
                self.problem.f_min,
                self.problem.f_max,
                self.problem.threshold,
                self.problem.merge_tolerance,
            )
        return out

    def match(self, x, gate=None):
        """Per measured peak: (simulated line or None)."""
        lines = self.lines(x)
        chosen = [None] * len(self.freqs)
        for b, idx in self.groups:
            sims = lines[b]
            if not sims:
                continue
            a = match_peaks(self.freqs[idx], sims, gate=gate)
            for m, s, _ in a.pairs:
                if s is not None:
                    chosen[idx[m]] = sims[s]
        return chosen

    def residual_from(self, chosen):
        r = np.empty(len(self.freqs))
        for k, line in enumerate(chosen):
            delta = DEFAULT_GATE_MHZ if line is None else line.frequency - self.freqs[k]
            r[k] = self.sqrt_w[k] * delta
        return r

    def residual(self, x):
        return self.residual_from(self.match(x))

    def anchored_residual(self, x, anchors):
        """Residual keeping every peak on the line nearest its previous partner."""
        lines = self.lines(x)
        r = np.empty(len(self.freqs))
        for b, idx in self.groups:
            sims = np.array([s.frequency for s in lines[b]])
            for k in idx:
                if anchors[k] is None or sims.size == 0:
                    r[k] = self.sqrt_w[k] * DEFAULT_GATE_MHZ
                else:
                    j = int(np.argmin(np.abs(sims - anchors[k])))
                    r[k] = self.sqrt_w[k] * (sims[j] - self.freqs[k])
        return r


def _scales(values: dict) -> np.ndarray:
    defaults = {"quadrupole_p": 1.0, "misalignment_deg": 1.0}
    return np.array([max(abs(v), defaults.get(k, 1e-3)) for k, v in values.items()])


def _grid_search(model, x0, scale, span, points=None):
    """Best matched-cost point on a regular grid around ``x0``."""
    p = len(x0)
    if points is None:
        points = 7 if p <= 3 else (5 if p == 4 else 3)
    if points < 2:
        return x0
    steps = np.linspace(-span, span, points)
    half_width = np.array([span * max(abs(v), s) for v, s in zip(x0, scale)])
    best_x, best_cost = x0, float(np.sum(model.residual(x0) ** 2))
    for combo in itertools.product(range(points), repeat=p):
        x = x0 + half_width * steps[list(combo)] / span
        r = model.residual(x)
        c = float(r @ r)
        if c < best_cost:
            best_x, best_cost = x, c
    return best_x


def fit_parameters(
    problem: FitProblem,
    initial: SpinSystem | None = None,
    max_iter=500,
    xtol=1e-9,
    ftol=1e-12,
    fd_rel_step=1e-6,
    search_span=0.15,
    search_points=None,
    rank_rtol=1e-7,
) -> FitResult:
    """Damped least-squares fit of the free Hamiltonian parameters to the measured peaks.

    Lines reorder when the couplings move by several percent, so the start
    is first refined on a coarse grid spanning ``+-search_span`` (relative)
    around the initial guess; set ``search_span=0`` to skip this.

    Every trial point is re-simulated and re-assigned; the Jacobian is taken
    by central differences with the assignment held fixed.  If flipping the
    signs of A_par, A_perp and P together gives the same residual (always
    the case at zero field) the sign is chosen so that A_par/g_par has the
    sign of the free-ion A_J/g_J, and ``sign_ambiguous`` is set.

    ``rank_rtol`` sits above the round-off floor of the finite-difference
    Jacobian (about eps * f / step relative to its largest singular value),
    so a parameter the data cannot see is reported rather than fitted to noise.
    """
    model = _Model(problem)
    x0 = np.array(list(problem.initial_values(initial).values()), dtype=float)
    scale = _scales(problem.initial_values(initial))
    if search_span > 0:
        x0 = _grid_search(model, x0, scale, search_span, search_points)

    def jac(x):
        anchors = [None if line is None else line.frequency for line in model.match(x)]
        cols = []
        for k in range(len(x)):
            h = fd_rel_step * max(abs(x[k]), scale[k])
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            cols.append((model.anchored_residual(xp, anchors) - model.anchored_residual(xm, anchors)) / (2 * h))
        return np.column_stack(cols)

    try:
        res = levenberg_marquardt(
            model.residual, x0, jac=jac, x_scale=scale, xtol=xtol, ftol=ftol,
            max_iter=max_iter, names=model.names, rank_rtol=rank_rtol,
        )
    except ConvergenceError as exc:
        raise FitConvergenceError(str(exc), x=exc.x, cost=exc.cost, iterations=exc.iterations) from exc

    x = res.x
    sign_ambiguous = False
    flip = [n for n in ("a_parallel", "a_perp", "quadrupole_p") if n in model.names]
    if flip:
        xf = x.copy()
        for n in flip:
            xf[model.names.index(n)] *= -1
        # Fixed (non-free) couplings must flip too for the mirror solution to exist.
        fixed_nonzero = [
            n for n in ("a_parallel", "a_perp", "quadrupole_p")
            if n not in model.names and getattr(problem.baseline, n) != 0.0
        ]
        if not fixed_nonzero:
            rf = model.residual(xf)
            cost_f = float(rf @ rf)
            if abs(cost_f - res.cost) <= 1e-9 * max(res.cost, 1e-12) + 1e-18:
                sign_ambiguous = True
                values = model.values(x)
                a_par = values.get("a_parallel", problem.baseline.a_parallel)
                g_par = values.get("g_parallel", problem.baseline.g_parallel)
                if np.sign(a_par / g_par) != np.sign(A_J_MHZ / G_J):
                    x = xf

    values = model.values(x)
    # Unassigned peaks carry a constant penalty; keep them out of the error estimate.
    used = [k for k, line in enumerate(model.match(res.x)) if line is not None and model.sqrt_w[k] > 0]
    try:
        jac_used = res.jacobian[used]
        r_used = res.residuals[used]
        dof = max(len(used) - len(x), 1)
        cov = np.linalg.pinv(jac_used.T @ jac_used) * float(r_used @ r_used) / dof
        sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        sig = np.full(len(x), np.nan)
    sigmas = dict(zip(model.names, map(float, sig)))

    chosen = model.match(x)
    gated = model.match(x, gate=problem.gate)
    residuals = []
    rows = []
    for k, (line, kept) in enumerate(zip(chosen, gated)):
        if kept is None or line is None:
            residuals.append(None)
        else:
            residuals.append(float(line.frequency - model.freqs[k]))
    assigned = [r for r, p in zip(residuals, problem.measured_peaks) if r is not None and p.weight > 0]
    weights = [p.weight for r, p in zip(residuals, problem.measured_peaks) if r is not None and p.weight > 0]
    rms = float(np.sqrt(np.average(np.square(assigned), weights=weights))) if assigned else math.inf
    for k, (peak, r) in enumerate(zip(problem.measured_peaks, residuals)):
        line = gated[k]
        rows.append(
            {
                "measured_mhz": peak.frequency,
                "field_mT": peak.field_mT,
                "simulated_mhz": None if line is None else line.frequency,
                "pairs": [] if line is None else [list(p) for p in line.pairs],
                "residual_mhz": r,
                "flagged": r is None or (abs(r) > 2.0 * rms and abs(r) > 0.1),
            }
        )
    mis = values.get("misalignment_deg", problem.misalignment_deg)
    return FitResult(
        parameters=values,
        sigmas=sigmas,
        residuals=residuals,
        assignment=rows,
        converged=res.converged,
        iterations=res.iterations,
        reason=res.reason,
        rms=rms,
        system=problem.system_for(values),
        misalignment_deg=mis,
        sign_ambiguous=sign_ambiguous,
        cost_history=list(res.cost_history),
    )


def synthetic_peaks(
    system: SpinSystem,
    field_mT=0.0,
    geometry_kind="voigt",
    b0_theta_deg=0.0,
    f_min=1800.0,
    f_max=3500.0,
    threshold=DEFAULT_THRESHOLD,
    merge_tolerance=1.0,
    thermal: ThermalModel | None = None,
) -> list[MeasuredPeak]:
    """Peak list a perfect measurement of ``system`` would give."""
    geometry = ExcitationGeometry.from_angles(b0_theta_deg, 0.0, geometry_kind)
    b = FieldVector.from_polar(field_mT, b0_theta_deg)
    lines = simulated_lines(system, b, geometry, thermal, f_min, f_max, threshold, merge_tolerance)
    return [MeasuredPeak(line.frequency, 1.0, field_mT) for line in lines]


# -- symmetry rule --------------------------------------------------------------


@dataclass(frozen=True)
class SymmetryReport:
    ratio: float  # g_par * A_perp / (g_perp * A_par)
    a_over_g_parallel: float  # MHz
    a_over_g_perp: float  # MHz
    a_over_g_free_ion: float  # MHz
    deviation_parallel: float  # relative to the free-ion value
    deviation_perp: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def validate_symmetry_rules(system: SpinSystem) -> SymmetryReport:
    """Compare A/g along both axes with the free-ion A_J/g_J."""
    ref = A_J_MHZ / G_J
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (system.g_parallel * system.a_perp) / (system.g_perp * system.a_parallel)
        apar = system.a_parallel / system.g_parallel
        aperp = system.a_perp / system.g_perp
    return SymmetryReport(
        ratio=float(ratio),
        a_over_g_parallel=float(apar),
        a_over_g_perp=float(aperp),
        a_over_g_free_ion=float(ref),
        deviation_parallel=float((apar - ref) / ref),
        deviation_perp=float((aperp - ref) / ref),
    )


# -- field calibration ------------------------------------------------------------


def _dpph_slope():
    return DPPH_G * MU_B_MHZ_PER_MT


def calibrate_field(dpph_line) -> float:
    """Field in mT from the fitted DPPH resonance (PeakFit or centre frequency in MHz)."""
    center = dpph_line.center if isinstance(dpph_line, PeakFit) else float(dpph_line)
    if center < 0 or not np.isfinite(center):
        raise ValueError(f"DPPH centre must be a nonnegative frequency, got {center!r}")
    return center / _dpph_slope()


def dpph_frequency(field_mT) -> float:
    """Inverse of :func:`calibrate_field`: DPPH resonance (MHz) at a field (mT)."""
    return float(field_mT) * _dpph_slope()


@dataclass(frozen=True)
class CalibrationMap:
    scale: float
    offset: float  # mT

    def __call__(self, nominal):
        return self.scale * np.asarray(nominal) + self.offset


def fit_calibration_map(nominal, calibrated) -> CalibrationMap:
    nominal = np.asarray(nominal, float)
    calibrated = np.asarray(calibrated, float)
    if len(nominal) < 2:
        if len(nominal) == 1 and nominal[0] != 0:
            return CalibrationMap(float(calibrated[0] / nominal[0]), 0.0)
        raise ValueError("need at least two calibration points")
    slope, intercept = np.polyfit(nominal, calibrated, 1)
    return CalibrationMap(float(slope), float(intercept))


# -- misalignment -----------------------------------------------------------------


class NominalAxis(str, enum.Enum):
    PARALLEL_C = "parallel_c"
    PERP_C = "perp_c"


def effective_g(theta_deg, g_parallel, g_perp):
    t = np.radians(theta_deg)
    return np.sqrt((g_parallel * np.cos(t)) ** 2 + (g_perp * np.sin(t)) ** 2)


def extract_misalignment(
    lines,
    nominal_axis=NominalAxis.PARALLEL_C,
    g_parallel=3.137,
    g_perp=8.105,
) -> float:
    """Angle (deg) between B0 and its nominal axis from the I=0 line f = g_eff mu_B B.

    The slope through the origin gives g_eff, which is inverted for the
    polar angle from c.  For ``PERP_C`` the deviation from 90 deg is returned.
    """
    data = np.asarray(lines, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("need at least two (field, frequency) points")
    b, f = data[:, 0], data[:, 1]
    slope = float(np.dot(b, f) / np.dot(b, b))
    g_eff = slope / MU_B_MHZ_PER_MT
    lo, hi = sorted((abs(g_parallel), abs(g_perp)))
    tol = 1e-9 * hi
    if not lo - tol <= g_eff <= hi + tol:
        raise InconsistentDataError(
            f"slope {slope:.6g} MHz/mT gives g_eff={g_eff:.6g}, outside [{lo}, {hi}]"
        )
    if g_parallel == g_perp:
        theta = 0.0
    else:
        cos2 = (g_eff**2 - g_perp**2) / (g_parallel**2 - g_perp**2)
        theta = float(np.degrees(np.arccos(np.sqrt(np.clip(cos2, 0.0, 1.0)))))
    if NominalAxis(nominal_axis) is NominalAxis.PERP_C:
        return 90.0 - theta
    return theta
