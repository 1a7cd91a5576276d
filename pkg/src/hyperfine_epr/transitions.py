"""Transition catalogues: drive matrix elements, thermal populations, selection-rule labels."""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .constants import KELVIN_PER_MHZ
from .spin import (
    DEGENERACY_TOL_MHZ,
    EigenSystem,
    FieldVector,
    SpinSystem,
    operators_for,
    solve,
    unit_vector,
)

DEFAULT_THRESHOLD = 1e-4
MIXED = "mixed"


class GeometryKind(str, enum.Enum):
    FARADAY = "faraday"
    VOIGT = "voigt"
    CUSTOM = "custom"


def _perpendicular_pair(direction):
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(u)))] = 1.0
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    e2 /= np.linalg.norm(e2)
    # Remove round-off so that the dot product with u is zero to machine precision.
    e1 -= np.dot(e1, u) * u
    e2 -= np.dot(e2, u) * u
    return e1 / np.linalg.norm(e1), e2 / np.linalg.norm(e2)


@dataclass(frozen=True)
class ExcitationGeometry:
    """Static-field direction and the sampled drive-field (B1) directions.

    Faraday-like sampling uses two orthogonal unit vectors perpendicular to
    B0; Voigt-like adds the unit vector along B0.  ``CUSTOM`` keeps whatever
    drive directions were passed in.
    """

    b0_direction: tuple = (0.0, 0.0, 1.0)
    geometry_kind: GeometryKind = GeometryKind.FARADAY
    b1_directions: tuple = ()

    def __post_init__(self):
        u = np.asarray(self.b0_direction, dtype=float)
        norm = np.linalg.norm(u)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("b0_direction must be a finite nonzero vector")
        u = u / norm
        object.__setattr__(self, "b0_direction", tuple(u))
        kind = GeometryKind(self.geometry_kind)
        object.__setattr__(self, "geometry_kind", kind)
        if kind is GeometryKind.CUSTOM:
            dirs = tuple(tuple(np.asarray(d, float) / np.linalg.norm(d)) for d in self.b1_directions)
        else:
            e1, e2 = _perpendicular_pair(u)
            dirs = (tuple(e1), tuple(e2))
            if kind is GeometryKind.VOIGT:
                dirs = dirs + (tuple(u),)
        if not dirs:
            raise ValueError("geometry has no drive-field directions to sample")
        object.__setattr__(self, "b1_directions", dirs)

    @classmethod
    def from_angles(cls, theta_deg=0.0, phi_deg=0.0, kind="faraday") -> "ExcitationGeometry":
        return cls(tuple(unit_vector(theta_deg, phi_deg)), GeometryKind(kind))

    @classmethod
    def with_drive(cls, b1_directions, b0_direction=(0.0, 0.0, 1.0)) -> "ExcitationGeometry":
        return cls(tuple(b0_direction), GeometryKind.CUSTOM, tuple(map(tuple, b1_directions)))

    def is_perpendicular(self, b1) -> bool:
        return abs(float(np.dot(b1, self.b0_direction))) < 1e-12

    @property
    def perpendicular_directions(self) -> tuple:
        return tuple(d for d in self.b1_directions if self.is_perpendicular(d))


@dataclass(frozen=True)
class ThermalModel:
    """Sensor temperature and the floor of the spin temperature, both in kelvin."""

    sensor_temperature: float = 0.010
    t_min: float = 0.020

    def __post_init__(self):
        if not self.t_min > 0:
            raise ValueError(f"t_min must be positive, got {self.t_min!r}")
        if not self.sensor_temperature >= 0:
            raise ValueError(f"sensor_temperature must be nonnegative, got {self.sensor_temperature!r}")

    @property
    def effective(self) -> float:
        return effective_temperature(self)


def effective_temperature(model: ThermalModel) -> float:
    """T_eff = T_min * sqrt(1 + (T/T_min)^2)."""
    if not model.t_min > 0:
        raise ValueError(f"t_min must be positive, got {model.t_min!r}")
    return model.t_min * float(np.sqrt(1.0 + (model.sensor_temperature / model.t_min) ** 2))


def populations(eig, temperature) -> np.ndarray:
    """Boltzmann occupation of every level; ``eig`` may be an EigenSystem or an energy array (MHz)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature!r}")
    energies = np.asarray(eig.energies if isinstance(eig, EigenSystem) else eig, dtype=float)
    x = -(energies - energies.min()) * KELVIN_PER_MHZ / temperature
    w = np.exp(x)
    return w / w.sum()


def spin_polarisation(pops, initial_index, final_index) -> float:
    n = len(pops)
    for k in (initial_index, final_index):
        if not 0 <= k < n:
            raise IndexError(f"level index {k} out of range for {n} levels")
    return float(abs(pops[final_index] - pops[initial_index]))


@dataclass(frozen=True)
class TransitionRecord:
    initial_index: int
    final_index: int
    frequency: float  # MHz
    matrix_element_sq: float
    chi: float
    intensity: float
    delta_mf: object  # int or "mixed"
    field: FieldVector = field(default_factory=FieldVector)
    per_direction: tuple = ()

    @property
    def pair(self) -> tuple[int, int]:
        return (self.initial_index, self.final_index)


def drive_operator(system: SpinSystem, b1) -> np.ndarray:
    """g-weighted spin component along unit drive direction ``b1`` (H1 up to -mu_B |B1|)."""
    ops = operators_for(system)
    sx, sy, sz = ops.s
    b1 = np.asarray(b1, dtype=float)
    return system.g_perp * (b1[0] * sx + b1[1] * sy) + system.g_parallel * b1[2] * sz


def mf_labels(eig: EigenSystem, system: SpinSystem, max_deviation=0.1) -> list:
    """Nearest allowed m_F per level, or ``None`` where <F_z> is far from any."""
    fz = eig.expectation(operators_for(system).fz)
    top = system.electron_spin + system.nuclear_spin
    labels = []
    for value in fz:
        nearest = np.clip(np.round(value - top) + top, -top, top)
        labels.append(float(nearest) if abs(value - nearest) <= max_deviation else None)
    return labels


def transition_catalog(
    eig: EigenSystem,
    system: SpinSystem,
    geometry: ExcitationGeometry,
    thermal: ThermalModel | None = None,
    f_min=0.0,
    f_max=np.inf,
    threshold=DEFAULT_THRESHOLD,
    relative_threshold=True,
    aggregate="max",
    temperature=None,
) -> list[TransitionRecord]:
    """All upward transitions in ``[f_min, f_max]`` with their thermally weighted intensity.

    ``threshold`` is relative to the strongest perpendicular-mode (B1 perp B0)
    line at this field point unless ``relative_threshold`` is false.  The
    reference does not depend on whether parallel-mode directions are
    sampled, so a Voigt-like catalogue always contains the Faraday-like one.
    """
    if not f_min < f_max:
        raise ValueError(f"empty frequency window [{f_min}, {f_max}]")
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if not geometry.b1_directions:
        raise ValueError("geometry has no drive-field directions to sample")
    if aggregate not in ("max", "sum"):
        raise ValueError(f"aggregate must be 'max' or 'sum', got {aggregate!r}")

    thermal = thermal or ThermalModel()
    temp = effective_temperature(thermal) if temperature is None else temperature
    pops = populations(eig, temp)
    labels = mf_labels(eig, system)

    dirs = np.asarray(geometry.b1_directions)
    elements = np.stack(
        [np.abs(eig.matrix_elements(drive_operator(system, d))) ** 2 for d in dirs]
    )  # (n_dirs, d, d)
    perp_mask = np.array([geometry.is_perpendicular(d) for d in dirs])
    if not perp_mask.any():
        perp_mask[:] = True

    e = eig.energies
    freq = e[None, :] - e[:, None]  # freq[i, f] = E_f - E_i
    chi = np.abs(pops[None, :] - pops[:, None])
    combine = np.max if aggregate == "max" else np.sum
    msq = combine(elements, axis=0)
    intensity = chi * msq
    upward = freq > DEGENERACY_TOL_MHZ

    if relative_threshold:
        ref_int = chi * combine(elements[perp_mask], axis=0)
        ref = float(ref_int[upward].max()) if upward.any() else 0.0
        cut = threshold * ref
    else:
        cut = threshold

    records = []
    ii, ff = np.nonzero(upward & (freq >= f_min) & (freq <= f_max))
    for i, f in zip(ii, ff):
        inten = float(intensity[i, f])
        if inten < cut or (threshold > 0 and inten <= 0.0):
            continue
        li, lf = labels[i], labels[f]
        dmf = MIXED if li is None or lf is None else int(round(lf - li))
        records.append(
            TransitionRecord(
                initial_index=int(i),
                final_index=int(f),
                frequency=float(freq[i, f]),
                matrix_element_sq=float(msq[i, f]),
                chi=float(chi[i, f]),
                intensity=inten,
                delta_mf=dmf,
                field=eig.field,
                per_direction=tuple(float(x) for x in elements[:, i, f]),
            )
        )
    records.sort(key=lambda r: (r.frequency, r.initial_index, r.final_index))
    return records


@dataclass(frozen=True)
class ScanPoint:
    field: FieldVector
    eigensystem: EigenSystem
    catalog: list


class FieldScanError(RuntimeError):
    def __init__(self, field, cause):
        self.field = field
        self.cause = cause
        super().__init__(f"field point {field} failed: {cause}")


def field_line(start, stop, step, theta_deg=0.0, phi_deg=0.0) -> list[FieldVector]:
    """Field magnitudes start..stop (inclusive) along a fixed direction."""
    if not step > 0:
        raise ValueError(f"step must be positive, got {step!r}")
    if start > stop:
        raise ValueError(f"start {start} exceeds stop {stop}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    mags = start + step * np.arange(n)
    return [FieldVector.from_polar(b, theta_deg, phi_deg) for b in mags]


def field_scan(
    system: SpinSystem,
    scan: Sequence[FieldVector],
    geometry: ExcitationGeometry,
    thermal: ThermalModel | None = None,
    f_min=0.0,
    f_max=np.inf,
    threshold=DEFAULT_THRESHOLD,
    threads=1,
    **catalog_kwargs,
) -> list[ScanPoint]:
    if len(scan) == 0:
        raise ValueError("field scan is empty")

    def work(b):
        try:
            eig = solve(system, b)
            cat = transition_catalog(
                eig, system, geometry, thermal, f_min, f_max, threshold, **catalog_kwargs
            )
        except Exception as exc:  # re-raised with the offending field attached
            raise FieldScanError(b, exc) from exc
        return ScanPoint(b, eig, cat)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, scan))
    return [work(b) for b in scan]


CATALOG_HEADER = ["field_mT", "freq_MHz", "intensity", "chi", "i_index", "f_index", "delta_mF"]


def catalog_rows(scan: Sequence[ScanPoint]) -> list[list[str]]:
    rows = []
    for point in sorted(scan, key=lambda p: p.field.magnitude):
        for r in sorted(point.catalog, key=lambda r: (r.frequency, r.initial_index, r.final_index)):
            rows.append(
                [
                    f"{point.field.magnitude:.6f}",
                    f"{r.frequency:.6f}",
                    f"{r.intensity:.6e}",
                    f"{r.chi:.6e}",
                    str(r.initial_index),
                    str(r.final_index),
                    str(r.delta_mf),
                ]
            )
    return rows


def write_catalog_csv(scan: Sequence[ScanPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CATALOG_HEADER)
        writer.writerows(catalog_rows(scan))


def read_catalog_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CATALOG_HEADER:
            raise ValueError(f"unexpected catalog header {reader.fieldnames}")
        out = []
        for row in reader:
            dmf = row["delta_mF"]
            out.append(
                {
                    "field_mT": float(row["field_mT"]),
                    "freq_MHz": float(row["freq_MHz"]),
                    "intensity": float(row["intensity"]),
                    "chi": float(row["chi"]),
                    "i_index": int(row["i_index"]),
                    "f_index": int(row["f_index"]),
                    "delta_mF": dmf if dmf == MIXED else int(dmf),
                }
            )
        return out
