"""Spin operators, the axial S=1/2 + I hyperfine Hamiltonian and its eigensystem.

Conventions
-----------
* Energies are frequencies E/h in MHz; fields are in mT in the crystal frame
  with the c-axis along z.
* The product basis is electron (x) nuclear, each factor ordered m = j ... -j.
* The quadrupole term is ``P * (3 Iz^2 -/+ I(I+1)) / 3``; both forms differ by a
  multiple of the identity, so transition frequencies do not depend on the choice.
"""
from __future__ import annotations

import enum
import functools
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .constants import MU_B_MHZ_PER_MT

HERMITIAN_RTOL = 1e-9
DEGENERACY_TOL_MHZ = 1e-3


class NonHermitianError(ValueError):
    """Raised when a matrix handed to the eigensolver is not Hermitian."""

    def __init__(self, asymmetry, scale):
        self.asymmetry = asymmetry
        self.scale = scale
        super().__init__(
            f"matrix is not Hermitian: max|H - H^dagger| = {asymmetry:.3e} "
            f"(max|H| = {scale:.3e})"
        )


class QuadrupoleForm(str, enum.Enum):
    TRACELESS = "traceless"
    VERBATIM = "verbatim"


def _check_spin(j, name="j"):
    twice = 2 * j
    if j < 0 or not np.isclose(twice, round(twice), rtol=0, atol=1e-12):
        raise ValueError(f"{name} must be a nonnegative integer or half-integer, got {j!r}")
    return round(twice) / 2


@dataclass(frozen=True)
class SpinSystem:
    """Axial spin Hamiltonian parameters (couplings in MHz)."""

    electron_spin: float = 0.5
    nuclear_spin: float = 3.5
    g_parallel: float = 3.137
    g_perp: float = 8.105
    a_parallel: float = 0.0
    a_perp: float = 0.0
    quadrupole_p: float = 0.0
    quadrupole_form: QuadrupoleForm = QuadrupoleForm.TRACELESS

    def __post_init__(self):
        object.__setattr__(self, "electron_spin", _check_spin(self.electron_spin, "electron_spin"))
        object.__setattr__(self, "nuclear_spin", _check_spin(self.nuclear_spin, "nuclear_spin"))
        object.__setattr__(self, "quadrupole_form", QuadrupoleForm(self.quadrupole_form))
        for name in ("g_parallel", "g_perp", "a_parallel", "a_perp", "quadrupole_p"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return int(round((2 * self.electron_spin + 1) * (2 * self.nuclear_spin + 1)))

    def with_params(self, **changes) -> "SpinSystem":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "electron_spin": self.electron_spin,
            "nuclear_spin": self.nuclear_spin,
            "g_parallel": self.g_parallel,
            "g_perp": self.g_perp,
            "a_parallel_mhz": self.a_parallel,
            "a_perp_mhz": self.a_perp,
            "quadrupole_p_mhz": self.quadrupole_p,
            "quadrupole_form": self.quadrupole_form.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpinSystem":
        expected = {
            "electron_spin", "nuclear_spin", "g_parallel", "g_perp",
            "a_parallel_mhz", "a_perp_mhz", "quadrupole_p_mhz", "quadrupole_form",
        }
        keys = set(data)
        if keys != expected:
            missing = sorted(expected - keys)
            extra = sorted(keys - expected)
            raise ValueError(f"bad spin-system document: missing={missing} unexpected={extra}")
        return cls(
            electron_spin=data["electron_spin"],
            nuclear_spin=data["nuclear_spin"],
            g_parallel=data["g_parallel"],
            g_perp=data["g_perp"],
            a_parallel=data["a_parallel_mhz"],
            a_perp=data["a_perp_mhz"],
            quadrupole_p=data["quadrupole_p_mhz"],
            quadrupole_form=data["quadrupole_form"],
        )


def load_spin_system(path) -> SpinSystem:
    with open(path) as fh:
        return SpinSystem.from_dict(json.load(fh))


def save_spin_system(system: SpinSystem, path) -> None:
    Path(path).write_text(json.dumps(system.to_dict(), indent=2) + "\n")


@functools.lru_cache(maxsize=None)
def _preset_table() -> dict:
    text = resources.files("hyperfine_epr").joinpath("presets/parameter_sets.json").read_text()
    return json.loads(text)


def preset_names() -> list[str]:
    return sorted(_preset_table())


def preset(name: str) -> SpinSystem:
    """Bundled parameter sets; ``this_work`` and ``sattler1971`` are the usual ones."""
    table = _preset_table()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(table))}")
    return SpinSystem.from_dict(table[name])


@dataclass(frozen=True)
class FieldVector:
    """Static field in the crystal frame, mT."""

    b_x: float = 0.0
    b_y: float = 0.0
    b_z: float = 0.0

    @classmethod
    def from_polar(cls, magnitude, theta_deg=0.0, phi_deg=0.0) -> "FieldVector":
        """Field of given magnitude at polar angle theta from c and azimuth phi."""
        u = unit_vector(theta_deg, phi_deg)
        return cls(*(magnitude * u))

    @classmethod
    def along(cls, direction, magnitude) -> "FieldVector":
        u = np.asarray(direction, dtype=float)
        return cls(*(magnitude * u / np.linalg.norm(u)))

    @property
    def magnitude(self) -> float:
        return float(np.sqrt(self.b_x**2 + self.b_y**2 + self.b_z**2))

    def as_array(self) -> np.ndarray:
        return np.array([self.b_x, self.b_y, self.b_z], dtype=float)


def unit_vector(theta_deg, phi_deg=0.0) -> np.ndarray:
    t, p = np.radians(theta_deg), np.radians(phi_deg)
    return np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])


@dataclass(frozen=True)
class AngularMomentum:
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray
    jsq: np.ndarray

    @property
    def jplus(self) -> np.ndarray:
        return self.jx + 1j * self.jy


def build_angular_momentum(j) -> AngularMomentum:
    """Spin-j matrices in the |j, m> basis with m running from +j down to -j."""
    j = _check_spin(j)
    m = np.arange(j, -j - 1, -1)
    dim = len(m)
    jplus = np.zeros((dim, dim), dtype=complex)
    # <m+1| J+ |m> = sqrt(j(j+1) - m(m+1)); row k-1 holds m_{k}+1.
    for k in range(1, dim):
        jplus[k - 1, k] = np.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
    jminus = jplus.conj().T
    jx = 0.5 * (jplus + jminus)
    jy = -0.5j * (jplus - jminus)
    jz = np.diag(m).astype(complex)
    jsq = j * (j + 1) * np.eye(dim, dtype=complex)
    return AngularMomentum(jx, jy, jz, jsq)


@dataclass(frozen=True)
class SpinOperators:
    """Electron and nuclear operators lifted to the (2S+1)(2I+1) product space."""

    electron_spin: float
    nuclear_spin: float
    s: tuple  # (Sx, Sy, Sz)
    i: tuple  # (Ix, Iy, Iz)
    i_sq: np.ndarray
    identity: np.ndarray

    @property
    def dim(self) -> int:
        return self.identity.shape[0]

    @property
    def fz(self) -> np.ndarray:
        return self.s[2] + self.i[2]


@functools.lru_cache(maxsize=32)
def spin_operators(electron_spin, nuclear_spin) -> SpinOperators:
    s_ops = build_angular_momentum(electron_spin)
    i_ops = build_angular_momentum(nuclear_spin)
    e_eye = np.eye(s_ops.jz.shape[0])
    n_eye = np.eye(i_ops.jz.shape[0])

    def frozen(a):
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        return a

    s = tuple(frozen(np.kron(op, n_eye)) for op in (s_ops.jx, s_ops.jy, s_ops.jz))
    i = tuple(frozen(np.kron(e_eye, op)) for op in (i_ops.jx, i_ops.jy, i_ops.jz))
    return SpinOperators(
        electron_spin=float(electron_spin),
        nuclear_spin=float(nuclear_spin),
        s=s,
        i=i,
        i_sq=frozen(np.kron(e_eye, i_ops.jsq)),
        identity=frozen(np.eye(s[0].shape[0], dtype=complex)),
    )


def operators_for(system: SpinSystem) -> SpinOperators:
    ops = spin_operators(system.electron_spin, system.nuclear_spin)
    if ops.dim != system.dim:
        raise ValueError(f"operator cache dimension {ops.dim} does not match system dimension {system.dim}")
    return ops


def quadrupole_operator(system: SpinSystem) -> np.ndarray:
    ops = operators_for(system)
    iz = ops.i[2]
    sign = -1.0 if system.quadrupole_form is QuadrupoleForm.TRACELESS else 1.0
    return (3.0 * iz @ iz + sign * ops.i_sq) / 3.0


def zero_field_hamiltonian(system: SpinSystem) -> np.ndarray:
    ops = operators_for(system)
    sx, sy, sz = ops.s
    ix, iy, iz = ops.i
    h = system.a_perp * (sx @ ix + sy @ iy) + system.a_parallel * (sz @ iz)
    if system.quadrupole_p != 0.0:
        h = h + system.quadrupole_p * quadrupole_operator(system)
    return h


def zeeman_operator(system: SpinSystem, field: FieldVector) -> np.ndarray:
    """Electron Zeeman term in MHz; linear in the field vector."""
    ops = operators_for(system)
    sx, sy, sz = ops.s
    return MU_B_MHZ_PER_MT * (
        system.g_perp * (field.b_x * sx + field.b_y * sy) + system.g_parallel * field.b_z * sz
    )


def field_derivative(system: SpinSystem, direction) -> np.ndarray:
    """dH/dB along a direction (normalised), MHz/mT."""
    return zeeman_operator(system, FieldVector.along(direction, 1.0))


def assemble_hamiltonian(system: SpinSystem, field: FieldVector) -> np.ndarray:
    return zeeman_operator(system, field) + zero_field_hamiltonian(system)


def hermitian_asymmetry(h) -> tuple[float, float]:
    h = np.asarray(h)
    return float(np.max(np.abs(h - h.conj().T))), float(np.max(np.abs(h))) if h.size else 0.0


@dataclass(frozen=True)
class EigenSystem:
    energies: np.ndarray  # ascending, MHz
    states: np.ndarray  # columns are eigenvectors
    field: FieldVector = field(default_factory=FieldVector)

    @property
    def dim(self) -> int:
        return len(self.energies)

    def expectation(self, op) -> np.ndarray:
        """Real diagonal <v_k|op|v_k> for every level."""
        return np.real(np.einsum("ik,ij,jk->k", self.states.conj(), op, self.states))

    def matrix_elements(self, op) -> np.ndarray:
        """<v_a|op|v_b> in the eigenbasis."""
        return self.states.conj().T @ op @ self.states


def degenerate_blocks(energies, tol=DEGENERACY_TOL_MHZ) -> list[slice]:
    """Runs of consecutive sorted energies separated by at most ``tol``."""
    blocks = []
    start = 0
    for k in range(1, len(energies) + 1):
        if k == len(energies) or energies[k] - energies[k - 1] > tol:
            blocks.append(slice(start, k))
            start = k
    return blocks


def _fix_phases(states):
    # Largest component of every column made real and positive.
    idx = np.argmax(np.abs(states), axis=0)
    pivots = states[idx, np.arange(states.shape[1])]
    return states * (np.abs(pivots) / pivots)[None, :]


def eigensystem(
    h,
    field: FieldVector | None = None,
    label_operator=None,
    degeneracy_tol=DEGENERACY_TOL_MHZ,
    hermitian_rtol=HERMITIAN_RTOL,
) -> EigenSystem:
    """Diagonalise a Hermitian matrix.

    Eigenvalues come back ascending. When ``label_operator`` is given, each
    degenerate block (eigenvalue spread below ``degeneracy_tol``) is rotated
    so that the operator is diagonal inside it; with ``Fz`` this gives
    sharp m_F labels at zero field.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {h.shape}")
    asym, scale = hermitian_asymmetry(h)
    if asym > hermitian_rtol * max(scale, 1e-300) and asym > 0.0:
        raise NonHermitianError(asym, scale)
    h = 0.5 * (h + h.conj().T)
    energies, states = np.linalg.eigh(h)
    if label_operator is not None:
        label_operator = np.asarray(label_operator)
        for block in degenerate_blocks(energies, degeneracy_tol):
            if block.stop - block.start < 2:
                continue
            vb = states[:, block]
            sub = vb.conj().T @ label_operator @ vb
            _, rot = np.linalg.eigh(0.5 * (sub + sub.conj().T))
            states[:, block] = vb @ rot
    states = _fix_phases(states)
    return EigenSystem(energies=energies, states=states, field=field or FieldVector())


def solve(system: SpinSystem, field: FieldVector, degeneracy_tol=DEGENERACY_TOL_MHZ) -> EigenSystem:
    """Assemble and diagonalise, labelling degenerate blocks by F_z."""
    ops = operators_for(system)
    return eigensystem(
        assemble_hamiltonian(system, field),
        field,
        label_operator=ops.fz,
        degeneracy_tol=degeneracy_tol,
    )
