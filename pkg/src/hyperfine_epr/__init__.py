"""Spin-Hamiltonian simulation and analysis of hyperfine EPR spectra of an S=1/2, I=7/2 system."""

from .fitting import (
    FitProblem,
    FitResult,
    MeasuredPeak,
    calibrate_field,
    extract_misalignment,
    fit_calibration_map,
    fit_parameters,
    match_peaks,
    synthetic_peaks,
    validate_symmetry_rules,
)
from .spectrum import (
    PeakFit,
    SpectrumTrace,
    build_reference,
    detect_peaks,
    fit_lorentzian,
    peak_area_vs_temperature,
    read_trace,
    subtract_background,
    synthesize,
    write_trace,
)
from .spin import (
    EigenSystem,
    FieldVector,
    QuadrupoleForm,
    SpinSystem,
    assemble_hamiltonian,
    eigensystem,
    load_spin_system,
    preset,
    preset_names,
    solve,
)
from .transitions import (
    ExcitationGeometry,
    ThermalModel,
    TransitionRecord,
    effective_temperature,
    field_line,
    field_scan,
    populations,
    spin_polarisation,
    transition_catalog,
)
from .zefoz import (
    branch_hellmann_feynman,
    find_zefoz,
    linewidth_vs_field,
    sensitivity,
    track_branches,
)

__version__ = "0.1.0"
