import numpy as np
import pytest

from hyperfine_epr.spin import preset
from hyperfine_epr.transitions import ExcitationGeometry, field_line, field_scan
from hyperfine_epr.zefoz import track_branches

PEAKS_QUOTED = (2415.0, 2663.0, 2730.0, 2981.0)


@pytest.fixture(scope="session")
def this_work():
    return preset("this_work")


@pytest.fixture(scope="session")
def sattler():
    return preset("sattler1971")


@pytest.fixture(scope="session")
def zefoz_scan(this_work):
    """0-30 mT at 0.1 mT, 3.3 deg from c, Voigt-like, 1.8-3.5 GHz window."""
    geometry = ExcitationGeometry.from_angles(3.3, 0.0, "voigt")
    scan = field_scan(this_work, field_line(0.0, 30.0, 0.1, 3.3), geometry, None, 1800.0, 3500.0)
    return scan, track_branches(scan, system=this_work)


def random_system(rng):
    from hyperfine_epr.spin import SpinSystem

    return SpinSystem(
        electron_spin=0.5,
        nuclear_spin=float(rng.choice([0.0, 0.5, 1.5, 3.5])),
        g_parallel=float(rng.uniform(0.5, 10)),
        g_perp=float(rng.uniform(0.5, 10)),
        a_parallel=float(rng.uniform(-1000, 1000)),
        a_perp=float(rng.uniform(-1000, 1000)),
        quadrupole_p=float(rng.uniform(-20, 20)),
        quadrupole_form=str(rng.choice(["traceless", "verbatim"])),
    )


def random_field(rng, bmax=200.0):
    from hyperfine_epr.spin import FieldVector

    return FieldVector(*rng.uniform(-bmax, bmax, 3))
