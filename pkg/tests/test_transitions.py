import numpy as np
import pytest

from hyperfine_epr.constants import KELVIN_PER_MHZ, MU_B_MHZ_PER_MT
from hyperfine_epr.spin import FieldVector, SpinSystem, preset, solve
from hyperfine_epr.transitions import (
    CATALOG_HEADER,
    ExcitationGeometry,
    FieldScanError,
    ThermalModel,
    effective_temperature,
    field_line,
    field_scan,
    populations,
    read_catalog_csv,
    spin_polarisation,
    transition_catalog,
    write_catalog_csv,
)

PERP = ExcitationGeometry.with_drive([(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
PARA = ExcitationGeometry.with_drive([(0.0, 0.0, 1.0)])


class TestGeometry:
    @pytest.mark.parametrize("theta", [0.0, 3.3, 45.0, 90.0])
    def test_faraday_perpendicular(self, theta):
        g = ExcitationGeometry.from_angles(theta, 20.0, "faraday")
        for d in g.b1_directions:
            assert abs(np.dot(d, g.b0_direction)) < 1e-12

    def test_voigt_has_both(self):
        g = ExcitationGeometry.from_angles(10.0, 0.0, "voigt")
        dots = [abs(np.dot(d, g.b0_direction)) for d in g.b1_directions]
        assert min(dots) < 1e-12 and max(dots) > 1 - 1e-12


class TestThermal:
    def test_teff_limits(self):
        assert effective_temperature(ThermalModel(0.0, 0.020)) == pytest.approx(0.020)
        assert effective_temperature(ThermalModel(0.020, 0.020)) == pytest.approx(0.028284, abs=1e-6)
        assert effective_temperature(ThermalModel(1.0, 0.020)) == pytest.approx(1.0002, abs=1e-4)

    def test_bad_tmin(self):
        with pytest.raises(ValueError):
            ThermalModel(0.01, 0.0)

    def test_infinite_temperature(self, this_work):
        p = populations(solve(this_work, FieldVector(0, 0, 10)), 1e6)
        assert np.allclose(p, 1 / 16, atol=1e-9)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_two_level_boltzmann(self):
        """Closed-form two-level oracle at 2195.3 MHz, 20 mK."""
        split = 2195.3
        assert split * KELVIN_PER_MHZ == pytest.approx(0.1054, abs=1e-4)
        p = populations(np.array([0.0, split]), 0.020)
        lower = 1 / (1 + np.exp(-split * KELVIN_PER_MHZ / 0.020))
        assert p[0] == pytest.approx(lower, abs=1e-12)
        assert p[0] == pytest.approx(0.9949, abs=1e-4)
        assert spin_polarisation(p, 0, 1) == pytest.approx(0.9898, abs=1e-4)

    def test_polarisation_limits(self):
        assert spin_polarisation(np.full(4, 0.25), 0, 3) == 0.0
        p = populations(np.array([0.0, 1000.0, 2000.0]), 1e-4)
        assert spin_polarisation(p, 0, 2) == pytest.approx(1.0)
        with pytest.raises(IndexError):
            spin_polarisation(p, 0, 3)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            populations(np.zeros(2), 0.0)

    def test_chi_vanishes_hot(self, this_work):
        eig = solve(this_work, FieldVector(0, 0, 20))
        cat = transition_catalog(eig, this_work, PERP, threshold=0.0, temperature=1e7)
        assert max(r.chi for r in cat) < 1e-6


class TestSelectionRules:
    @pytest.mark.parametrize("geometry,allowed", [(PERP, {-1, 1}), (PARA, {0})])
    def test_zero_field(self, this_work, geometry, allowed):
        eig = solve(this_work, FieldVector())
        cat = transition_catalog(eig, this_work, geometry, threshold=0.0)
        top = max(r.intensity for r in cat)
        for r in cat:
            if r.intensity > 1e-10 * top:
                assert r.delta_mf in allowed
            else:
                assert r.delta_mf not in allowed

    def test_voigt_superset(self, this_work):
        for b in np.arange(0.0, 50.1, 2.5):
            eig = solve(this_work, FieldVector.from_polar(b, 3.3))
            far = transition_catalog(eig, this_work, ExcitationGeometry.from_angles(3.3, 0, "faraday"))
            voi = transition_catalog(eig, this_work, ExcitationGeometry.from_angles(3.3, 0, "voigt"))
            assert {r.pair for r in far} <= {r.pair for r in voi}

    def test_parallel_mode_lines_only_in_voigt(self, this_work):
        eig = solve(this_work, FieldVector())
        far = {r.pair for r in transition_catalog(eig, this_work, ExcitationGeometry.from_angles(0, 0, "faraday"))}
        voi = {r.pair for r in transition_catalog(eig, this_work, ExcitationGeometry.from_angles(0, 0, "voigt"))}
        assert voi - far

    def test_sign_of_p_visible_in_parallel_mode(self, this_work):
        def para_lines(system):
            cat = transition_catalog(solve(system, FieldVector()), system, PARA)
            return np.sort([r.frequency for r in cat])

        a = para_lines(this_work)
        b = para_lines(this_work.with_params(quadrupole_p=-this_work.quadrupole_p))
        assert len(a) != len(b) or np.max(np.abs(a - b)) > 1.0


class TestCatalog:
    def test_chi_scaling(self, this_work):
        eig = solve(this_work, FieldVector(0, 0, 10))
        cat = transition_catalog(eig, this_work, PERP, threshold=0.0)
        for r in cat:
            assert r.intensity == pytest.approx(r.chi * r.matrix_element_sq, rel=1e-12)
            assert r.intensity >= 0 and 0 <= r.chi <= 1 and r.frequency >= 0

    def test_sorted_and_windowed(self, this_work):
        eig = solve(this_work, FieldVector())
        cat = transition_catalog(eig, this_work, PERP, f_min=2000, f_max=3000)
        f = [r.frequency for r in cat]
        assert f == sorted(f) and all(2000 <= x <= 3000 for x in f)

    def test_empty_window_rejected(self, this_work):
        eig = solve(this_work, FieldVector())
        with pytest.raises(ValueError):
            transition_catalog(eig, this_work, PERP, f_min=10, f_max=10)

    def test_degenerate_rotation_invariance(self, this_work):
        """Summed matrix-element weight of a line does not depend on the basis inside degenerate blocks."""
        from hyperfine_epr.spin import assemble_hamiltonian, eigensystem

        h = assemble_hamiltonian(this_work, FieldVector())
        labelled = solve(this_work, FieldVector())
        raw = eigensystem(h)
        for g in (PERP, PARA):
            a = transition_catalog(labelled, this_work, g, threshold=0.0, aggregate="sum")
            b = transition_catalog(raw, this_work, g, threshold=0.0, aggregate="sum")
            ta = sum(r.matrix_element_sq for r in a)
            tb = sum(r.matrix_element_sq for r in b)
            assert ta == pytest.approx(tb, rel=1e-9)


class TestScan:
    def test_i0_line(self):
        system = preset("even_isotope")
        scan = field_scan(system, field_line(0, 50, 5), ExcitationGeometry.from_angles(0, 0, "faraday"))
        for p in scan[1:]:
            assert len(p.catalog) == 1
            assert p.catalog[0].frequency == pytest.approx(3.137 * MU_B_MHZ_PER_MT * p.field.magnitude, abs=1e-9)
        assert scan[-1].catalog[0].frequency == pytest.approx(2195.3, abs=0.05)

    def test_i0_misaligned_slope(self):
        system = preset("even_isotope")
        theta = 20.0
        geff = np.hypot(3.137 * np.cos(np.radians(theta)), 8.105 * np.sin(np.radians(theta)))
        scan = field_scan(system, field_line(10, 10, 1, theta), ExcitationGeometry.from_angles(theta))
        assert scan[0].catalog[0].frequency == pytest.approx(geff * MU_B_MHZ_PER_MT * 10, rel=1e-12)

    def test_2415_branch_extremum(self, zefoz_scan):
        from hyperfine_epr.zefoz import branches_near

        _, branches = zefoz_scan
        found = False
        for br in branches_near(branches, 2415.0):
            k = int(np.argmin(br.frequencies))
            if 0 < k < len(br) - 1 and 15 <= br.fields[k] <= 25:
                found = True
        assert found

    def test_threads_deterministic(self, this_work, tmp_path):
        fields = field_line(0, 20, 1, 3.3)
        g = ExcitationGeometry.from_angles(3.3, 0, "voigt")
        a = field_scan(this_work, fields, g, threads=1)
        b = field_scan(this_work, fields, g, threads=4)
        write_catalog_csv(a, tmp_path / "a.csv")
        write_catalog_csv(b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = read_catalog_csv(tmp_path / "a.csv")
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(CATALOG_HEADER)
        keys = [(r["field_mT"], r["freq_MHz"]) for r in rows]
        assert keys == sorted(keys)

    def test_failure_names_field(self):
        bad = SpinSystem()
        with pytest.raises(FieldScanError) as info:
            field_scan(bad, [FieldVector(0, 0, 1.0)], ExcitationGeometry.from_angles(), f_min=5, f_max=1)
        assert info.value.field == FieldVector(0, 0, 1.0)

    def test_empty_scan(self, this_work):
        with pytest.raises(ValueError):
            field_scan(this_work, [], PERP)
