import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hyperfine_epr import cli
from hyperfine_epr.fitting import dpph_frequency, synthetic_peaks
from hyperfine_epr.lsq import ConvergenceError
from hyperfine_epr.spectrum import SpectrumTrace, synthesize, write_trace
from hyperfine_epr.spin import preset
from hyperfine_epr.transitions import TransitionRecord

FIT_KEYS = {"parameters", "spin_system", "residuals_mhz", "assignment", "convergence", "inputs", "metadata"}


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_peaks(path, peaks):
    with open(path, "w") as fh:
        fh.write("frequency_MHz,weight,field_mT\n")
        for p in peaks:
            fh.write(f"{p.frequency:.9f},{p.weight},{p.field_mT}\n")
    return path


def dpph_trace(path, nominal, actual, linewidth=2.0):
    centre = dpph_frequency(nominal)
    grid = np.arange(centre - 150.0, centre + 150.0, 0.1)
    line = TransitionRecord(0, 1, dpph_frequency(actual), 1.0, 1.0, 1.0, 0)
    dip = synthesize([line], grid, linewidth, field_mT=nominal)
    write_trace(SpectrumTrace(nominal, grid, -3.0 - dip.amplitudes), path)
    return path


@pytest.fixture(scope="module")
def this_work_peaks(tmp_path_factory):
    path = tmp_path_factory.mktemp("peaks") / "peaks.csv"
    return write_peaks(path, synthetic_peaks(preset("this_work")))


class TestSimulate:
    def test_outputs(self, tmp_path):
        assert run("simulate", "--b-stop", 10, "--b-step", 1, "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "catalog.csv")
        assert {float(r["field_mT"]) for r in rows} == set(np.arange(0.0, 10.1, 1.0))
        assert (tmp_path / "branches.svg").stat().st_size > 0

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("simulate", "--b-stop", 5, "--b-step", 1, "--traces", "--noise", 0.01,
                       "--f-min", 2300, "--f-max", 2500, "--out", tmp_path / name) == 0
        for rel in ("catalog.csv", "branches.svg"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        ta = sorted((tmp_path / "a" / "traces").iterdir())
        tb = sorted((tmp_path / "b" / "traces").iterdir())
        assert [p.name for p in ta] == [p.name for p in tb]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(ta, tb))

    def test_even_isotope_single_line(self, tmp_path):
        assert run("simulate", "--preset", "even_isotope", "--b-start", 1, "--b-stop", 50, "--b-step", 7,
                   "--no-plot", "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "catalog.csv")
        assert len(rows) == 8
        slope = [float(r["freq_MHz"]) / float(r["field_mT"]) for r in rows]
        assert np.ptp(slope) < 1e-6

    def test_compare_presets(self, tmp_path):
        assert run("simulate", "--compare", "sattler1971", "--geometry", "voigt", "--b-step", 5,
                   "--f-min", 1800, "--f-max", 3500, "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "compare.csv")
        below = [float(r["max_abs_diff_MHz"]) for r in rows if float(r["field_mT"]) < 50]
        assert below and min(below) > 10.0
        assert (tmp_path / "compare.svg").exists()

    def test_unknown_compare_preset(self, tmp_path):
        assert run("simulate", "--compare", "nope", "--b-stop", 1, "--out", tmp_path, "--no-plot") == 2


class TestConfig:
    def test_bad_values_named(self, tmp_path, capsys):
        code = run("simulate", "--b-step", -1, "--f-min", 10, "--f-max", 5, "--out", tmp_path)
        err = capsys.readouterr().err
        assert code == 2
        assert "b_step" in err and "f_min/f_max" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"b_step": 1.0, "bogus": 3}))
        assert run("simulate", "--config", cfg, "--out", tmp_path) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unknown_preset(self, tmp_path):
        assert run("simulate", "--preset", "nope", "--out", tmp_path) == 2

    def test_layering(self, tmp_path, this_work_peaks):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"f_min": 2000.0, "f_max": 3400.0, "t_mk": 30.0}))
        out = tmp_path / "o"
        assert run("fit-zero-field", "--config", cfg, "--f-max", 3500, "--peaks", this_work_peaks,
                   "--no-plot", "--out", out) == 0
        record = json.loads((out / "fit_report.json").read_text())["config"]
        assert record["f_min"] == 2000.0  # config file
        assert record["f_max"] == 3500.0  # flag beats config
        assert record["t_mk"] == 30.0
        assert record["t_min_mk"] == 20.0  # default
        assert record["geometry"] == "voigt"  # command default

    def test_unknown_free_parameter(self, tmp_path, this_work_peaks):
        assert run("fit-zero-field", "--peaks", this_work_peaks, "--free", "a_parallel,zeta",
                   "--out", tmp_path) == 2

    def test_peaks_xor_traces(self, tmp_path):
        assert run("fit-zero-field", "--out", tmp_path) == 2


class TestFitZeroField:
    def test_recovers_parameters(self, tmp_path, this_work_peaks):
        assert run("fit-zero-field", "--peaks", this_work_peaks, "--initial-preset", "sattler1971",
                   "--out", tmp_path) == 0
        report = json.loads((tmp_path / "fit_report.json").read_text())
        assert FIT_KEYS <= set(report)
        params = {p["name"]: p for p in report["parameters"]}
        truth = preset("this_work")
        assert params["a_parallel"]["value"] == pytest.approx(truth.a_parallel, rel=1e-3)
        assert params["a_perp"]["value"] == pytest.approx(truth.a_perp, rel=1e-3)
        assert params["quadrupole_p"]["value"] == pytest.approx(truth.quadrupole_p, rel=1e-3)
        assert all(np.isfinite(p["sigma"]) for p in params.values())
        assert report["metadata"]["created"].startswith("2023-11-14")
        assert (tmp_path / "fit_overlay.svg").exists()

    def test_report_deterministic(self, tmp_path, this_work_peaks):
        for name in ("a", "b"):
            assert run("fit-zero-field", "--peaks", this_work_peaks, "--no-plot", "--out", tmp_path / name) == 0
        assert (tmp_path / "a" / "fit_report.json").read_bytes() == (tmp_path / "b" / "fit_report.json").read_bytes()

    def test_frozen_p_flags_lines(self, tmp_path, this_work_peaks):
        assert run("fit-zero-field", "--peaks", this_work_peaks, "--fix", "quadrupole_p=0",
                   "--no-plot", "--out", tmp_path) == 0
        report = json.loads((tmp_path / "fit_report.json").read_text())
        assert report["convergence"]["rms_mhz"] > 1.0
        assert "quadrupole_p" not in {p["name"] for p in report["parameters"]}

    def test_empty_peak_list(self, tmp_path, capsys):
        peaks = tmp_path / "p.csv"
        peaks.write_text("frequency_MHz\n")
        assert run("fit-zero-field", "--peaks", peaks, "--out", tmp_path) == 3
        assert "read peaks: no peaks detected" in capsys.readouterr().err

    def test_flat_trace_has_no_peaks(self, tmp_path, capsys):
        grid = np.arange(1800.0, 3500.0, 0.5)
        write_trace(SpectrumTrace(0.0, grid, np.full_like(grid, -3.0)), tmp_path / "t.csv")
        assert run("fit-zero-field", "--traces", tmp_path / "t.csv", "--out", tmp_path) == 3
        assert "peak detection: no peaks detected" in capsys.readouterr().err

    def test_underdetermined(self, tmp_path):
        peaks = tmp_path / "p.csv"
        peaks.write_text("frequency_MHz\n2415.0\n")
        assert run("fit-zero-field", "--peaks", peaks, "--out", tmp_path) == 3

    def test_rank_deficient(self, tmp_path, this_work_peaks, capsys):
        # g_parallel has no effect on zero-field lines
        assert run("fit-zero-field", "--peaks", this_work_peaks, "--free", "a_parallel,g_parallel",
                   "--no-plot", "--out", tmp_path) == 3
        assert "g_parallel" in capsys.readouterr().err

    def test_convergence_exit_code(self, tmp_path, this_work_peaks, monkeypatch):
        def fail(*args, **kwargs):
            raise ConvergenceError("iteration budget exhausted", x=np.zeros(3), cost=1.0, iterations=50)

        monkeypatch.setattr(cli, "fit_parameters", fail)
        assert run("fit-zero-field", "--peaks", this_work_peaks, "--out", tmp_path) == 4

    def test_from_traces(self, tmp_path):
        sim = tmp_path / "sim"
        assert run("simulate", "--geometry", "voigt", "--b-stop", 100, "--b-step", 5, "--f-min", 1800,
                   "--f-max", 3500, "--traces", "--df", 0.2, "--noise", 0.002, "--no-plot", "--out", sim) == 0
        traces = sorted((sim / "traces").glob("*.csv"))
        out = tmp_path / "fit"
        assert run("fit-zero-field", "--traces", *traces, "--initial-preset", "sattler1971",
                   "--no-plot", "--out", out) == 0
        report = json.loads((out / "fit_report.json").read_text())
        params = {p["name"]: p["value"] for p in report["parameters"]}
        assert params["a_perp"] == pytest.approx(-844.2, abs=1.0)
        assert len(read_rows(out / "peaks.csv")) >= 8


class TestZefoz:
    def test_2415_turning_point(self, tmp_path):
        assert run("zefoz", "--b0-theta", 3.3, "--f0", 2415, "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "zefoz.csv")
        assert len(rows) == 1
        assert 18.0 <= float(rows[0]["B_star_mT"]) <= 23.0
        assert abs(float(rows[0]["f0_MHz"]) - 2415.0) < 10.0
        branch = read_rows(tmp_path / f"branch_{rows[0]['branch_id']}.csv")
        assert len(branch) == 301 and set(branch[0]) == {"field_mT", "f_center_MHz", "fwhm_MHz"}
        assert (tmp_path / "zefoz.svg").exists()

    def test_even_isotope_empty(self, tmp_path):
        assert run("zefoz", "--preset", "even_isotope", "--f-min", 0, "--no-plot", "--out", tmp_path) == 0
        lines = (tmp_path / "zefoz.csv").read_text().splitlines()
        assert lines == ["branch_id,f0_MHz,B_star_mT,f_star_MHz,S2_MHz_per_mT2,S1_residual"]

    def test_direction_batch_smooth(self, tmp_path):
        assert run("zefoz", "--thetas", "0,1,3.3", "--f0", 2415, "--no-plot", "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "zefoz_directions.csv")
        b = {float(r["theta_deg"]): float(r["B_star_mT"]) for r in rows}
        assert sorted(b) == [0.0, 1.0, 3.3]
        assert all(18.0 <= v <= 23.0 for v in b.values())
        assert abs(b[1.0] - b[0.0]) < 0.1 and abs(b[3.3] - b[1.0]) < 0.5
        assert (tmp_path / "zefoz_theta3.3.csv").exists()


class TestCalibrate:
    def test_identity(self, tmp_path):
        files = [dpph_trace(tmp_path / f"d{b}.csv", b, b) for b in (20.0, 40.0, 60.0, 80.0)]
        assert run("calibrate", *files, "--out", tmp_path / "o") == 0
        doc = json.loads((tmp_path / "o" / "calibration.json").read_text())
        assert doc["scale"] == pytest.approx(1.0, abs=1e-6)
        assert doc["offset_mT"] == pytest.approx(0.0, abs=1e-6)
        assert doc["skipped"] == []

    def test_scale_and_skipped_file(self, tmp_path, capsys):
        files = [dpph_trace(tmp_path / f"d{b}.csv", b, 0.98 * b) for b in (20.0, 40.0, 60.0)]
        grid = np.arange(100.0, 200.0, 0.1)
        write_trace(SpectrumTrace(80.0, grid, np.full_like(grid, -3.0)), tmp_path / "miss.csv")
        assert run("calibrate", *files, tmp_path / "miss.csv", "--no-plot", "--out", tmp_path / "o") == 0
        err = capsys.readouterr().err
        assert "miss.csv" in err and "fallback" in err
        doc = json.loads((tmp_path / "o" / "calibration.json").read_text())
        assert doc["scale"] == pytest.approx(0.98, abs=1e-6)
        assert [s["file"].endswith("miss.csv") for s in doc["skipped"]] == [True]
        assert len(read_rows(tmp_path / "o" / "calibration.csv")) == 3

    def test_too_few(self, tmp_path):
        f = dpph_trace(tmp_path / "d.csv", 20.0, 20.0)
        assert run("calibrate", f, "--out", tmp_path / "o") == 3


class TestThermal:
    def test_teff_beats_sensor_temperature(self, tmp_path):
        sim = tmp_path / "sim"
        assert run("simulate", "--b-start", 20, "--b-stop", 20, "--geometry", "voigt", "--f-min", 1800,
                   "--f-max", 3500, "--traces", "--temperatures-mk", "10,20,50,100,300,1000",
                   "--no-plot", "--out", sim) == 0
        traces = sorted((sim / "traces").glob("*.csv"))
        out = tmp_path / "th"
        assert run("thermal", *traces, "--window", "2522,2542", "--geometry", "voigt", "--out", out) == 0
        doc = json.loads((out / "thermal.json").read_text())
        assert doc["max_misfit_Teff"] < 0.02
        assert doc["max_misfit_T"] > 10 * doc["max_misfit_Teff"]
        assert len(read_rows(out / "thermal.csv")) == 6

    def test_needs_window(self, tmp_path):
        grid = np.arange(2500.0, 2560.0, 0.1)
        write_trace(SpectrumTrace(20.0, grid, np.zeros_like(grid), temperature_mK=10.0), tmp_path / "t.csv")
        assert run("thermal", tmp_path / "t.csv", "--out", tmp_path) == 2

    def test_needs_temperature(self, tmp_path):
        grid = np.arange(2500.0, 2560.0, 0.1)
        write_trace(SpectrumTrace(20.0, grid, np.zeros_like(grid)), tmp_path / "t.csv")
        assert run("thermal", tmp_path / "t.csv", "--window", "2520,2540", "--out", tmp_path) == 3


class TestBackground:
    def test_model_windows(self, tmp_path):
        sim = tmp_path / "sim"
        assert run("simulate", "--geometry", "voigt", "--b-stop", 100, "--b-step", 5, "--f-min", 2300,
                   "--f-max", 2600, "--traces", "--df", 0.5, "--no-plot", "--out", sim) == 0
        traces = sorted((sim / "traces").glob("*.csv"))
        out = tmp_path / "bg"
        assert run("background", *traces, "--geometry", "voigt", "--out", out) == 0
        assert (out / "reference.csv").exists()
        assert len(list(out.glob("subtracted_*.csv"))) == len(traces)

    def test_coverage_gap_is_data_error(self, tmp_path):
        grid = np.arange(2400.0, 2430.0, 0.5)
        write_trace(SpectrumTrace(0.0, grid, np.zeros_like(grid)), tmp_path / "t.csv")
        (tmp_path / "x.json").write_text(json.dumps({"t.csv": [[2410.0, 2412.0]]}))
        assert run("background", tmp_path / "t.csv", "--exclude", tmp_path / "x.json",
                   "--out", tmp_path / "o") == 3


def test_console_script_help():
    done = subprocess.run([sys.executable, "-m", "hyperfine_epr.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for name in ("simulate", "fit-zero-field", "zefoz", "calibrate", "thermal", "background"):
        assert name in done.stdout
