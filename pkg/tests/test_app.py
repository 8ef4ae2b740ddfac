import json

import pytest

import app
import database.models as ledger
from app import CLOSED_FORM_FACTOR, EXIT_ERROR, EXIT_FAIL, EXIT_PASS, main
from models.curvature_algebra import sphere_tensor
from models.pinching_builder import PinchingFunction
from utils.data_processor import ReportProcessor


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def test_identity_suite_passes(capsys):
    code, out = _run(capsys, "identities", "--n", "5", "--samples", "2", "--seed", "3")
    report = json.loads(out)
    assert code == EXIT_PASS
    assert report["verdict"] == "PASS"
    assert report["results"]["dimensions"] == [4, 5]
    assert {"q_of_kn", "b_with_kn", "coupled_reconstruction", "diagonal_kn_squares"} <= set(report["checks"])
    assert report["checks"]["diagonal_kn_squares"]["value"] <= 1e-12


def test_sphere_membership(capsys, tmp_path):
    path = tmp_path / "report.json"
    code, out = _run(capsys, "membership", "--model", "sphere", "--sigma", "2", "--restarts", "8",
                     "--json", str(path))
    assert code == EXIT_PASS
    report = json.loads(path.read_text())
    assert report["results"]["classification"] == "interior"
    assert report["checks"]["member"]["value"] == pytest.approx(2.0, abs=1e-8)
    assert json.loads(out)["command"] == "membership"


def test_tensor_file_membership(capsys, tmp_path):
    path = ReportProcessor().write_tensor(sphere_tensor(5) * -1.0, tmp_path / "neg.json")
    code, _ = _run(capsys, "membership", "--file", str(path), "--restarts", "8")
    assert code == EXIT_FAIL


def test_step2_and_theta_bar(capsys):
    code, out = _run(capsys, "step2", "--n", "6", "--samples", "20")
    assert code == EXIT_PASS
    assert json.loads(out)["checks"]["case_identities"]["passed"]
    code, out = _run(capsys, "theta-bar", "--n", "5", "--samples", "50")
    assert code == EXIT_PASS
    report = json.loads(out)
    assert report["results"]["theta_bar"] == pytest.approx(0.1, rel=1e-6)
    assert report["checks"]["bracket"]["passed"]
    assert report["results"]["bracket"]["violations"] > 0


def test_pinching_eval(capsys, tmp_path):
    csv = tmp_path / "f.csv"
    code, out = _run(capsys, "pinching", "eval", "--sigma", "1.5", "--theta", "0.05",
                     "--s", "1", "10", "100", "--csv", str(csv))
    assert code == EXIT_PASS
    values = json.loads(out)["results"]["values"]
    assert values[0]["f"] == pytest.approx(0.5)
    assert csv.read_text().startswith("s,f")


def test_evolve_sphere_against_closed_form(capsys):
    code, out = _run(capsys, "evolve", "--model", "sphere", "--horizon", "5", "--restarts", "4")
    report = json.loads(out)
    assert code == EXIT_PASS
    assert report["checks"]["sphere_closed_form"]["passed"]
    assert report["results"]["stop_reason"] == "scal_factor"


def test_sphere_closed_form_bound_is_ten_rtol(capsys):
    code, out = _run(capsys, "evolve", "--model", "sphere", "--horizon", "100", "--rtol", "1e-8",
                     "--restarts", "4", "--monitor-every", "1000")
    report = json.loads(out)
    assert code == EXIT_PASS
    assert CLOSED_FORM_FACTOR == 10.0
    assert report["results"]["integration_rtol"] == pytest.approx(1e-9)
    assert report["checks"]["sphere_closed_form"]["value"] <= 1e-7


def test_sphere_closed_form_drift_is_flagged(capsys, monkeypatch):
    exact = app.sphere_closed_form
    monkeypatch.setattr(app, "sphere_closed_form", lambda r0, n, t: exact(r0, n, t) * (1.0 + 1e-6))
    code, out = _run(capsys, "evolve", "--model", "sphere", "--horizon", "5", "--restarts", "4")
    assert code == EXIT_FAIL
    assert not json.loads(out)["checks"]["sphere_closed_form"]["passed"]


def test_rigidity_of_cylinder(capsys):
    code, out = _run(capsys, "rigidity", "--model", "cylinder", "--restarts", "8")
    assert code == EXIT_PASS
    assert json.loads(out)["results"]["kind"] == "cylinder"


def test_csv_format(capsys):
    code, out = _run(capsys, "hull", "--n", "6", "--samples", "10", "--format", "csv")
    assert code == EXIT_PASS
    assert out.splitlines()[0] == "name,passed,value"


@pytest.mark.parametrize("argv", [
    ["identities", "--n", "3"],
    ["membership", "--model", "cp", "--n", "5"],
    ["identities", "--config", "does-not-exist.toml"],
    ["epsilon", "--alpha", "1.5", "--beta", "1.2"],
    ["hull", "--n", "4"],
])
def test_precondition_failures_exit_3(argv, capsys):
    assert main(argv) == EXIT_ERROR


def test_config_file_is_read(capsys, tmp_path):
    path = tmp_path / "lab.toml"
    path.write_text("[lab]\nn = 4\nsamples = 1\n")
    code, out = _run(capsys, "identities", "--config", str(path), "--single")
    assert code == EXIT_PASS
    report = json.loads(out)
    assert report["config"]["n"] == 4
    assert report["results"]["dimensions"] == [4]


def test_record_writes_the_ledger(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DATABASE_URL", f"sqlite:///{tmp_path / 'runs.sqlite3'}")
    monkeypatch.setattr(ledger, "db_manager", None)
    code, _ = _run(capsys, "step2", "--samples", "5", "--record")
    assert code == EXIT_PASS
    runs = ledger.get_db_manager().list_runs("step2")
    assert len(runs) == 1
    assert runs[0].verdict == "PASS"
    assert {check.name for check in ledger.get_db_manager().get_checks(runs[0].id)} == {
        "nonnegative", "case_identities"}


@pytest.mark.slow
def test_surgery_command(capsys):
    common = ["--theta", "0.05", "--restarts", "4", "--points", "101", "--refine", "16"]
    code, _ = _run(capsys, "surgery", "--radius", "0.9", *common)
    assert code == EXIT_PASS
    code, out = _run(capsys, "surgery", "--radius", "1.0", *common)
    assert code == EXIT_FAIL
    assert json.loads(out)["results"]["failing_points"] > 0


def test_oracle_cross_check_command(capsys):
    code, out = _run(capsys, "oracles", "--n", "5", "--samples", "1", "--restarts", "16", "--product")
    report = json.loads(out)
    assert code == EXIT_PASS
    assert set(report["checks"]) == {"verdict_agreement", "nesting", "psd_sufficiency", "witness_reproduction",
                                     "product_method"}
    assert report["checks"]["verdict_agreement"]["value"] == 0


def _stripped(out):
    processor = ReportProcessor()
    return processor.to_json(processor.strip_volatile(json.loads(out)))


@pytest.mark.parametrize("argv", [
    ["step2", "--samples", "5", "--seed", "9"],
    ["membership", "--kind", "generic", "--seed", "9", "--restarts", "8"],
])
def test_same_seed_replays_byte_identical(argv, capsys):
    _, first = _run(capsys, *argv)
    _, second = _run(capsys, *argv)
    assert _stripped(first) == _stripped(second)
    assert json.loads(first)["config"]["seed"] == 9


def test_invariance_results_do_not_depend_on_threads(capsys):
    argv = ["invariance", "--n", "5", "--samples", "2", "--horizon", "2", "--restarts", "4", "--seed", "5"]
    _, serial = _run(capsys, *argv, "--threads", "1")
    _, parallel = _run(capsys, *argv, "--threads", "2")
    serial, parallel = json.loads(serial), json.loads(parallel)
    processor = ReportProcessor()
    assert processor.to_json(serial["results"]) == processor.to_json(parallel["results"])
    assert serial["checks"] == parallel["checks"]


def test_pinching_invariants_are_reported(capsys, monkeypatch):
    code, out = _run(capsys, "pinching", "build", "--sigma", "1.5", "--theta", "0.05")
    assert code == EXIT_PASS
    assert set(json.loads(out)["checks"]) == {"concavity", "small_s", "asymptote"}
    short = PinchingFunction(n=5, sigma0=1.5, theta=0.05, sigmas=[1.25, 1.125])
    monkeypatch.setattr(app, "build", lambda *args, **kwargs: short)
    code, out = _run(capsys, "pinching", "build", "--sigma", "1.5", "--theta", "0.05")
    assert code == EXIT_FAIL
    assert not json.loads(out)["checks"]["asymptote"]["passed"]
