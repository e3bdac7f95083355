import copy
import json
import subprocess
import sys

import numpy as np
import pytest

from polyobs import cases, cli
from polyobs.errors import CertificateCheckFailed
from polyobs.model import load_model, save_model
from polyobs.observer import Trajectory
from polyobs.sdp import read_sdpa
from polyobs.synthesis import SynthesisCertificate

EXAMPLE = str(cases.fixture("example1.json"))
CONST_E = str(cases.fixture("example1_constE.json"))
CONTINUOUS = str(cases.fixture("example1_continuous.json"))
OBS1 = str(cases.fixture("paper_sec54_obs1.json"))
OBS2 = str(cases.fixture("paper_sec54_obs2.json"))


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def assert_manifest_complete(out, expected):
    doc = manifest(out)
    assert set(doc["outputs"]) == set(expected)
    for name, digest in doc["outputs"].items():
        assert cli.sha256(out / name) == digest
    assert doc["toolkit_version"] and doc["command"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", EXAMPLE, "--weights", "1,5,0.01", "--dump-sdpa", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def cert_file(synth_dir):
    return synth_dir / "certificate.json"


@pytest.fixture(scope="module")
def sim1_dir(tmp_path_factory, cert_file):
    out = tmp_path_factory.mktemp("sim1")
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--out", out) == 0
    return out


# --- discretize -------------------------------------------------------------------------

def test_discretize_case_study(tmp_path, capsys):
    assert run("discretize", CONTINUOUS, "--ts", 0.01, "--out", tmp_path) == 0
    sys_ = load_model(tmp_path / "model.json")
    for v, gamma in zip(sys_.vertices, cases.GAMMA_RANGE):
        want = cases.matrices_at((0.01, gamma * 0.01 / 2))
        for name in "EABFG":
            np.testing.assert_allclose(getattr(v, name), getattr(want, name), atol=1e-15)
    assert "vertex 1" in capsys.readouterr().out
    assert_manifest_complete(tmp_path, ["model.json"])


def test_discretize_zero_period(tmp_path):
    assert run("discretize", CONTINUOUS, "--ts", 0, "--out", tmp_path) == 1


def write_doc(tmp_path, doc, name="ct.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_discretize_zero_dynamics(tmp_path):
    doc = cases.continuous_document()
    for v in doc["vertices"]:
        v["A"] = [[0.0, 0.0], [0.0, 0.0]]
    out = tmp_path / "out"
    assert run("discretize", write_doc(tmp_path, doc), "--out", out) == 0
    for v in load_model(out / "model.json").vertices:
        np.testing.assert_array_equal(v.E, v.A)


def test_discretize_singular(tmp_path):
    doc = cases.continuous_document()
    # E_c - (T/2) A_c = 0 when A_c = (2/T) I.
    for v in doc["vertices"]:
        v["A"] = [[200.0, 0.0], [0.0, 200.0]]
    assert run("discretize", write_doc(tmp_path, doc), "--out", tmp_path / "out") == 2


def test_discretize_missing_file(tmp_path):
    assert run("discretize", tmp_path / "nope.json", "--out", tmp_path) == 1


# --- synth ------------------------------------------------------------------------------

def test_synth_case_study(synth_dir):
    cert = SynthesisCertificate.load(synth_dir / "certificate.json")
    assert cert.kappa_v == pytest.approx(0.5258, rel=0.05)
    assert cert.kappa_w == pytest.approx(6.6402, rel=0.05)
    assert cert.kappa_psi == pytest.approx(1353.5, rel=0.05)
    summary = (synth_dir / "summary.txt").read_text()
    assert "kappa_psi" in summary and "Optimal" in summary
    assert_manifest_complete(synth_dir, ["problem.dat-s", "certificate.json", "summary.txt"])
    doc = manifest(synth_dir)
    assert doc["options"]["variant"] == "thm1"
    assert list(doc["inputs"].values()) == [cli.sha256(EXAMPLE)]


def test_synth_sdpa_dump(synth_dir):
    prob = read_sdpa(synth_dir / "problem.dat-s")
    assert prob.num_vars == 95 and len(prob.blocks) == 19


def test_synth_thm2_needs_constant_descriptor(tmp_path):
    assert run("synth", EXAMPLE, "--variant", "thm2", "--out", tmp_path / "a") == 2
    assert not (tmp_path / "a").exists()


def test_synth_thm2_constant_descriptor(tmp_path):
    assert run("synth", CONST_E, "--variant", "thm2", "--out", tmp_path) == 0
    assert SynthesisCertificate.load(tmp_path / "certificate.json").variant == "thm2"


def test_synth_pure_psi_weight(tmp_path, cert_file):
    assert run("synth", EXAMPLE, "--weights", "0,0,1", "--out", tmp_path) == 0
    only = SynthesisCertificate.load(tmp_path / "certificate.json")
    assert only.kappa_psi <= SynthesisCertificate.load(cert_file).kappa_psi * (1 + 1e-6)


def test_synth_infeasible(tmp_path):
    path = tmp_path / "scalar.json"
    save_model(cases.scalar_unobservable(), path)
    assert run("synth", path, "--out", tmp_path / "out") == 3


def test_synth_certificate_check_failure(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise CertificateCheckFailed("block margin violated", "Optimal")

    monkeypatch.setattr(cli, "synthesize", broken)
    assert run("synth", EXAMPLE, "--out", tmp_path) == 4


@pytest.mark.parametrize("weights", ["1,2", "a,b,c", "-1,1,1", "0,0,0"])
def test_synth_bad_weights(tmp_path, weights):
    assert run("synth", EXAMPLE, f"--weights={weights}", "--out", tmp_path) == 1


def test_synth_schema_error(tmp_path):
    doc = json.loads(open(EXAMPLE).read())
    doc["Lambda"] = [[-1.0]]
    assert run("synth", write_doc(tmp_path, doc), "--out", tmp_path / "out") == 1


# --- simulate ---------------------------------------------------------------------------

def test_simulate_observer_one(sim1_dir):
    traj = Trajectory.load(sim1_dir / "trajectory.csv")
    e = np.linalg.norm(traj.e, axis=1)
    assert len(traj) == 10_001
    assert 1e-4 < e[2200:].max() < 1.0
    assert_manifest_complete(sim1_dir, ["trajectory.csv", "trajectory.meta.json", "plot_series.json"])
    assert manifest(sim1_dir)["seed"] == cases.CASE_STUDY_SEED


def test_simulate_observer_two(tmp_path, cert_file):
    assert run("simulate", EXAMPLE, cert_file, OBS2, "--out", tmp_path) == 0
    traj = Trajectory.load(tmp_path / "trajectory.csv")
    assert np.linalg.norm(traj.e, axis=1)[2200:].max() <= 1e-6


def test_simulate_byte_identical(tmp_path, cert_file):
    for d in ("a", "b"):
        assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", 500, "--out", tmp_path / d) == 0
    for name in ("trajectory.csv", "plot_series.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_horizon_zero(tmp_path, cert_file):
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", 0, "--out", tmp_path) == 0
    assert len((tmp_path / "trajectory.csv").read_text().splitlines()) == 2
    assert_manifest_complete(tmp_path, ["trajectory.csv", "trajectory.meta.json", "plot_series.json"])


def test_simulate_dimension_error(tmp_path, cert_file):
    doc = json.loads(open(OBS1).read())
    doc["x0"] = [1.0, 2.0, 3.0]
    assert run("simulate", EXAMPLE, cert_file, write_doc(tmp_path, doc, "s.json"), "--out", tmp_path / "o") == 2


def test_simulate_negative_horizon(tmp_path, cert_file):
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", -3, "--out", tmp_path) == 2


def test_simulate_missing_scenario(tmp_path, cert_file):
    assert run("simulate", EXAMPLE, cert_file, tmp_path / "none.json", "--out", tmp_path) == 1


def test_output_dir_from_environment(tmp_path, cert_file, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv(cli.OUT_ENV, str(target))
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", 5) == 0
    assert (target / "trajectory.csv").exists() and (target / "manifest.json").exists()


def test_default_output_dir(tmp_path, cert_file, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    monkeypatch.chdir(tmp_path)
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", 5) == 0
    assert (tmp_path / cli.DEFAULT_OUT / "trajectory.csv").exists()


def test_shared_directory_keeps_one_manifest(tmp_path, cert_file):
    assert run("simulate", EXAMPLE, cert_file, OBS1, "--horizon", 5, "--out", tmp_path) == 0
    assert run("verify", EXAMPLE, cert_file, "--suite", "assumptions", "--out", tmp_path) == 0
    doc = manifest(tmp_path)
    assert doc["command"] == "verify" and doc["previous"][0]["command"] == "simulate"
    assert len(list(tmp_path.glob("*manifest*"))) == 1


# --- verify -----------------------------------------------------------------------------

def test_verify_certificate_suite(tmp_path, cert_file):
    assert run("verify", EXAMPLE, cert_file, "--suite", "certificate", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and {r["name"] for r in report["reports"]} >= {"certificate_blocks", "proof_step"}


def test_verify_halved_certificate(tmp_path, cert_file):
    cert = SynthesisCertificate.load(cert_file).with_P_scaled(0.5, index=0)
    bad = tmp_path / "bad.json"
    cert.save(bad)
    assert run("verify", EXAMPLE, bad, "--suite", "certificate", "--out", tmp_path / "out") == 5
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert not report["passed"]
    assert all(r["witness"] is not None for r in report["reports"] if not r["passed"])


def test_verify_assumptions(tmp_path, cert_file, capsys):
    assert run("verify", EXAMPLE, cert_file, "--suite", "assumptions", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert "PASS  slope_restriction" in out and "PASS  partition_of_unity" in out


def test_verify_trajectory_with_manifest(tmp_path, cert_file, sim1_dir):
    csv = sim1_dir / "trajectory.csv"
    assert run("verify", EXAMPLE, cert_file, csv, "--suite", "all", "--manifest", sim1_dir / "manifest.json",
               "--out", tmp_path) == 0
    names = [r["name"] for r in json.loads((tmp_path / "report.json").read_text())["reports"]]
    assert "lyapunov_decrease" in names and "iss_bound" in names


def test_verify_manifest_mismatch(tmp_path, cert_file, sim1_dir):
    doc = manifest(sim1_dir)
    doc = copy.deepcopy(doc)
    doc["outputs"]["trajectory.csv"] = "0" * 64
    m = write_doc(tmp_path, doc, "manifest.json")
    assert run("verify", EXAMPLE, cert_file, sim1_dir / "trajectory.csv", "--manifest", m,
               "--out", tmp_path / "out") == 1


def test_verify_trajectory_suite_needs_file(tmp_path, cert_file):
    assert run("verify", EXAMPLE, cert_file, "--suite", "trajectory", "--out", tmp_path) == 1


def test_verify_missing_certificate(tmp_path):
    assert run("verify", EXAMPLE, tmp_path / "none.json", "--out", tmp_path) == 1


def test_verify_malformed_certificate(tmp_path):
    path = write_doc(tmp_path, {"variant": "thm1"}, "c.json")
    assert run("verify", EXAMPLE, path, "--out", tmp_path / "out") == 1


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "polyobs.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "polyobs" in res.stdout
