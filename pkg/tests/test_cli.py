import csv
import json
import math
import subprocess
import sys

import pytest

from glwalk.cli import load_config, main, run_digest

DIAG21 = {"dim": 2, "kind": "point-mass", "atoms": [{"matrix": [[2.0, 0.0], [0.0, 1.0]], "prob": 1.0}]}
PROX = {"dim": 2, "kind": "finite-support", "atoms": [
    {"matrix": [[2.0, 1.0], [1.0, 1.0]], "prob": 0.4},
    {"matrix": [[1.0, 0.0], [1.0, 1.0]], "prob": 0.3},
    {"matrix": [[0.0, 1.0], [-1.0, 0.5]], "prob": 0.3}]}
ROT = {"dim": 2, "kind": "rotation-dilation"}


def bern_config():
    def rot(t, c):
        return [[c * math.cos(t), -c * math.sin(t)], [c * math.sin(t), c * math.cos(t)]]
    return {"dim": 2, "kind": "finite-support", "atoms": [
        {"matrix": rot(0.7, math.e), "prob": 0.5}, {"matrix": rot(2.1, 1 / math.e), "prob": 0.5}]}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, cfg, *extra, out="out"):
    path = write(tmp_path, cfg)
    return main(["run", path, "--out-dir", str(tmp_path / out), *extra])


# -- run -----------------------------------------------------------------------------------------


def test_point_mass_lyapunov_manifest(tmp_path, capsys):
    cfg = {"measure": DIAG21, "experiment": {"kind": "lyapunov", "n": 1000, "replicas": 10}, "seed": 5}
    assert run(tmp_path, cfg) == 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["summary"]["lambdaHat"] == math.log(2)
    assert man["seed"] == 5 and man["experiment"] == "lyapunov"
    for key in ("runDigest", "configDigest", "versions", "wallTimeSeconds", "measureDigest", "outputs"):
        assert key in man
    rows = list(csv.DictReader(open(tmp_path / "out" / "lyapunov-summary.csv")))
    assert float(rows[0]["lambdaHat"]) == math.log(2)
    assert rows[0]["run_digest"] == man["runDigest"]
    assert json.loads(capsys.readouterr().out)["lambdaHat"] == math.log(2)


def test_bad_probabilities_exit_2_naming_atoms(tmp_path, capsys):
    bad = dict(DIAG21, atoms=[{"matrix": [[2.0, 0.0], [0.0, 1.0]], "prob": 0.9}])
    cfg = {"measure": bad, "experiment": {"kind": "lyapunov", "n": 1000, "replicas": 10}}
    assert run(tmp_path, cfg) == 2
    assert "atoms" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("mutate,key", [
    (lambda c: c["experiment"].update(replcas=3), "replcas"),
    (lambda c: c.update(sede=1), "sede"),
    (lambda c: c["experiment"].update(n=10), "n"),
    (lambda c: c.update(seed=-1), "seed"),
    (lambda c: c.update(seed=2 ** 64), "seed"),
    (lambda c: c["experiment"].update(kind="spectral"), "kind"),
    (lambda c: c["measure"].update(kind="gaussian"), "measure.kind"),
])
def test_validation_errors_name_the_key(tmp_path, capsys, mutate, key):
    cfg = {"measure": dict(DIAG21), "experiment": {"kind": "lyapunov", "n": 1000, "replicas": 10}}
    mutate(cfg)
    assert run(tmp_path, cfg) == 2
    assert key in capsys.readouterr().err


def test_unreadable_config_exit_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["describe", str(p)]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_numerical_error_exit_3(tmp_path, capsys):
    cfg = {"measure": ROT, "experiment": {"kind": "lil", "nMax": 10_000, "replicas": 4}}
    assert run(tmp_path, cfg) == 3
    assert "sigma2_hat is 0" in capsys.readouterr().err


def test_json_format(tmp_path):
    cfg = {"measure": PROX, "experiment": {"kind": "contraction", "n": 40, "replicas": 20,
                                           "pointGrid": {"points": 8, "near": 1}, "bootstrap": 20}}
    assert run(tmp_path, cfg, "--format", "json") == 0
    body = json.loads((tmp_path / "out" / "contraction.json").read_text())
    assert body["summary"]["rateHat"] < 0 and body["rows"]
    assert body["run_digest"] == json.loads((tmp_path / "out" / "manifest.json").read_text())["runDigest"]


def test_seed_override_changes_digest(tmp_path):
    path = write(tmp_path, {"measure": PROX, "experiment": {"kind": "lyapunov", "n": 100, "replicas": 2}})
    a, _ = load_config(path)
    b, _ = load_config(path, seed=9)
    assert b.seed == 9 and run_digest(a) != run_digest(b)
    c = a.model_copy(update={"workers": 4})
    assert run_digest(c) == run_digest(a)


@pytest.mark.parametrize("experiment", [
    {"kind": "sigma2", "n": 100, "replicas": 100},
    {"kind": "sigma2", "n": 100, "replicas": 20, "method": "batch-means"},
    {"kind": "coupling-decay", "q": 1.0, "kMax": 10, "replicas": 5, "pointGrid": {"points": 4, "near": 1}},
    {"kind": "mz-rate", "p": 1.5, "nGrid": [10, 100], "replicas": 50, "bootstrap": 10},
    {"kind": "norm-gap", "nGrid": [10, 20, 40], "replicas": 10, "pointGrid": {"points": 4, "near": 0},
     "bootstrap": 10},
    {"kind": "functional-sup", "n": 100, "replicas": 50},
    {"kind": "clt-rate", "statistic": "ks", "nGrid": [8, 32, 256], "replicas": 50, "bootstrap": 10},
])
def test_every_kind_runs(tmp_path, experiment):
    assert run(tmp_path, {"measure": PROX, "experiment": experiment}) == 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["experiment"] == experiment["kind"]
    for name in man["outputs"]:
        assert (tmp_path / "out" / name).read_text().startswith("run_digest,")


def test_vbe_needs_no_measure(tmp_path):
    cfg = {"experiment": {"kind": "vbe", "configs": 12, "steps": 20, "replicas": 500}}
    assert run(tmp_path, cfg) == 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["summary"]["violations"] == 0 and man["measureDigest"] is None


def test_measure_required_for_walk_kinds(tmp_path, capsys):
    assert run(tmp_path, {"experiment": {"kind": "lyapunov", "n": 100, "replicas": 2}}) == 2
    assert "measure" in capsys.readouterr().err


def test_bernoulli_clt_rate_csv(tmp_path):
    cfg = {"measure": bern_config(), "seed": 1,
           "experiment": {"kind": "clt-rate", "r": 1.0, "nGrid": [16, 64, 256, 1024], "replicas": 4000,
                          "bootstrap": 20}}
    assert run(tmp_path, cfg) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "clt-rate-summary.csv")))
    assert 0.3 < float(rows[0]["exponentHat"]) < 0.7
    scan = list(csv.DictReader(open(tmp_path / "out" / "clt-rate.csv")))
    assert [int(r["n"]) for r in scan] == [16, 64, 256, 1024]
    assert set(scan[0]) == {"run_digest", "n", "distance", "distance_lo", "distance_hi"}


# -- determinism ----------------------------------------------------------------------------------


def test_outputs_byte_identical_across_workers(tmp_path):
    cfg = {"measure": PROX, "seed": 3,
           "experiment": {"kind": "clt-rate", "r": 2.0, "nGrid": [8, 32, 256], "replicas": 600, "bootstrap": 10}}
    assert run(tmp_path, cfg, "--workers", "1", out="w1") == 0
    assert run(tmp_path, cfg, "--workers", "3", out="w3") == 0
    for name in ("clt-rate.csv", "clt-rate-summary.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_env_worker_default(tmp_path, monkeypatch):
    monkeypatch.setenv("GLWALK_WORKERS", "2")
    cfg = {"measure": PROX, "experiment": {"kind": "lyapunov", "n": 100, "replicas": 2}}
    assert run(tmp_path, cfg) == 0
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["workers"] == 2


def test_bad_worker_flag(tmp_path):
    cfg = {"measure": PROX, "experiment": {"kind": "lyapunov", "n": 100, "replicas": 2}}
    assert run(tmp_path, cfg, "--workers", "0") == 2


# -- describe ------------------------------------------------------------------------------------


def test_describe_prints_plan_without_sampling(tmp_path, capsys):
    cfg = {"measure": PROX, "output": str(tmp_path / "never"),
           "experiment": {"kind": "clt-rate", "nGrid": [64, 256, 1024, 4096], "replicas": 1000}}
    assert main(["describe", write(tmp_path, cfg)]) == 0
    out = capsys.readouterr().out
    assert "calibration" in out and "ensemble n=4096" in out
    assert "total matrix draws: 9,536,000" in out and "memory estimate" in out
    assert not (tmp_path / "never").exists()


def test_describe_lil_stride_plan_error(tmp_path, capsys):
    cfg = {"measure": PROX, "experiment": {"kind": "lil", "nMax": 100_000, "replicas": 10, "stride": 4}}
    assert main(["describe", write(tmp_path, cfg)]) == 2
    assert "stride" in capsys.readouterr().err


def test_describe_short_grid_plan_error(tmp_path, capsys):
    cfg = {"measure": PROX, "experiment": {"kind": "clt-rate", "nGrid": [64, 4096], "replicas": 10}}
    assert main(["describe", write(tmp_path, cfg)]) == 2
    assert "nGrid" in capsys.readouterr().err


@pytest.mark.parametrize("experiment,key", [
    ({"kind": "sigma2", "n": 100, "replicas": 50}, "replicas"),
    ({"kind": "clt-rate", "nGrid": [64, 128, 256], "replicas": 10}, "1.5 decades"),
    ({"kind": "lyapunov", "n": 100, "replicas": 2, "start": [1.0, 0.0, 0.0]}, "start"),
    ({"kind": "vbe", "replicas": 10, "r": [1.0]}, "experiment.r"),
])
def test_describe_other_plan_errors(tmp_path, capsys, experiment, key):
    cfg = {"measure": PROX, "experiment": experiment}
    assert main(["describe", write(tmp_path, cfg)]) == 2
    assert key in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    cfg = {"measure": DIAG21, "experiment": {"kind": "lyapunov", "n": 100, "replicas": 2}}
    proc = subprocess.run([sys.executable, "-m", "glwalk.cli", "describe", write(tmp_path, cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "lyapunov" in proc.stdout
