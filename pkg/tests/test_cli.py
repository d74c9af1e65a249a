import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from sctransfer.cli import ExperimentConfig, main, run
from sctransfer.errors import ConfigurationError

MANIFEST_KEYS = ["command", "status", "exit_code", "error", "config_sha256", "config", "seed",
                 "threads", "versions", "wall_time_s", "results", "files"]


def cfg(command, **model):
    m = {"class": "expanding", "maps": [{"name": "doubling"}],
         "couplings": [{"name": "one-plus-cos-times-sin"}], "delta": 0.0, "n": 128}
    m.update(model)
    return {"command": command, "model": m, "output": {"formats": ["csv"]}}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_fixed_point_uniform(tmp_path):
    assert run(cfg("fixed-point"), tmp_path) == 0
    rows = read_csv(tmp_path / "density.csv")
    vals = np.array([float(r[-1]) for r in rows[1:]])
    assert vals.size == 128 and np.abs(vals - 1).max() < 1e-10
    assert (tmp_path / "density.csv").read_bytes().count(b"\r\n") == 129


def test_fd_response_symmetric_coupling(tmp_path):
    c = cfg("fd-response", couplings=[{"name": "sine-difference"}], deltas=[1e-2, 5e-3])
    assert run(c, tmp_path) == 0
    rows = read_csv(tmp_path / "fd_response.csv")
    assert rows[0][:3] == ["delta", "l1_gap", "quotient_l1"]
    assert all(float(r[2]) <= 1e-6 for r in rows[1:])
    assert manifest(tmp_path)["results"]["response_l1"] <= 1e-8


def test_optimal_coupling_outputs(tmp_path):
    c = cfg("optimal-coupling", maps=[{"name": "perturbed-doubling", "params": {"eps": 0.1}}])
    c["params"] = {"degree": 2, "observable": {"kind": "cos", "k": 1}, "surface_n": 8,
                   "constraint": {"kind": "ball", "radius": 1.0}}
    assert run(c, tmp_path) == 0
    m = manifest(tmp_path)
    assert m["results"]["certificate"]["dominates"]
    assert m["results"]["certificate"]["samples"] == 10_000
    assert len(read_csv(tmp_path / "coefficients.csv")) == 25 + 1
    assert len(read_csv(tmp_path / "surface.csv")) == 64 + 1


def test_config_round_trip():
    c = ExperimentConfig.from_dict(cfg("sweep-delta", deltas=[0.01, 0.02]))
    again = ExperimentConfig.from_json(c.to_json())
    assert again == c and again.digest() == c.digest()


def test_schema_rejects_unknown_fields():
    bad = cfg("fixed-point")
    bad["model"]["colour"] = "red"
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(bad)


def test_exit_code_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"command": "dance", "model": {}}))
    assert main(["--config", str(p), "--out", str(tmp_path / "o")]) == 2
    m = manifest(tmp_path / "o")
    assert list(m) == MANIFEST_KEYS and m["exit_code"] == 2


def test_exit_code_regime_error(tmp_path):
    assert run(cfg("fixed-point", delta=5.0), tmp_path) == 3
    m = manifest(tmp_path)
    assert m["status"] == "error" and m["error"]["type"] == "RegimeError"


def test_exit_code_nonconvergence(tmp_path):
    c = cfg("fixed-point", delta=0.05)
    c["solver"] = {"method": "picard", "tol": 1e-14, "max_iter": 3}
    assert run(c, tmp_path) == 4


def test_determinism_and_manifest(tmp_path):
    c = cfg("simulate", maps=[{"name": "tent"}], couplings=[], delta=0.1, n=64,
            noise={"name": "truncated-gaussian", "sigma": 0.1}, **{"class": "reflecting-kernel-interval"})
    c["params"] = {"agents": 2000, "steps": 10, "burn_in": 5, "bins": 16}
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(c, a, seed=11) == 0 and run(c, b, seed=11) == 0
    for f in ("histogram.csv", "summary.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    m = manifest(a)
    assert list(m) == MANIFEST_KEYS
    assert m["seed"] == 11 and m["files"] == ["histogram.csv", "summary.csv"]
    # the manifest alone re-runs the experiment
    assert run(m["config"], tmp_path / "c", seed=m["seed"]) == 0
    assert (tmp_path / "c" / "histogram.csv").read_bytes() == (a / "histogram.csv").read_bytes()


def test_svg_written_when_requested(tmp_path):
    c = cfg("fixed-point")
    c["output"]["formats"] = ["csv", "svg"]
    assert run(c, tmp_path) == 0
    assert (tmp_path / "density.svg").read_text().startswith("<svg")


def test_module_entry_point(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg("converge-rate", delta=0.05)))
    out = subprocess.run([sys.executable, "-m", "sctransfer", "--config", str(p), "--out",
                          str(tmp_path / "o"), "--seed", "3"], capture_output=True)
    assert out.returncode == 0, out.stderr
    assert manifest(tmp_path / "o")["results"]
