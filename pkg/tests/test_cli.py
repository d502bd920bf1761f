import json
from pathlib import Path

import numpy as np
import pytest

from qeclosure.cli import main
from qeclosure.config import ConfigError, config_hash, parse_config, substream_seed

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SCALAR = {
    "matrices": {"C": [[1.0]], "J": [[0.0]], "D": [[1.0]]},
    "closure": {"regime": "near_G", "epsilon": 0.5, "t_span": [0.0, 2.0], "dt": 0.01, "record_every": 10},
    "initial": {"lambda0": [1.0]},
    "seed": 1,
}

CHAIN = {
    "system": {"name": "harmonic_chain", "params": {"n": 8}},
    "observables": [{"kind": "position", "index": 0, "id": "q1"}, {"kind": "position", "index": 3, "id": "q4"}],
    "sampler": {"count": 20000, "analytic_gaussian": True},
    "closure": {"regime": "near_G", "epsilon": 0.5, "t_span": [0.0, 2.0], "dt": 0.01, "record_every": 10},
    "initial": {"lambda0": [0.4, 0.2]},
    "resolve": {"n_traj": 2000, "dt": 0.005, "t_grid": {"start": 0.1, "stop": 1.0, "step": 0.1}},
    "seed": 7,
}

FAST_VERIFY = {"C": 1.0, "D": 1.0, "epsilon": 0.5, "lambda0": 1.0, "t_end": 2.0, "hj_points": 400,
               "spd_instances": 5, "spd_dim": 2, "d_check_samples": 20000}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(tmp_path, command, doc, out="out", *extra):
    return main([command, "--config", write(tmp_path, doc), "--out", str(tmp_path / out), "--quiet", *extra])


def test_unknown_key_rejected(tmp_path, capsys):
    assert run(tmp_path, "reduce", {**SCALAR, "bogus": 1}) == 2
    assert "unknown key" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("patch", [
    {"closure": {"regime": "near_G", "epsilon": 1.5}},
    {"closure": {"regime": "nope", "epsilon": 0.5}},
    {"matrices": {"C": [[-1.0]], "J": [[0.0]], "D": [[1.0]]}},
    {"matrices": {"C": [[1.0]], "J": [[0.5]], "D": [[1.0]]}},
    {"initial": {"lambda0": [1.0, 2.0]}},
    {"closure": {"regime": "near_M", "epsilon": 0.5}},
    {"seed": -1},
])
def test_invalid_values_rejected(tmp_path, patch):
    assert run(tmp_path, "reduce", {**SCALAR, **patch}) == 2
    assert not (tmp_path / "out").exists()


def test_empty_observables(tmp_path, capsys):
    assert run(tmp_path, "matrices", {**CHAIN, "observables": []}) == 2
    assert "observables" in capsys.readouterr().err


def test_observable_index_out_of_range():
    bad = {**CHAIN, "observables": [{"kind": "position", "index": 8}]}
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_refuses_nonempty_out(tmp_path):
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / "keep.txt").write_text("x")
    assert run(tmp_path, "reduce", SCALAR) == 2
    assert (tmp_path / "out" / "keep.txt").exists()
    assert run(tmp_path, "reduce", SCALAR, "out", "--force") == 0
    assert not (tmp_path / "out" / "keep.txt").exists()


def test_reduce_scalar(tmp_path):
    assert run(tmp_path, "reduce", SCALAR) == 0
    out = tmp_path / "out"
    rows = (out / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 22
    t, lam = map(float, rows[-1].split(",")[:2])
    assert lam == pytest.approx(1 / np.cosh(0.5 * t), rel=1e-9)
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == {"config.json", "matrices.json", "trajectory.csv", "trajectory.json"}
    assert manifest["config_sha256"] == config_hash(parse_config(json.loads((out / "config.json").read_text())))


def test_reduce_even_analytic(tmp_path):
    doc = {**SCALAR, "closure": {**SCALAR["closure"], "regime": "even_analytic"}}
    assert run(tmp_path, "reduce", doc) == 0
    side = json.loads((tmp_path / "out" / "trajectory.json").read_text())
    assert side["provenance"]["regime"] == "even_analytic"


def test_matrices_deterministic(tmp_path):
    doc = {k: v for k, v in CHAIN.items() if k != "resolve"}
    assert run(tmp_path, "matrices", doc, "a") == 0
    assert run(tmp_path, "matrices", doc, "b") == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb
    mats = json.loads((tmp_path / "a" / "matrices.json").read_text())
    C = np.array(mats["C"])
    assert C[0, 0] == pytest.approx(8 / 9, rel=0.03) and C[0, 1] == pytest.approx(5 / 9, rel=0.05)
    assert run(tmp_path, "matrices", doc, "c", "--seed", "8") == 0
    mc = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert mc["files"]["matrices.json"] != ma["files"]["matrices.json"]


def test_resolve_worker_independent(tmp_path):
    assert run(tmp_path, "resolve", CHAIN, "w1", "--workers", "1") == 0
    assert run(tmp_path, "resolve", CHAIN, "w3", "--workers", "3") == 0
    a = (tmp_path / "w1" / "resolved.csv").read_bytes()
    b = (tmp_path / "w3" / "resolved.csv").read_bytes()
    assert a == b


def test_resolve_drift_failure_leaves_no_output(tmp_path):
    doc = {**CHAIN, "resolve": {**CHAIN["resolve"], "dt": 0.1}}
    from qeclosure.errors import IntegrityError

    with pytest.raises(IntegrityError):
        run(tmp_path, "resolve", doc)
    assert not (tmp_path / "out").exists()
    assert not any(p.name.startswith(".out-") for p in tmp_path.iterdir())


def test_verify_passes_and_detects_perturbation(tmp_path):
    doc = {"verify": FAST_VERIFY, "seed": 1}
    assert run(tmp_path, "verify", doc, "ok") == 0
    report = json.loads((tmp_path / "ok" / "verify_report.json").read_text())
    assert report["all_passed"]
    bad = {"verify": {**FAST_VERIFY, "perturb_D": 0.05}, "seed": 1}
    assert run(tmp_path, "verify", bad, "bad") == 1
    checks = {c["check"]: c["passed"] for c in json.loads((tmp_path / "bad" / "verify_report.json").read_text())["checks"]}
    assert checks["d_formula_consistency"] is False
    assert checks["riccati_vs_analytic"] is True


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.json")):
        parse_config(json.loads(p.read_text()))


def test_substream_seeds_distinct():
    a = substream_seed(1, "sampler")
    b = substream_seed(1, "resolver")
    assert a != b and substream_seed(1, "sampler") == a and substream_seed(2, "sampler") != a
