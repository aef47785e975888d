import csv
import json
import subprocess
import sys

import pytest

from fieldgrasp.cli import EXIT_DOMAIN, EXIT_USAGE, main

OBJ = {"kind": "cuboid", "dims": [0.05, 0.04, 0.03], "resolution": 3, "id": "box"}
OBJ2 = {"kind": "cylinder", "dims": [0.02, 0.02, 0.04], "resolution": 3, "id": "can", "E": 5e5}
MODEL = {"latent_size": 8, "message_passing_steps": 1, "mlp_hidden_width": 8}
TRAIN = {"lr_start": 1e-3, "lr_end": 1e-4, "epochs": 1}


def run(tmp_path, capsys, command, cfg, seed=0):
    path = tmp_path / f"{command}.json"
    path.write_text(json.dumps(cfg))
    code = main([command, "--config", str(path), "--seed", str(seed)])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), (json.loads(err) if err else None)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"objects": [OBJ, OBJ2], "out": str(d / "data.jsonl"), "grasps_per_object": 4, "substeps": 2,
           "split": {"level": 1, "out": str(d / "split.json")}}
    (d / "gen.json").write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(d / "gen.json"), "--seed", "3"]) == 0
    cfg = {"dataset": str(d / "data.jsonl"), "split": str(d / "split.json"), "model": MODEL,
           "train": TRAIN, "out": str(d / "model.json"), "log": str(d / "log.csv")}
    (d / "train.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(d / "train.json"), "--seed", "0"]) == 0
    return d


def test_gen_data_and_train_outputs(workdir):
    lines = (workdir / "data.jsonl").read_text().splitlines()
    assert sum('"kind":"sample"' in ln for ln in lines) == 2 * 4 * 2
    split = json.loads((workdir / "split.json").read_text())
    assert sorted(split["train"] + split["test"]) == list(range(16))
    assert (workdir / "model.json").exists()
    with open(workdir / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "step", "lr", "loss"] and len(rows) == 1 + len(split["train"])


def test_eval(workdir, tmp_path, capsys):
    code, res, _ = run(tmp_path, capsys, "eval", {"checkpoint": str(workdir / "model.json"),
                                                  "dataset": str(workdir / "data.jsonl"),
                                                  "split": str(workdir / "split.json"),
                                                  "out": str(tmp_path / "eval.csv")})
    assert code == 0 and set(res) >= {"tau_s", "tau_d", "mae_stress_kpa", "mae_def_mm"}
    assert (tmp_path / "eval.csv").read_text().startswith("tau_s,tau_d")


def test_rank_and_refine(workdir, tmp_path, capsys):
    code, res, _ = run(tmp_path, capsys, "rank", {
        "checkpoint": str(workdir / "model.json"), "object": OBJ, "n": 8, "batch_size": 2,
        "oracle": True, "out": str(tmp_path / "rank.csv"), "grasps_out": str(tmp_path / "low.json")})
    assert code == 0 and res["n"] == 8 and res["threshold_overlap"] is not None
    code, res, _ = run(tmp_path, capsys, "refine", {
        "checkpoint": str(workdir / "model.json"), "object": OBJ, "grasps": str(tmp_path / "low.json"),
        "refine": {"steps": 2}, "out": str(tmp_path / "refined.json")})
    assert code == 0
    doc = json.loads((tmp_path / "refined.json").read_text())
    assert len(doc["refined"]) == res["n"] > 0
    assert all(r["q"] <= r["q_init"] for r in doc["refined"])


def test_fem_solve(tmp_path, capsys):
    grasp = {"T": [1, 0, 0, 0, 0, 0, 0], "p_g": [0, 0], "F_g": 10.0}
    code, res, _ = run(tmp_path, capsys, "fem-solve", {"object": OBJ, "grasp": grasp, "substeps": 2,
                                                       "out": str(tmp_path / "f.json")})
    assert code == 0 and res["n"] == 1
    states = json.loads((tmp_path / "f.json").read_text())["results"][0]["states"]
    assert [s["F_g"] for s in states] == [5.0, 10.0]


def test_report(workdir, tmp_path, capsys):
    code, res, _ = run(tmp_path, capsys, "report", {
        "dataset": str(workdir / "data.jsonl"), "out_dir": str(tmp_path / "rep"), "level": 3,
        "test_fraction": 0.5, "model": MODEL, "train": TRAIN, "n_rank": 6, "refine": {"steps": 1}})
    assert code == 0
    for name in ("train_log.csv", "model.json", "generalization.csv", "boxplot.csv", "refined.json",
                 "report.json", "split.json"):
        assert (tmp_path / "rep" / name).exists(), name
    with open(tmp_path / "rep" / "boxplot.csv") as fh:
        groups = {row["group"] for row in csv.DictReader(fh)}
    assert groups == {"all", "threshold_low", "threshold_high", "refined_low", "refined_high"}


def test_missing_config_file(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.json")])
    err = json.loads(capsys.readouterr().err)
    assert code == EXIT_USAGE and err["type"] == "FileNotFoundError" and "message" in err


def test_missing_key(tmp_path, capsys):
    code, _, err = run(tmp_path, capsys, "eval", {"dataset": "x"})
    assert code == EXIT_USAGE and "checkpoint" in err["message"]


def test_domain_error(tmp_path, capsys):
    far = {"T": [1, 0, 0, 0, 0, 0.5, 0], "p_g": [0, 0], "F_g": 10.0}
    code, _, err = run(tmp_path, capsys, "fem-solve", {"object": OBJ, "grasp": far,
                                                     "out": str(tmp_path / "f.json")})
    assert code == EXIT_DOMAIN and err["type"] == "GraspMissError"


def test_unknown_command_subprocess():
    out = subprocess.run([sys.executable, "-m", "fieldgrasp.cli", "bogus"], capture_output=True, text=True)
    assert out.returncode == EXIT_USAGE
    assert json.loads(out.stderr.strip().splitlines()[-1])["error"]
