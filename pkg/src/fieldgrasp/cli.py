"""Command-line entry point: ``fieldgrasp <command> --config cfg.json --seed N``.

Every command reads a JSON config and writes its outputs to the paths named
there. On failure the process exits nonzero and prints one JSON object
``{"error": ..., "type": ..., "message": ...}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import FieldGraspError

EXIT_USAGE = 2
EXIT_DOMAIN = 1
EXIT_INTERNAL = 3


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise KeyError(f"config is missing {', '.join(missing)}")
    return [cfg[k] for k in keys]


def load_object(spec, default_id=None):
    """A mesh from a file path or a primitive spec ``{"kind", "dims", ...}``."""
    from .mesh_core import generate_primitive, load_mesh
    if isinstance(spec, str):
        return load_mesh(spec)
    spec = dict(spec)
    if "path" in spec:
        mesh = load_mesh(spec["path"])
        return mesh.with_modulus(spec["E"]) if "E" in spec else mesh
    kind, dims = _require(spec, "kind", "dims")
    return generate_primitive(kind, dims, spec.get("resolution", 4), spec.get("E", 1e6),
                              spec.get("id", default_id))


def _gripper(cfg):
    from .grasp import GripperModel
    return GripperModel(**cfg.get("gripper", {}))


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg, seed):
    from . import trainer
    objects = [load_object(o, f"object{i}") for i, o in enumerate(_require(cfg, "objects")[0])]
    out = cfg.get("out", "dataset.jsonl")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    summary = trainer.generate_dataset(
        objects, out, cfg.get("grasps_per_object", 30), cfg.get("substeps", 10), seed,
        _gripper(cfg), cfg.get("poisson_ratio", 0.3), cfg.get("f_max", 15.0),
        cfg.get("rotations", 4), cfg.get("epsilon", 0.005))
    split_cfg = cfg.get("split")
    if split_cfg:
        ds = trainer.load_dataset(out)
        from .planner import LEVEL_SPLITS
        fn = getattr(trainer, LEVEL_SPLITS[split_cfg.get("level", 1)])
        kw = {"test_fraction": split_cfg["test_fraction"]} if "test_fraction" in split_cfg else {}
        split = fn(ds, seed=seed, **kw)
        trainer.save_split(split, split_cfg.get("out", str(Path(out).with_suffix("")) + ".split.json"))
        summary["split"] = {"train": len(split["train"]), "test": len(split["test"])}
    return summary


def cmd_train(cfg, seed):
    from . import trainer
    from .net import ModelConfig, save_checkpoint
    dataset, split = _require(cfg, "dataset", "split")
    ds = trainer.load_dataset(dataset)
    sp = trainer.load_split(split)
    tc = trainer.TrainConfig(**{**cfg.get("train", {}), "seed": seed})
    res = trainer.train(ds, sp, tc, ModelConfig(**cfg.get("model", {})))
    out = cfg.get("out", "model.json")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, out)
    if cfg.get("log"):
        res.write_log(cfg["log"])
    return {"checkpoint": out, "initial_loss": res.initial_loss,
            "final_epoch_loss": res.epoch_loss[-1], "seconds": res.seconds}


def cmd_eval(cfg, seed):
    from . import trainer
    from .net import load_checkpoint
    ckpt, dataset, split = _require(cfg, "checkpoint", "dataset", "split")
    params = load_checkpoint(ckpt)
    ds = trainer.load_dataset(dataset)
    sp = trainer.load_split(split)
    ev = trainer.evaluate(params, ds, sp[cfg.get("subset", "test")])
    if cfg.get("out"):
        import csv
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tau_s", "tau_d", "mae_stress_kpa", "mae_def_mm", "n_records"])
            w.writerow([ev.tau_s, ev.tau_d, ev.mae_stress_kpa, ev.mae_def_mm, ev.n_records])
    return ev.summary()


def _objective(cfg):
    from .planner import Objective
    return Objective(**cfg.get("objective", {}))


def cmd_rank(cfg, seed):
    from .net import load_checkpoint
    from .planner import kendall_tau, oracle_q, rank_sampled_grasps, threshold_overlap
    ckpt, obj = _require(cfg, "checkpoint", "object")
    params = load_checkpoint(ckpt)
    mesh = load_object(obj, "object")
    objective = _objective(cfg)
    gripper = _gripper(cfg)
    eps = cfg.get("epsilon", 0.005)
    rep = rank_sampled_grasps(params, mesh, cfg.get("n", 100), objective, seed, gripper,
                              cfg.get("grasp_force", 15.0), cfg.get("batch_size", 5), epsilon=eps)
    if cfg.get("oracle", False):
        beta = objective.beta(params) if objective.kind == "smooth_max_stress" else None
        rep.q_true = np.array([oracle_q(mesh, p, objective, gripper, eps,
                                        cfg.get("poisson_ratio", 0.3), beta) for p in rep.grasps])
        rep.tau_s = kendall_tau(rep.q_pred, rep.q_true)
        rep.overlap = threshold_overlap(rep.q_pred, rep.q_true)
    out = cfg.get("out", "rank.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out)
    if cfg.get("grasps_out"):
        from .grasp import save_grasps
        save_grasps(cfg["grasps_out"], mesh.id, [rep.grasps[i] for i in rep.threshold_low])
    return {**rep.summary(), "out": out, "threshold_low": rep.threshold_low,
            "threshold_high": rep.threshold_high}


def cmd_refine(cfg, seed):
    from .grasp import load_grasps
    from .net import load_checkpoint
    from .planner import RefinementConfig, refine_grasp
    ckpt, obj, grasps = _require(cfg, "checkpoint", "object", "grasps")
    params = load_checkpoint(ckpt)
    mesh = load_object(obj, "object")
    _, poses = load_grasps(grasps)
    rc = RefinementConfig(**{**cfg.get("refine", {}), "seed": seed})
    results = [refine_grasp(params, mesh, p, _objective(cfg), rc, _gripper(cfg),
                            cfg.get("epsilon", 0.005)).to_dict() for p in poses]
    out = cfg.get("out", "refined.json")
    _write_json(out, {"object_id": mesh.id, "refined": results})
    return {"out": out, "n": len(results),
            "improved": int(sum(r["q"] < r["q_init"] for r in results))}


def cmd_fem_solve(cfg, seed):
    from .fem import Material, run_grasp_trajectory
    from .grasp import GraspPose, close_gripper, load_grasps
    obj = _require(cfg, "object")[0]
    mesh = load_object(obj, "object")
    gripper = _gripper(cfg)
    if "grasps" in cfg:
        _, poses = load_grasps(cfg["grasps"])
    else:
        poses = [GraspPose.from_dict(_require(cfg, "grasp")[0])]
    mat = Material(mesh.elastic_modulus, cfg.get("poisson_ratio", 0.3))
    docs = []
    for pose in poses:
        pose, _, contact = close_gripper(mesh, gripper, pose, cfg.get("epsilon", 0.005))
        traj = run_grasp_trajectory(mesh, mat, contact, cfg.get("f_max", pose.F_g),
                                    cfg.get("substeps", 1))
        docs.append({"pose": pose.to_dict(),
                     "states": [{"F_g": fo.force_level, "stress": fo.stress.tolist(),
                                 "displacement": fo.displacement.tolist()} for fo in traj]})
    out = cfg.get("out", "fields.json")
    _write_json(out, {"object_id": mesh.id, "results": docs})
    return {"out": out, "n": len(docs)}


def cmd_report(cfg, seed):
    from .planner import ExperimentConfig, full_experiment
    ec = ExperimentConfig(**{**cfg, "seed": seed})
    rep = full_experiment(ec)
    return {"out_dir": ec.out_dir, "eval": rep["eval"]}


COMMANDS = {
    "gen-data": (cmd_gen_data, "sample grasps and write an FEM-labelled dataset"),
    "train": (cmd_train, "train a surrogate model"),
    "eval": (cmd_eval, "rank correlation and MAE on a split"),
    "rank": (cmd_rank, "rank sampled grasps of an object with a trained model"),
    "refine": (cmd_refine, "gradient-refine grasp poses"),
    "fem-solve": (cmd_fem_solve, "run the FEM oracle for given grasps"),
    "report": (cmd_report, "train, evaluate, rank and refine for one generalization level"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="fieldgrasp")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
    return p


def _fail(exc, code):
    err = {"error": getattr(exc, "code", type(exc).__name__), "type": type(exc).__name__,
           "message": str(exc)}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            return 0
        return _fail(ValueError("invalid command line"), EXIT_USAGE)
    fn = COMMANDS[args.command][0]
    try:
        cfg = _load_config(args.config)
        result = fn(cfg, args.seed)
    except FieldGraspError as exc:
        return _fail(exc, EXIT_DOMAIN)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail(exc, EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001
        return _fail(exc, EXIT_INTERNAL)
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
