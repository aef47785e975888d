"""Dataset generation, loss, ablation switches and the training loop.

Dataset file (JSON lines, optionally gzipped), in this order:

* one ``{"kind": "meta", ...}`` header,
* one ``{"kind": "object", "mesh": {...}}`` line per object,
* one ``{"kind": "grasp", ...}`` line per grasp carrying the pose, the contact
  assignment and the serialised graph at the maximum force,
* one ``{"kind": "sample", ...}`` line per (grasp, substep) record holding
  ``F_g`` and the target fields.

Samples of one grasp share the grasp line's topology (contact fixed at initial
contact); only the per-edge force differs.
"""
from __future__ import annotations

import csv
import gzip
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import NonFiniteError, ShapeMismatchError
from .fem import FieldOutput, Material, assemble_stiffness, run_grasp_trajectory
from .graph import (EDGE_SCALAR, NODE_POS, MultiGraph, NormStats, apply_norm, build_graph,
                    edge_geometry, fit_norm_stats, norm_targets, set_grasp_force)
from .grasp import ContactAssignment, GraspPose, GripperModel, close_gripper, sample_antipodal
from .mesh_core import TetMesh, mesh_from_dict, mesh_to_dict
from .net import ModelConfig, ModelParams, forward, forward_tensors, init_params

ORACLE_VERSION = "linear-tet-fem/1"


@dataclass
class Ablation:
    outputs: str = "both"              # both | def_only | stress_only
    prediction: str = "one_step"       # one_step | multi_step
    force: str = "distributed"         # distributed | non_distributed
    force_location: str = "contact_edges"  # contact_edges | all_nodes

    def __post_init__(self):
        allowed = {"outputs": ("both", "def_only", "stress_only"),
                   "prediction": ("one_step", "multi_step"),
                   "force": ("distributed", "non_distributed"),
                   "force_location": ("contact_edges", "all_nodes")}
        for k, options in allowed.items():
            if getattr(self, k) not in options:
                raise ValueError(f"ablation {k}={getattr(self, k)!r} not in {options}")

    @property
    def output_dim(self):
        return {"both": 4, "stress_only": 1, "def_only": 3}[self.outputs]

    @property
    def target_columns(self):
        return {"both": [0, 1, 2, 3], "stress_only": [0], "def_only": [1, 2, 3]}[self.outputs]

    @property
    def node_dim(self):
        return 10 if self.force_location == "all_nodes" else 9


@dataclass
class TrainConfig:
    lr_start: float = 5e-5
    lr_end: float = 1e-6
    epochs: int = 25
    batch_size: int = 1
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")

    def learning_rate(self, step, total_steps):
        """Geometric interpolation from ``lr_start`` (step 0) to ``lr_end`` (last step)."""
        if total_steps <= 1:
            return self.lr_end
        frac = step / (total_steps - 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


@dataclass(eq=False)
class DatasetRecord:
    index: int
    object_id: str
    grasp_id: int
    grasp: GraspPose
    F_g: float
    k: int
    graph: MultiGraph
    stress: np.ndarray
    displacement: np.ndarray
    metadata: dict

    @property
    def target(self):
        return np.column_stack([self.stress, self.displacement])


@dataclass(eq=False)
class Dataset:
    meta: dict
    objects: dict
    grasps: list
    records: list

    def __len__(self):
        return len(self.records)


# --------------------------------------------------------------------------
# generation

def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps gzip output byte-identical across runs
        raw = open(path, mode + "b")
        return gzip.GzipFile(fileobj=raw, mode=mode + "b", mtime=0, filename=""), raw
    return open(path, mode + "b"), None


def _dump(fh, doc):
    fh.write((json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8"))


def generate_dataset(objects, path, grasps_per_object: int = 100, substeps: int = 50,
                     seed: int = 0, gripper: GripperModel | None = None,
                     poisson_ratio: float = 0.3, f_max: float = 15.0,
                     rotations: int = 4, epsilon: float = 0.005) -> dict:
    """Sample grasps, run the FEM oracle and write the dataset file.

    Writes exactly ``len(objects) * grasps_per_object * substeps`` sample lines.
    Returns a small summary dict.
    """
    gripper = gripper or GripperModel()
    objects = list(objects)
    streams = np.random.SeedSequence(seed).spawn(len(objects))
    fh, raw = _open(path, "w")
    n_samples = 0
    try:
        _dump(fh, {"kind": "meta", "version": 1, "oracle": ORACLE_VERSION, "seed": seed,
                   "substeps": substeps, "f_max": f_max, "poisson_ratio": poisson_ratio,
                   "grasps_per_object": grasps_per_object, "rotations": rotations,
                   "epsilon": epsilon, "gripper": asdict(gripper),
                   "unstable_grasp_filter": "no-op: the linear oracle has no dynamics"})
        for mesh in objects:
            _dump(fh, {"kind": "object", "mesh": mesh_to_dict(mesh)})
        grasp_id = 0
        for mesh, ss in zip(objects, streams):
            mat = Material(mesh.elastic_modulus, poisson_ratio)
            K = assemble_stiffness(mesh, mat)
            n_points = math.ceil(grasps_per_object / rotations)
            sub_seed = int(ss.generate_state(1)[0])
            poses = sample_antipodal(mesh, gripper, n_points, rotations, sub_seed, f_max,
                                     epsilon)[:grasps_per_object]
            for local, pose in enumerate(poses):
                pose, posed, contact = close_gripper(mesh, gripper, pose, epsilon)
                graph = build_graph(mesh, posed, contact, f_max)
                _dump(fh, {"kind": "grasp", "grasp_id": grasp_id, "object_id": mesh.id,
                           "point_id": local // rotations, "pose": pose.to_dict(), "contacts": contact.to_dict(),
                           "graph": graph.to_dict()})
                traj = run_grasp_trajectory(mesh, mat, contact, f_max, substeps, stiffness=K)
                for k, fo in enumerate(traj, start=1):
                    _dump(fh, {"kind": "sample", "index": n_samples, "grasp_id": grasp_id,
                               "object_id": mesh.id, "k": k, "F_g": fo.force_level,
                               "scale": fo.scale, "stress": fo.stress.tolist(),
                               "displacement": fo.displacement.tolist(),
                               "E": mesh.elastic_modulus, "nu": poisson_ratio,
                               "seed": seed, "oracle": ORACLE_VERSION})
                    n_samples += 1
                grasp_id += 1
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return {"path": str(path), "objects": len(objects), "grasps": grasp_id, "samples": n_samples}


def load_dataset(path) -> Dataset:
    fh, raw = _open(path, "r")
    meta, objects, grasps, records = {}, {}, [], []
    graphs = {}
    try:
        for line in fh:
            doc = json.loads(line)
            kind = doc.get("kind")
            if kind == "meta":
                meta = doc
            elif kind == "object":
                mesh = mesh_from_dict(doc["mesh"])
                objects[mesh.id] = mesh
            elif kind == "grasp":
                g = MultiGraph.from_dict(doc["graph"])
                graphs[doc["grasp_id"]] = g
                grasps.append({"grasp_id": doc["grasp_id"], "object_id": doc["object_id"],
                               "point_id": doc["point_id"],
                               "pose": GraspPose.from_dict(doc["pose"]),
                               "contacts": ContactAssignment.from_dict(doc["contacts"]),
                               "graph": g})
            elif kind == "sample":
                gid = doc["grasp_id"]
                stress = np.array(doc["stress"], dtype=np.float64)
                disp = np.array(doc["displacement"], dtype=np.float64).reshape(-1, 3)
                rec = DatasetRecord(doc["index"], doc["object_id"], gid, grasps[gid]["pose"],
                                    float(doc["F_g"]), int(doc["k"]),
                                    set_grasp_force(graphs[gid], float(doc["F_g"])),
                                    stress, disp,
                                    {"E": doc["E"], "nu": doc["nu"], "seed": doc["seed"],
                                     "point_id": grasps[gid]["point_id"],
                                     "oracle": doc["oracle"]})
                if len(stress) != objects[rec.object_id].n_vertices:
                    raise ShapeMismatchError(f"record {rec.index}: target length mismatch")
                records.append(rec)
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return Dataset(meta, objects, grasps, records)


# --------------------------------------------------------------------------
# splits

def split_by_grasp(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0):
    """Level-1 split: held-out grasps.

    All substeps of a grasp, and all rotations about the same sampled surface
    point, land on the same side. With symmetric pads those rotations are
    geometrically identical grasps.
    """
    return _split_on(dataset, lambda r: (r.object_id, r.metadata["point_id"]), test_fraction, seed)


def split_by_modulus(dataset: Dataset, test_fraction: float = 0.3, seed: int = 0):
    """Level-2 split over unique elastic moduli."""
    return _split_on(dataset, lambda r: r.metadata["E"], test_fraction, seed)


def split_by_object(dataset: Dataset, test_fraction: float = 1 / 6, seed: int = 0):
    """Level-3 split over unique objects."""
    return _split_on(dataset, lambda r: r.object_id, test_fraction, seed)


def _split_on(dataset, key, test_fraction, seed):
    keys = sorted({key(r) for r in dataset.records}, key=repr)
    if len(keys) < 2:
        raise ValueError("need at least two groups to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n_test = min(len(keys) - 1, max(1, int(round(test_fraction * len(keys)))))
    test_keys = {keys[i] for i in order[:n_test]}
    train = [r.index for r in dataset.records if key(r) not in test_keys]
    test = [r.index for r in dataset.records if key(r) in test_keys]
    return {"train": train, "test": test}


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"train": list(map(int, split["train"])), "test": list(map(int, split["test"]))}, fh)


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if set(d["train"]) & set(d["test"]):
        raise ValueError("train and test indices overlap")
    return d


# --------------------------------------------------------------------------
# ablations and training inputs

def apply_ablation_v3_v4(graph: MultiGraph, force: str = "distributed",
                         force_location: str = "contact_edges") -> MultiGraph:
    """Force-feature variants.

    ``non_distributed`` puts the raw ``F_g`` on every contact edge;
    ``all_nodes`` moves the force into an extra node channel (value ``F_g``)
    and zeroes the contact-edge force channel.
    """
    cf = graph.contact_features.copy()
    nf = graph.node_features
    if force == "non_distributed":
        cf[:, EDGE_SCALAR] = graph.grasp_force
    elif force != "distributed":
        raise ValueError(f"unknown force mode {force!r}")
    if force_location == "all_nodes":
        cf[:, EDGE_SCALAR] = 0.0
        nf = np.column_stack([nf, np.full(len(nf), graph.grasp_force)])
    elif force_location != "contact_edges":
        raise ValueError(f"unknown force location {force_location!r}")
    return graph.with_features(node_features=nf, contact_features=cf)


def displace_object(graph: MultiGraph, displacement) -> MultiGraph:
    """Move object nodes by ``displacement`` and refresh edge geometry (rollout input)."""
    nf = graph.node_features.copy()
    nf[: graph.n_object, NODE_POS] += displacement
    pos = nf[:, NODE_POS]
    mf = graph.mesh_features.copy()
    cf = graph.contact_features.copy()
    mf[:, :3], mf[:, 3] = edge_geometry(pos, graph.mesh_senders, graph.mesh_receivers)
    cf[:, :3], cf[:, 3] = edge_geometry(pos, graph.contact_senders, graph.contact_receivers)
    return graph.with_features(node_features=nf, mesh_features=mf, contact_features=cf)


def _previous_state(dataset, rec):
    """Ground-truth fields of the previous substep of the same grasp (zeros at k=1)."""
    if rec.k == 1:
        return np.zeros_like(rec.stress), np.zeros_like(rec.displacement)
    prev = dataset.records[rec.index - 1]
    assert prev.grasp_id == rec.grasp_id and prev.k == rec.k - 1
    return prev.stress, prev.displacement


def training_pair(dataset: Dataset, rec: DatasetRecord, ablation: Ablation):
    """(input graph, raw target) for one record under an ablation."""
    graph = apply_ablation_v3_v4(rec.graph, ablation.force, ablation.force_location)
    target = rec.target
    if ablation.prediction == "multi_step":
        ps, pd = _previous_state(dataset, rec)
        graph = displace_object(graph, pd)
        target = target - np.column_stack([ps, pd])
    return graph, target[:, ablation.target_columns]


def compute_loss(pred, target, ablation: Ablation | str = "both"):
    """Sum of the stress MSE and displacement MSE over object nodes (normalised space).

    ``pred``/``target`` have the ablation's output columns: (stress, dx, dy, dz),
    (stress,) or (dx, dy, dz).
    """
    outputs = ablation.outputs if isinstance(ablation, Ablation) else ablation
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs target {t.shape}")
    if outputs == "both":
        return ops.add(ops.mse(ops.index(pred, (slice(None), slice(0, 1))), t[:, :1]),
                       ops.mse(ops.index(pred, (slice(None), slice(1, 4))), t[:, 1:4]))
    return ops.mse(pred, t)


# --------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    epoch_loss: list
    log: list  # (epoch, step, lr, loss)
    initial_loss: float
    seconds: float

    def write_log(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "lr", "loss"])
            for row in self.log:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])


def prepare_training_data(dataset: Dataset, indices, ablation: Ablation):
    pairs = [training_pair(dataset, dataset.records[i], ablation) for i in indices]
    stats = fit_norm_stats([g for g, _ in pairs], [t[: g.n_object] for g, t in pairs])
    stats.metadata["loss_space"] = "z-scored targets"
    stats.metadata["ablation"] = asdict(ablation)
    stats.metadata["stress_p95"] = float(np.percentile(
        np.concatenate([dataset.records[i].stress for i in indices]), 95))
    return pairs, stats


def loss_and_grads(params: ModelParams, graph_n: MultiGraph, target_n, ablation: Ablation):
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in params.tensors.items()}
    out = forward_tensors(params.config, leaves, graph_n, Tensor(graph_n.node_features),
                          Tensor(graph_n.mesh_features), Tensor(graph_n.contact_features))
    pred = ops.index(out, slice(0, graph_n.n_object))
    loss = compute_loss(pred, target_n, ablation)
    names = list(leaves)
    grads = tape.gradient(loss, [leaves[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def dataset_loss(params: ModelParams, prepared) -> float:
    """Mean loss over prepared (normalised graph, normalised target) pairs."""
    from .net import forward_normalized
    total = 0.0
    for gn, tn, ablation in prepared:
        out = forward_normalized(params, gn)
        total += float(compute_loss(Tensor(out.data[: gn.n_object]), tn, ablation).data)
    return total / max(1, len(prepared))


def train(dataset: Dataset, split: dict, config: TrainConfig,
          model_config: ModelConfig | None = None, progress=None) -> TrainResult:
    """Adam with batch size 1 and a geometric learning-rate decay over all steps."""
    t0 = time.perf_counter()
    ab = config.ablation
    train_idx = list(split["train"])
    if not train_idx:
        raise ValueError("empty training split")
    model_config = model_config or ModelConfig()
    model_config = ModelConfig(**{**asdict(model_config), "output_dim": ab.output_dim,
                                  "node_dim": ab.node_dim})
    pairs, stats = prepare_training_data(dataset, train_idx, ab)
    stats.metadata["force_step"] = float(min(dataset.records[i].F_g for i in train_idx))
    prepared = [(apply_norm(g, stats), norm_targets(t, stats), ab) for g, t in pairs]
    params = init_params(model_config, config.seed, stats)
    opt = Adam(params.tensors, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    total = config.epochs * len(prepared)
    initial = dataset_loss(params, prepared)
    log, epoch_loss, step = [], [], 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        running = 0.0
        for i in order:
            gn, tn, _ = prepared[i]
            loss, grads = loss_and_grads(params, gn, tn, ab)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
            lr = config.learning_rate(step, total)
            opt.step(params.tensors, grads, lr)
            log.append((epoch, step, lr, loss))
            running += loss
            step += 1
        epoch_loss.append(running / len(prepared))
        if progress is not None:
            progress(epoch, epoch_loss[-1])
    return TrainResult(params, epoch_loss, log, initial, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# inference and evaluation

def predict(params: ModelParams, graph: MultiGraph) -> FieldOutput:
    """Object-vertex fields in Pa / m for a raw graph under the model's ablation.

    Multi-step models are rolled out from rest over ``substeps`` equal force
    increments (stored at training time), accumulating predicted increments.
    """
    meta = params.norm_stats.metadata
    ab = Ablation(**meta.get("ablation", {}))
    if ab.prediction == "one_step":
        return forward(params, apply_ablation_v3_v4(graph, ab.force, ab.force_location))
    f_step = meta["force_step"]
    n_steps = max(1, int(round(graph.grasp_force / f_step)))
    stress = np.zeros(graph.n_object)
    disp = np.zeros((graph.n_object, 3))
    for k in range(1, n_steps + 1):
        g = set_grasp_force(graph, graph.grasp_force * k / n_steps)
        g = displace_object(apply_ablation_v3_v4(g, ab.force, ab.force_location), disp)
        inc = forward(params, g)
        stress = stress + inc.stress
        disp = disp + inc.displacement
    return FieldOutput(stress, disp, graph.grasp_force)


@dataclass
class EvalReport:
    tau_s: float
    tau_d: float
    mae_stress_kpa: float
    mae_def_mm: float
    n_records: int
    n_groups: int
    per_record: list  # (index, object_id, k, pred mean stress, true, pred mean |d|, true)

    def summary(self):
        return {k: getattr(self, k) for k in
                ("tau_s", "tau_d", "mae_stress_kpa", "mae_def_mm", "n_records", "n_groups")}


def evaluate(params: ModelParams, dataset: Dataset, indices) -> EvalReport:
    """Kendall tau of per-grasp mean stress and mean deformation, plus field MAE.

    Grasps are ranked against each other within each (object, substep) group;
    the reported tau values are averages over groups with a defined tau.
    """
    from .planner import kendall_tau, mae
    from .errors import UndefinedRankError
    rows, ps, ts, pd, td = [], [], [], [], []
    for i in indices:
        r = dataset.records[i]
        fo = predict(params, r.graph)
        rows.append((r.index, r.object_id, r.k, float(fo.stress.mean()), float(r.stress.mean()),
                     float(np.linalg.norm(fo.displacement, axis=1).mean()),
                     float(np.linalg.norm(r.displacement, axis=1).mean())))
        ps.append(fo.stress)
        ts.append(r.stress)
        pd.append(fo.displacement)
        td.append(r.displacement)
    groups = {}
    for row in rows:
        groups.setdefault((row[1], row[2]), []).append(row)
    tau_s, tau_d = [], []
    for members in groups.values():
        if len(members) < 2:
            continue
        m = np.array([x[3:] for x in members])
        for out, a, b in ((tau_s, 0, 1), (tau_d, 2, 3)):
            try:
                out.append(kendall_tau(m[:, a], m[:, b]))
            except UndefinedRankError:
                pass
    ms, md = mae(np.concatenate(ps), np.concatenate(ts), np.concatenate(pd), np.concatenate(td))
    return EvalReport(float(np.mean(tau_s)) if tau_s else float("nan"),
                      float(np.mean(tau_d)) if tau_d else float("nan"),
                      ms, md, len(rows), len(groups), rows)
