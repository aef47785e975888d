"""Grasp objectives, ranking of sampled grasps, pose refinement and metrics.

Pose refinement differentiates the objective with respect to a local 6-vector
increment ``xi = (v, omega)`` of the grasp pose, ``T' = (R exp(omega), t + R v)``.
Within one refinement step the graph topology (contact pairs, edges) is
frozen; each finger's pad plane stays attached to the object vertex that set
its closure, so the pad positions, closing directions and contact-edge
geometry are smooth functions of ``xi``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import GraspMissError, NoContactError, ShapeMismatchError, UndefinedRankError
from .fem import Material, solve_equilibrium, contact_load
from .graph import EDGE_SCALAR, NODE_DIR, NODE_POS, build_graph
from .grasp import GraspPose, GripperModel, _in_pad, close_gripper, sample_antipodal
from .kernels import kendall_counts
from .mesh_core import TetMesh
from .net import ModelParams, forward_tensors

# Rank-quality levels reached by a 128x15 model trained on the full 100-grasp x 50-substep corpus.
FULL_SCALE_TAU_S = 0.78
FULL_SCALE_TAU_D = 0.66
FULL_SCALE_THRESHOLD_OVERLAP = 0.88


# --------------------------------------------------------------------------
# metrics

def kendall_tau(pred, truth) -> float:
    """Tie-corrected Kendall tau-b."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"lengths differ: {pred.size} vs {truth.size}")
    n = pred.size
    if n < 2:
        raise ValueError("kendall_tau needs at least two items")
    conc, disc, tx, ty, _ = kendall_counts(pred, truth)
    n0 = n * (n - 1) // 2
    if tx == n0 or ty == n0:
        raise UndefinedRankError("all values tied in one list; tau is undefined")
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def mae(pred_stress, true_stress, pred_disp, true_disp):
    """(stress MAE in kPa, displacement-component MAE in mm) over all nodes and samples."""
    ps, ts = np.asarray(pred_stress, float), np.asarray(true_stress, float)
    pd, td = np.asarray(pred_disp, float), np.asarray(true_disp, float)
    if ps.shape != ts.shape or pd.shape != td.shape:
        raise ShapeMismatchError("prediction and truth shapes differ")
    return float(np.mean(np.abs(ps - ts)) / 1e3), float(np.mean(np.abs(pd - td)) * 1e3)


def threshold_overlap(pred_q, true_q, n_extreme: int = 10, n_reference: int = 30) -> float:
    """Fraction of the predicted lowest/highest ``n_extreme`` grasps that fall in the
    ground-truth lowest/highest ``n_reference`` sets."""
    pred_q, true_q = np.asarray(pred_q), np.asarray(true_q)
    po, to = np.argsort(pred_q, kind="stable"), np.argsort(true_q, kind="stable")
    low = len(set(po[:n_extreme]) & set(to[:n_reference]))
    high = len(set(po[-n_extreme:]) & set(to[-n_reference:]))
    return (low + high) / (2 * n_extreme)


# --------------------------------------------------------------------------
# objective

@dataclass
class Objective:
    kind: str = "mean_deformation"  # mean_deformation | smooth_max_stress | mean_stress
    smooth_max_beta: float | None = None  # 1/Pa; None -> 10 / (95th-percentile training stress)
    sign: str = "minimize"

    def __post_init__(self):
        if self.kind not in ("mean_deformation", "smooth_max_stress", "mean_stress"):
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.sign not in ("minimize", "maximize"):
            raise ValueError("sign must be minimize or maximize")
        if self.smooth_max_beta is not None and not self.smooth_max_beta > 0:
            raise ValueError("smooth_max_beta must be positive")

    def beta(self, params: ModelParams | None = None):
        if self.smooth_max_beta is not None:
            return self.smooth_max_beta
        ref = None if params is None else params.norm_stats.metadata.get("stress_p95")
        if not ref:
            raise ValueError("smooth_max_beta unset and no reference stress in the model")
        return 10.0 / ref

    @property
    def _sgn(self):
        return 1.0 if self.sign == "minimize" else -1.0

    def reduce(self, stress, disp, beta=None):
        """Objective value (to be minimised) from numpy fields."""
        if self.kind == "mean_deformation":
            v = float(np.mean(np.linalg.norm(disp, axis=1)))
        elif self.kind == "mean_stress":
            v = float(np.mean(stress))
        else:
            x = beta * np.asarray(stress)
            m = x.max()
            v = float((m + math.log(np.exp(x - m).sum())) / beta)
        return self._sgn * v

    def reduce_tensor(self, stress, disp, beta=None):
        """Same as :meth:`reduce` on tape tensors."""
        if self.kind == "mean_deformation":
            v = ops.mean(ops.rownorm(disp))
        elif self.kind == "mean_stress":
            v = ops.mean(stress)
        else:
            v = ops.mul(ops.logsumexp(ops.mul(stress, beta)), 1.0 / beta)
        return ops.mul(v, self._sgn)


def oracle_q(mesh: TetMesh, pose: GraspPose, objective: Objective, gripper: GripperModel | None = None,
             epsilon: float = 0.005, poisson_ratio: float = 0.3, beta=None, stiffness=None) -> float:
    """Objective evaluated on the FEM oracle's fields at ``pose.F_g``."""
    gripper = gripper or GripperModel()
    pose, _, contact = close_gripper(mesh, gripper, pose, epsilon)
    fo = solve_equilibrium(mesh, Material(mesh.elastic_modulus, poisson_ratio),
                           contact_load(mesh, contact, pose.F_g), stiffness=stiffness)
    return objective.reduce(fo.stress, fo.displacement, beta)


# --------------------------------------------------------------------------
# model evaluation of a grasp

def model_ablation(params: ModelParams):
    from .trainer import Ablation
    return Ablation(**params.norm_stats.metadata.get("ablation", {}))


@dataclass(eq=False)
class GraspState:
    """A closed grasp with its frozen graph, used as the linearisation point."""
    pose: GraspPose
    graph: object
    active: np.ndarray  # object vertex fixing each finger's pad plane


def grasp_state(mesh: TetMesh, gripper: GripperModel, pose: GraspPose, epsilon: float = 0.005):
    pose, posed, contact = close_gripper(mesh, gripper, pose, epsilon)
    if not contact.both_fingers:
        raise NoContactError("grasp touches the object with one finger only")
    local, inside = _in_pad(mesh.vertices, gripper, pose)
    if not inside.any():
        raise GraspMissError("no object vertex inside the pad projection")
    idx = np.flatnonzero(inside)
    active = np.array([idx[np.argmax(local[idx, 0])], idx[np.argmin(local[idx, 0])]])
    return GraspState(pose, build_graph(mesh, posed, contact, pose.F_g), active)


def _pose_features(params: ModelParams, mesh: TetMesh, gripper: GripperModel, state: GraspState, xi):
    """Normalised (node, mesh-edge, contact-edge) feature tensors as functions of ``xi``."""
    from .trainer import apply_ablation_v3_v4
    ab = model_ablation(params)
    if ab.prediction != "one_step":
        raise ValueError("pose gradients need a one-step model")
    g = apply_ablation_v3_v4(state.graph, ab.force, ab.force_location)
    st = params.norm_stats
    n_o = g.n_object
    R, t = state.pose.rotation, state.pose.translation
    Rn = ops.matmul(R, ops.so3_exp(ops.index(xi, slice(3, 6))))
    tn = ops.add(t, ops.matmul(R, ops.index(xi, slice(0, 3))))
    r1 = ops.reshape(ops.index(Rn, (slice(None), 0)), (1, 3))
    tn_row = ops.reshape(tn, (1, 3))

    yz, _ = gripper.pad_grid()
    k = len(yz)
    blocks = []
    for f in (0, 1):
        va = mesh.vertices[state.active[f]]
        x_f = ops.sum(ops.mul(r1, ops.sub(va, tn_row)))
        blocks.append(ops.add(ops.add(ops.matmul(yz, ops.transpose(ops.index(Rn, (slice(None), slice(1, 3))))),
                                      ops.mul(ops.reshape(x_f, (1, 1)), r1)), tn_row))
    grip = ops.sub(ops.concat(blocks, axis=0), g.centroid)
    signs = np.repeat([-1.0, 1.0], k).reshape(-1, 1)
    dirs = ops.matmul(signs, r1)
    pos = ops.concat([g.node_features[:n_o, NODE_POS], grip], axis=0)

    nf = g.node_features
    grip_rows = [nf[n_o:, :NODE_POS.start], grip, dirs]
    if nf.shape[1] > NODE_DIR.stop:
        grip_rows.append(nf[n_o:, NODE_DIR.stop:])
    node_x = ops.concat([nf[:n_o], ops.concat(grip_rows, axis=1)], axis=0)

    def edge_block(s, r, scalar):
        d = ops.sub(ops.gather_rows(pos, r), ops.gather_rows(pos, s))
        return ops.concat([d, ops.reshape(ops.rownorm(d), (-1, 1)), scalar.reshape(-1, 1)], axis=1)

    m0 = g.n_object_mesh_edges
    mesh_x = ops.concat([g.mesh_features[:m0],
                         edge_block(g.mesh_senders[m0:], g.mesh_receivers[m0:],
                                    g.mesh_features[m0:, EDGE_SCALAR])], axis=0)
    contact_x = edge_block(g.contact_senders, g.contact_receivers, g.contact_features[:, EDGE_SCALAR])
    node_x = ops.div(ops.sub(node_x, st.node_mean), st.node_std)
    mesh_x = ops.div(ops.sub(mesh_x, st.mesh_mean), st.mesh_std)
    contact_x = ops.div(ops.sub(contact_x, st.contact_mean), st.contact_std)
    return g, node_x, mesh_x, contact_x


def _q_of_xi(params, mesh, gripper, state, objective, xi):
    g, node_x, mesh_x, contact_x = _pose_features(params, mesh, gripper, state, xi)
    out = forward_tensors(params.config, params.tensors, g, node_x, mesh_x, contact_x)
    st = params.norm_stats
    y = ops.add(ops.mul(ops.index(out, slice(0, g.n_object)), st.target_std), st.target_mean)
    cfg = params.config
    stress = ops.index(y, (slice(None), 0)) if cfg.output_dim in (1, 4) else None
    disp = None
    if cfg.output_dim in (3, 4):
        disp = ops.index(y, (slice(None), slice(cfg.output_dim - 3, cfg.output_dim)))
    if (objective.kind == "mean_deformation" and disp is None) or \
            (objective.kind != "mean_deformation" and stress is None):
        raise ValueError(f"model does not predict the field needed by {objective.kind}")
    beta = objective.beta(params) if objective.kind == "smooth_max_stress" else None
    return objective.reduce_tensor(stress, disp, beta)


def q_and_grad(params: ModelParams, mesh: TetMesh, gripper: GripperModel, state: GraspState,
               objective: Objective, xi=None):
    """Objective and its gradient w.r.t. the local pose increment (frozen topology)."""
    tape = Tape()
    xi_t = tape.leaf(np.zeros(6) if xi is None else np.asarray(xi, float), "xi")
    q = _q_of_xi(params, mesh, gripper, state, objective, xi_t)
    (grad,) = tape.gradient(q, [xi_t])
    return float(q.data), grad


def q_frozen(params, mesh, gripper, state, objective, xi) -> float:
    """Objective at increment ``xi`` without re-forming contacts."""
    return float(_q_of_xi(params, mesh, gripper, state, objective, Tensor(xi)).data)


def predict_fields(params: ModelParams, graph):
    """Real-unit object-vertex fields, honouring the model's ablation settings."""
    from .trainer import predict
    return predict(params, graph)


def evaluate_q(params: ModelParams, mesh: TetMesh, grasp: GraspPose, objective: Objective,
               gripper: GripperModel | None = None, epsilon: float = 0.005,
               with_gradient: bool = False):
    """Predicted objective of a grasp (closing the gripper first).

    Returns ``Q`` or ``(Q, dQ/dxi)`` when ``with_gradient``.
    """
    gripper = gripper or GripperModel()
    state = grasp_state(mesh, gripper, grasp, epsilon)
    if with_gradient:
        return q_and_grad(params, mesh, gripper, state, objective)
    fo = predict_fields(params, state.graph)
    beta = objective.beta(params) if objective.kind == "smooth_max_stress" else None
    return objective.reduce(fo.stress, fo.displacement, beta)


# --------------------------------------------------------------------------
# ranking

@dataclass
class RankReport:
    grasps: list
    q_pred: np.ndarray
    q_true: np.ndarray | None = None
    threshold_low: list = field(default_factory=list)
    threshold_high: list = field(default_factory=list)
    baseline: list = field(default_factory=list)
    best: int = 0
    tau_s: float | None = None
    tau_d: float | None = None
    mae_stress_kpa: float | None = None
    mae_def_mm: float | None = None
    overlap: float | None = None

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "q_pred", "q_true", "group", "pose"])
            groups = {i: "threshold_low" for i in self.threshold_low}
            groups.update({i: "threshold_high" for i in self.threshold_high})
            groups.update({i: "baseline" for i in self.baseline})
            for i, g in enumerate(self.grasps):
                qt = "" if self.q_true is None else repr(float(self.q_true[i]))
                w.writerow([i, repr(float(self.q_pred[i])), qt, groups.get(i, ""),
                            json.dumps(g.to_list())])

    def summary(self):
        return {"n": len(self.grasps), "best": self.best, "tau_s": self.tau_s, "tau_d": self.tau_d,
                "mae_stress_kpa": self.mae_stress_kpa, "mae_def_mm": self.mae_def_mm,
                "threshold_overlap": self.overlap}


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def rank_sampled_grasps(params: ModelParams, mesh: TetMesh, n: int = 100,
                        objective: Objective | None = None, seed: int = 0,
                        gripper: GripperModel | None = None, grasp_force: float = 15.0,
                        batch_size: int = 5, n_extreme: int = 10, epsilon: float = 0.005,
                        rotations: int = 4) -> RankReport:
    """Predict Q for ``n`` antipodal grasps and pick the extreme and baseline sets.

    Grasps are evaluated in batches of ``batch_size`` concurrent workers.
    """
    objective = objective or Objective()
    gripper = gripper or GripperModel()
    poses = sample_antipodal(mesh, gripper, math.ceil(n / rotations), rotations, seed,
                             grasp_force, epsilon)[:n]
    q = np.array(_map(lambda p: evaluate_q(params, mesh, p, objective, gripper, epsilon),
                      poses, batch_size))
    order = np.argsort(q, kind="stable")
    low = order[:n_extreme].tolist()
    high = order[::-1][:n_extreme].tolist()
    rest = np.setdiff1d(np.arange(n), low + high)
    rng = np.random.default_rng(seed)
    base = sorted(rng.choice(rest, size=min(n_extreme, len(rest)), replace=False).tolist())
    return RankReport(poses, q, threshold_low=low, threshold_high=high, baseline=base,
                      best=int(order[0]))


# --------------------------------------------------------------------------
# refinement

@dataclass
class RefinementConfig:
    steps: int = 12
    shrink: float = 0.5
    armijo: float = 1e-4
    max_motion: float = 0.005   # m, cap on the initial step's gripper-vertex motion
    max_backtracks: int = 10
    temperature0: float | None = None  # None -> 0.05 |Q(T_init)|
    decay: float = 0.7
    max_rejections: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must be in (0, 1)")


@dataclass
class RefinementResult:
    pose: GraspPose
    q: float
    q_init: float
    trace: list  # dicts: step, q, accepted, reason, step_size

    def to_dict(self):
        return {"pose": self.pose.to_dict(), "q": self.q, "q_init": self.q_init, "trace": self.trace}


def _max_motion(gripper: GripperModel, state: GraspState, direction):
    """Largest first-order gripper-vertex displacement for increment ``direction``."""
    local = (state.graph.node_features[state.graph.n_object:, NODE_POS] + state.graph.centroid
             - state.pose.translation) @ state.pose.rotation
    v, w = direction[:3], direction[3:]
    return float(np.max(np.linalg.norm(v + np.cross(w, local), axis=1)))


def refine_grasp(params: ModelParams, mesh: TetMesh, T_init: GraspPose,
                 objective: Objective | None = None, config: RefinementConfig | None = None,
                 gripper: GripperModel | None = None, epsilon: float = 0.005) -> RefinementResult:
    """Gradient refinement with Armijo backtracking and annealed acceptance.

    Returns the best-Q pose seen (re-closed, predicted Q).
    """
    objective = objective or Objective()
    config = config or RefinementConfig()
    gripper = gripper or GripperModel()
    rng = np.random.default_rng(config.seed)
    state = grasp_state(mesh, gripper, T_init, epsilon)
    q_cur, grad = q_and_grad(params, mesh, gripper, state, objective)
    q_init = q_cur
    best_pose, best_q = state.pose, q_cur
    temp = 0.05 * abs(q_init) if config.temperature0 is None else config.temperature0
    trace = [{"step": 0, "q": q_cur, "accepted": True, "reason": "init", "step_size": 0.0}]
    scale, rejections = 1.0, 0
    for step in range(1, config.steps + 1):
        direction = -grad
        motion = _max_motion(gripper, state, direction)
        if motion == 0.0 or not np.all(np.isfinite(direction)):
            trace.append({"step": step, "q": q_cur, "accepted": False, "reason": "zero gradient",
                          "step_size": 0.0})
            break
        alpha = scale * config.max_motion / motion
        slope = float(grad @ direction)
        for _ in range(config.max_backtracks):
            if q_frozen(params, mesh, gripper, state, objective, alpha * direction) \
                    <= q_cur + config.armijo * alpha * slope:
                break
            alpha *= config.shrink
        candidate = state.pose.compose_local(alpha * direction)
        try:
            new_state = grasp_state(mesh, gripper, candidate, epsilon)
        except (NoContactError, GraspMissError):
            rejections += 1
            scale *= 0.5
            trace.append({"step": step, "q": q_cur, "accepted": False, "reason": "no contact",
                          "step_size": alpha})
            if rejections >= config.max_rejections:
                break
            temp *= config.decay
            continue
        q_new, g_new = q_and_grad(params, mesh, gripper, new_state, objective)
        if q_new < best_q:
            best_pose, best_q = new_state.pose, q_new
        dq = q_new - q_cur
        accept = dq <= 0 or (temp > 0 and rng.random() < math.exp(-dq / temp))
        if accept:
            state, q_cur, grad = new_state, q_new, g_new
            rejections = 0
        else:
            rejections += 1
            scale *= 0.5
        trace.append({"step": step, "q": q_new, "accepted": bool(accept),
                      "reason": "downhill" if dq <= 0 else ("annealed" if accept else "uphill"),
                      "step_size": alpha})
        if rejections >= config.max_rejections:
            break
        temp *= config.decay
    return RefinementResult(best_pose, best_q, q_init, trace)


# --------------------------------------------------------------------------
# end-to-end experiment

LEVEL_SPLITS = {1: "split_by_grasp", 2: "split_by_modulus", 3: "split_by_object"}


@dataclass
class ExperimentConfig:
    dataset: str
    out_dir: str
    level: int = 1
    split: str | None = None        # explicit split file; built from ``level`` when absent
    test_fraction: float | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    objective: dict = field(default_factory=dict)
    n_rank: int = 100
    refine: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.level not in LEVEL_SPLITS:
            raise ValueError(f"generalization level must be one of {sorted(LEVEL_SPLITS)}")


def _chamfer_to_train(dataset, split):
    from .mesh_core import chamfer_distance
    train_ids = {dataset.records[i].object_id for i in split["train"]}
    test_ids = {dataset.records[i].object_id for i in split["test"]}
    out = {}
    for o in sorted(test_ids):
        out[o] = min(chamfer_distance(dataset.objects[o], dataset.objects[t])
                     for t in sorted(train_ids)) if o not in train_ids else 0.0
    return out


def full_experiment(config: ExperimentConfig) -> dict:
    """Train, evaluate, rank and refine for one generalization level.

    Writes ``train_log.csv``, ``model.json``, ``generalization.csv``,
    ``rank_<object>.csv``, ``boxplot.csv``, ``refined.json`` and
    ``report.json`` into ``out_dir``; returns the report dict.
    """
    from pathlib import Path
    from . import trainer
    from .net import ModelConfig, save_checkpoint

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = trainer.load_dataset(config.dataset)
    if config.split:
        split = trainer.load_split(config.split)
    else:
        kw = {} if config.test_fraction is None else {"test_fraction": config.test_fraction}
        split = getattr(trainer, LEVEL_SPLITS[config.level])(ds, seed=config.seed, **kw)
        trainer.save_split(split, out / "split.json")
    if not split["test"]:
        raise ValueError("split has no test records")
    tcfg = trainer.TrainConfig(**{"seed": config.seed, **config.train})
    result = trainer.train(ds, split, tcfg, ModelConfig(**config.model))
    result.write_log(out / "train_log.csv")
    save_checkpoint(result.params, out / "model.json")
    ev = trainer.evaluate(result.params, ds, split["test"])
    dc = _chamfer_to_train(ds, split)
    train_groups = sorted({ds.records[i].object_id for i in split["train"]})
    with open(out / "generalization.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "train_objects", "test_object", "d_C_mm", "tau_s", "tau_d",
                    "mae_stress_kpa", "mae_def_mm"])
        for o, d in dc.items():
            w.writerow([config.level, len(train_groups), o, d, ev.tau_s, ev.tau_d,
                        ev.mae_stress_kpa, ev.mae_def_mm])

    objective = Objective(**config.objective)
    gripper = GripperModel(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in ds.meta.get("gripper", {}).items()})
    eps = ds.meta.get("epsilon", 0.005)
    nu = ds.meta.get("poisson_ratio", 0.3)
    beta = objective.beta(result.params) if objective.kind == "smooth_max_stress" else None
    rcfg = RefinementConfig(**{"seed": config.seed, **config.refine})
    box, refined, rank_summaries = [], [], {}
    for oid in sorted({ds.records[i].object_id for i in split["test"]}):
        mesh = ds.objects[oid]
        rep = rank_sampled_grasps(result.params, mesh, config.n_rank, objective,
                                  config.seed, gripper, ds.meta.get("f_max", 15.0), epsilon=eps)
        rep.q_true = np.array([oracle_q(mesh, p, objective, gripper, eps, nu, beta)
                               for p in rep.grasps])
        rep.overlap = threshold_overlap(rep.q_pred, rep.q_true)
        try:
            rep.tau_s = kendall_tau(rep.q_pred, rep.q_true)
        except UndefinedRankError:
            rep.tau_s = None
        rep.write_csv(out / f"rank_{oid}.csv")
        rank_summaries[oid] = rep.summary()
        groups = {"all": list(range(len(rep.grasps))), "threshold_low": rep.threshold_low,
                  "threshold_high": rep.threshold_high}
        for name, idx in groups.items():
            box += [(oid, name, float(rep.q_true[i])) for i in idx]
        for name, idx, sign in (("refined_low", rep.threshold_low, "minimize"),
                                ("refined_high", rep.threshold_high, "maximize")):
            obj = Objective(objective.kind, objective.smooth_max_beta, sign)
            for i in idx:
                res = refine_grasp(result.params, mesh, rep.grasps[i], obj, rcfg, gripper, eps)
                q = oracle_q(mesh, res.pose, objective, gripper, eps, nu, beta)
                box.append((oid, name, q))
                refined.append({"object_id": oid, "group": name, "source_index": int(i),
                                "q_oracle_init": float(rep.q_true[i]), "q_oracle": q,
                                **res.to_dict()})
    with open(out / "boxplot.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["object_id", "group", "q_oracle"])
        w.writerows(box)
    with open(out / "refined.json", "w", encoding="utf-8") as fh:
        json.dump(refined, fh)
    report = {"level": config.level, "eval": ev.summary(), "d_C_mm": dc, "rank": rank_summaries,
              "train_seconds": result.seconds, "final_train_loss": result.epoch_loss[-1],
              "initial_train_loss": result.initial_loss,
              "reference_full_scale": {"tau_s": FULL_SCALE_TAU_S, "tau_d": FULL_SCALE_TAU_D,
                                       "threshold_overlap": FULL_SCALE_THRESHOLD_OVERLAP}}
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    return report
