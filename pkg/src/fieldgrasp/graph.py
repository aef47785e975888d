"""Multigraph construction from (object mesh, posed gripper, grasp force).

Node order is object vertices first, then gripper pad vertices. Every
undirected edge is stored twice: first all forward edges, then all reverse
edges with negated displacement.

Feature layout
--------------
nodes (9): one-hot type [gripper, object surface, object interior],
position (3, re-centred on the object vertex centroid), closing direction (3,
inward, gripper nodes only). The force-on-nodes ablation appends a 10th
channel.
mesh edges (5): displacement i->j (3), distance, elastic modulus (object
edges only).
contact edges (5): displacement (3), distance, per-edge force.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoContactError, ShapeMismatchError
from .grasp import ContactAssignment, PosedGripper
from .mesh_core import TetMesh, extract_surface

GRIPPER, SURFACE, INTERIOR = 0, 1, 2
NODE_ONEHOT = slice(0, 3)
NODE_POS = slice(3, 6)
NODE_DIR = slice(6, 9)
EDGE_DISP = slice(0, 3)
EDGE_DIST = 3
EDGE_SCALAR = 4
STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class MultiGraph:
    node_features: np.ndarray
    node_type: np.ndarray
    n_object: int
    mesh_senders: np.ndarray
    mesh_receivers: np.ndarray
    mesh_features: np.ndarray
    n_object_mesh_edges: int
    contact_senders: np.ndarray
    contact_receivers: np.ndarray
    contact_features: np.ndarray
    grasp_force: float
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def n_nodes(self):
        return len(self.node_features)

    @property
    def n_mesh_edges(self):
        return len(self.mesh_senders)

    @property
    def n_contact_edges(self):
        return len(self.contact_senders)

    def with_features(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {
            "node_features": self.node_features.tolist(),
            "node_type": self.node_type.tolist(),
            "n_object": int(self.n_object),
            "mesh_edges": [self.mesh_senders.tolist(), self.mesh_receivers.tolist()],
            "mesh_features": self.mesh_features.tolist(),
            "n_object_mesh_edges": int(self.n_object_mesh_edges),
            "contact_edges": [self.contact_senders.tolist(), self.contact_receivers.tolist()],
            "contact_features": self.contact_features.tolist(),
            "grasp_force": self.grasp_force,
            "centroid": self.centroid.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        f64 = lambda a, w: np.array(a, dtype=np.float64).reshape(-1, w)  # noqa: E731
        i64 = lambda a: np.array(a, dtype=np.int64).reshape(-1)  # noqa: E731
        nf = np.array(d["node_features"], dtype=np.float64)
        return cls(
            nf, i64(d["node_type"]), int(d["n_object"]),
            i64(d["mesh_edges"][0]), i64(d["mesh_edges"][1]), f64(d["mesh_features"], 5),
            int(d["n_object_mesh_edges"]),
            i64(d["contact_edges"][0]), i64(d["contact_edges"][1]), f64(d["contact_features"], 5),
            float(d["grasp_force"]), np.array(d["centroid"], dtype=np.float64),
        )


def _directed(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    s = np.concatenate([pairs[:, 0], pairs[:, 1]])
    r = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return s, r


def edge_geometry(positions, senders, receivers):
    disp = positions[receivers] - positions[senders]
    return disp, np.linalg.norm(disp, axis=1)


def build_graph(mesh: TetMesh, posed: PosedGripper, contacts: ContactAssignment,
                grasp_force: float) -> MultiGraph:
    """Multigraph for one candidate grasp state."""
    if contacts is None or len(contacts.contact_pairs) == 0:
        raise NoContactError("graph construction needs at least one contact pair")
    n_o = mesh.n_vertices
    n_g = len(posed.vertices)
    centroid = mesh.vertices.mean(axis=0)
    pos = np.concatenate([mesh.vertices, posed.vertices]) - centroid

    node_type = np.full(n_o + n_g, INTERIOR, dtype=np.int64)
    node_type[extract_surface(mesh)] = SURFACE
    node_type[n_o:] = GRIPPER
    nf = np.zeros((n_o + n_g, 9))
    nf[np.arange(n_o + n_g), node_type] = 1.0
    nf[:, NODE_POS] = pos
    nf[n_o:, NODE_DIR] = posed.closing_dirs[posed.finger]

    obj_s, obj_r = _directed(mesh.edges())
    grip_edges = np.asarray(posed.edges, dtype=np.int64).reshape(-1, 2)
    g_s, g_r = _directed(grip_edges + n_o)
    ms = np.concatenate([obj_s, g_s])
    mr = np.concatenate([obj_r, g_r])
    disp, dist = edge_geometry(pos, ms, mr)
    mf = np.zeros((len(ms), 5))
    mf[:, EDGE_DISP] = disp
    mf[:, EDGE_DIST] = dist
    mf[: len(obj_s), EDGE_SCALAR] = mesh.elastic_modulus

    pairs = np.asarray(contacts.contact_pairs, dtype=np.int64)
    cs, cr = _directed(np.column_stack([pairs[:, 0] + n_o, pairs[:, 1]]))
    disp, dist = edge_geometry(pos, cs, cr)
    cf = np.zeros((len(cs), 5))
    cf[:, EDGE_DISP] = disp
    cf[:, EDGE_DIST] = dist
    # one undirected contact edge per pair
    cf[:, EDGE_SCALAR] = grasp_force / len(pairs)

    return MultiGraph(nf, node_type, n_o, ms, mr, mf, len(obj_s), cs, cr, cf,
                      float(grasp_force), centroid)


def set_grasp_force(graph: MultiGraph, grasp_force: float) -> MultiGraph:
    """Same topology and geometry with a different total grasp force (distributed)."""
    cf = graph.contact_features.copy()
    cf[:, EDGE_SCALAR] = grasp_force / (graph.n_contact_edges // 2)
    return graph.with_features(contact_features=cf, grasp_force=float(grasp_force))


# --------------------------------------------------------------------------
# normalisation

@dataclass(frozen=True, eq=False)
class NormStats:
    node_mean: np.ndarray
    node_std: np.ndarray
    mesh_mean: np.ndarray
    mesh_std: np.ndarray
    contact_mean: np.ndarray
    contact_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    metadata: dict = field(default_factory=dict)

    _FIELDS = ("node_mean", "node_std", "mesh_mean", "mesh_std",
               "contact_mean", "contact_std", "target_mean", "target_std")

    @classmethod
    def identity(cls, node_dim=9, edge_dim=5, target_dim=4):
        z, o = np.zeros, np.ones
        return cls(z(node_dim), o(node_dim), z(edge_dim), o(edge_dim),
                   z(edge_dim), o(edge_dim), z(target_dim), o(target_dim))

    def to_dict(self):
        d = {k: getattr(self, k).tolist() for k in self._FIELDS}
        d["metadata"] = self.metadata
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(*[np.array(d[k], dtype=np.float64) for k in cls._FIELDS],
                   metadata=dict(d.get("metadata", {})))


def _moments(x):
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def fit_norm_stats(graphs, targets) -> NormStats:
    """Per-channel z-score statistics over every node/edge of the training graphs.

    ``targets`` are per-object-vertex arrays ``(n_object, 4)`` (stress, d_xyz);
    target statistics may be a subset of channels (``(n, 1)`` or ``(n, 3)``).
    One-hot node-type channels keep identity normalisation.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("need at least one training sample")
    nodes = np.concatenate([g.node_features for g in graphs])
    nm, ns = _moments(nodes)
    nm[NODE_ONEHOT], ns[NODE_ONEHOT] = 0.0, 1.0
    mm, mstd = _moments(np.concatenate([g.mesh_features for g in graphs]))
    cm, cstd = _moments(np.concatenate([g.contact_features for g in graphs]))
    tm, tstd = _moments(np.concatenate([np.asarray(t, dtype=np.float64) for t in targets]))
    return NormStats(nm, ns, mm, mstd, cm, cstd, tm, tstd,
                     {"positions": "recentred on object vertex centroid",
                      "n_graphs": len(graphs)})


def _check(width, mean, what):
    if width != len(mean):
        raise ShapeMismatchError(f"{what}: feature width {width} != stats width {len(mean)}")


def apply_norm(graph: MultiGraph, stats: NormStats) -> MultiGraph:
    _check(graph.node_features.shape[1], stats.node_mean, "nodes")
    _check(graph.mesh_features.shape[1], stats.mesh_mean, "mesh edges")
    _check(graph.contact_features.shape[1], stats.contact_mean, "contact edges")
    return graph.with_features(
        node_features=(graph.node_features - stats.node_mean) / stats.node_std,
        mesh_features=(graph.mesh_features - stats.mesh_mean) / stats.mesh_std,
        contact_features=(graph.contact_features - stats.contact_mean) / stats.contact_std,
    )


def denorm_graph(graph: MultiGraph, stats: NormStats) -> MultiGraph:
    """Exact inverse of :func:`apply_norm`."""
    return graph.with_features(
        node_features=graph.node_features * stats.node_std + stats.node_mean,
        mesh_features=graph.mesh_features * stats.mesh_std + stats.mesh_mean,
        contact_features=graph.contact_features * stats.contact_std + stats.contact_mean,
    )


def norm_targets(target, stats: NormStats):
    target = np.asarray(target, dtype=np.float64)
    _check(target.shape[1], stats.target_mean, "targets")
    return (target - stats.target_mean) / stats.target_std


def denorm_output(pred, stats: NormStats):
    """Map normalised network output back to Pa / m."""
    pred = np.asarray(pred, dtype=np.float64)
    _check(pred.shape[1], stats.target_mean, "outputs")
    return pred * stats.target_std + stats.target_mean
