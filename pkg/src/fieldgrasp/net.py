"""Encode-process-decode graph network with one-step field prediction.

Per processor block (sum aggregation, residual updates)::

    e_ij <- e_ij + MLP_mesh([e_ij, h_i, h_j])          # mesh edges
    c_ij <- c_ij + MLP_contact([c_ij, h_i, h_j])       # contact edges
    h_j  <- h_j  + MLP_node([h_j, sum_i e_ij, sum_i c_ij])

Every MLP except the decoder ends in a LayerNorm. The first layer of the edge
MLPs is evaluated as ``e W_e + (h W_s)[senders] + (h W_r)[receivers]``, which
equals the concatenated form but projects node latents once per node instead
of once per edge.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import NonFiniteError, ShapeMismatchError
from .fem import FieldOutput
from .graph import MultiGraph, NormStats, apply_norm, denorm_output


@dataclass(frozen=True)
class ModelConfig:
    latent_size: int = 128
    message_passing_steps: int = 15
    mlp_hidden_layers: int = 2
    mlp_hidden_width: int = 128
    output_dim: int = 4
    node_dim: int = 9
    edge_dim: int = 5

    def __post_init__(self):
        for k in ("latent_size", "message_passing_steps", "mlp_hidden_layers",
                  "mlp_hidden_width", "node_dim", "edge_dim"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.output_dim not in (1, 3, 4):
            raise ValueError("output_dim must be 1 (stress), 3 (displacement) or 4 (both)")

    @property
    def outputs(self):
        return {4: "both", 1: "stress_only", 3: "def_only"}[self.output_dim]


def _mlp_shapes(cfg: ModelConfig, d_in, d_out):
    widths = [d_in] + [cfg.mlp_hidden_width] * cfg.mlp_hidden_layers + [d_out]
    return list(zip(widths[:-1], widths[1:]))


def mlp_specs(cfg: ModelConfig):
    """(name, in_dim, out_dim, layer_norm) for every MLP in the network."""
    L = cfg.latent_size
    specs = [("encoder_node", cfg.node_dim, L, True),
             ("encoder_mesh", cfg.edge_dim, L, True),
             ("encoder_contact", cfg.edge_dim, L, True)]
    for b in range(cfg.message_passing_steps):
        specs += [(f"block{b}.mesh_edge", 3 * L, L, True),
                  (f"block{b}.contact_edge", 3 * L, L, True),
                  (f"block{b}.node", 3 * L, L, True)]
    specs.append(("decoder", L, cfg.output_dim, False))
    return specs


class ModelParams:
    """Named weight arrays plus architecture config and normalisation stats."""

    def __init__(self, config: ModelConfig, tensors: dict, norm_stats: NormStats | None = None):
        self.config = config
        self.tensors = dict(tensors)
        self.norm_stats = norm_stats or NormStats.identity(config.node_dim, config.edge_dim,
                                                           config.output_dim)
        self._check_shapes()

    def _check_shapes(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatchError(f"parameter names differ: missing {missing[:3]}, extra {extra[:3]}")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise ShapeMismatchError(f"{k}: shape {self.tensors[k].shape} != {shape}")

    def names(self):
        return list(param_shapes(self.config))

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()},
                           self.norm_stats)

    def with_stats(self, stats):
        return ModelParams(self.config, self.tensors, stats)

    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def param_shapes(cfg: ModelConfig):
    shapes = {}
    for name, d_in, d_out, ln in mlp_specs(cfg):
        for i, (a, b) in enumerate(_mlp_shapes(cfg, d_in, d_out)):
            shapes[f"{name}.w{i}"] = (a, b)
            shapes[f"{name}.b{i}"] = (b,)
        if ln:
            shapes[f"{name}.ln_gamma"] = (d_out,)
            shapes[f"{name}.ln_beta"] = (d_out,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, norm_stats: NormStats | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases, and a zero final decoder layer."""
    rng = np.random.default_rng(seed)
    tensors = {}
    n_dec = cfg.mlp_hidden_layers
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln_gamma"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1 or name in (f"decoder.w{n_dec}",):
            tensors[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(cfg, tensors, norm_stats)


# --------------------------------------------------------------------------
# forward

def _check_finite(x: Tensor, name):
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite activation after {name}")
    return x


def _mlp(W, name, n_layers, x, ln, first=None):
    """Run MLP ``name``; ``first`` optionally replaces ``x @ w0`` (pre-bias)."""
    if first is not None:
        h = ops.relu(ops.add(first, W[f"{name}.b0"]))
    else:
        h = ops.linear(x, W[f"{name}.w0"], W[f"{name}.b0"], relu_out=True)
    for i in range(1, n_layers + 1):
        h = ops.linear(h, W[f"{name}.w{i}"], W[f"{name}.b{i}"], relu_out=i < n_layers)
    if ln:
        h = ops.layer_norm(h, W[f"{name}.ln_gamma"], W[f"{name}.ln_beta"])
    return _check_finite(h, name)


def _edge_first_layer(W, name, L, e, h, senders, receivers):
    w0 = W[f"{name}.w0"]
    we, ws, wr = ops.index(w0, slice(0, L)), ops.index(w0, slice(L, 2 * L)), ops.index(w0, slice(2 * L, 3 * L))
    t = ops.matmul(e, we)
    t = ops.add(t, ops.gather_rows(ops.matmul(h, ws), senders))
    return ops.add(t, ops.gather_rows(ops.matmul(h, wr), receivers))


def forward_tensors(cfg: ModelConfig, W: dict, graph: MultiGraph, node_x, mesh_x, contact_x):
    """Normalised prediction ``(n_nodes, output_dim)`` from (possibly tape-tracked) inputs.

    ``W`` maps parameter names to arrays or tape tensors; the ``*_x`` arguments
    are the already-normalised feature matrices.
    """
    if node_x.shape[1] != cfg.node_dim or mesh_x.shape[1] != cfg.edge_dim \
            or contact_x.shape[1] != cfg.edge_dim:
        raise ShapeMismatchError(
            f"graph feature widths ({node_x.shape[1]}, {mesh_x.shape[1]}, {contact_x.shape[1]}) "
            f"do not match config ({cfg.node_dim}, {cfg.edge_dim}, {cfg.edge_dim})")
    L = cfg.latent_size
    nl = cfg.mlp_hidden_layers
    n = graph.n_nodes
    ms, mr = graph.mesh_senders, graph.mesh_receivers
    cs, cr = graph.contact_senders, graph.contact_receivers

    h = _mlp(W, "encoder_node", nl, node_x, True)
    e = _mlp(W, "encoder_mesh", nl, mesh_x, True)
    c = _mlp(W, "encoder_contact", nl, contact_x, True)
    for b in range(cfg.message_passing_steps):
        name = f"block{b}.mesh_edge"
        de = _mlp(W, name, nl, None, True, _edge_first_layer(W, name, L, e, h, ms, mr))
        name = f"block{b}.contact_edge"
        dc = _mlp(W, name, nl, None, True, _edge_first_layer(W, name, L, c, h, cs, cr))
        e = ops.add(e, de)
        c = ops.add(c, dc)
        agg = ops.concat([h, ops.scatter_add(e, mr, n), ops.scatter_add(c, cr, n)], axis=1)
        h = ops.add(h, _mlp(W, f"block{b}.node", nl, agg, True))
    return _mlp(W, "decoder", nl, h, False)


def forward_normalized(params: ModelParams, graph_n: MultiGraph, tape: Tape | None = None,
                       leaves: dict | None = None):
    """Run on an already-normalised graph; returns the normalised output tensor."""
    W = leaves if leaves is not None else params.tensors
    return forward_tensors(params.config, W, graph_n, Tensor(graph_n.node_features),
                           Tensor(graph_n.mesh_features), Tensor(graph_n.contact_features))


def split_output(cfg: ModelConfig, y, n_object):
    """Real-unit output rows of object nodes -> (stress or None, displacement or None)."""
    y = y[:n_object]
    if cfg.output_dim == 4:
        return y[:, 0], y[:, 1:4]
    if cfg.output_dim == 1:
        return y[:, 0], None
    return None, y[:, :3]


def forward(params: ModelParams, graph: MultiGraph) -> FieldOutput:
    """Predicted object-vertex fields in Pa and m for a raw (unnormalised) graph.

    Channels a single-output model does not predict are returned as zeros.
    """
    out = forward_normalized(params, apply_norm(graph, params.norm_stats))
    y = denorm_output(out.data, params.norm_stats)
    stress, disp = split_output(params.config, y, graph.n_object)
    n = graph.n_object
    return FieldOutput(np.zeros(n) if stress is None else stress,
                       np.zeros((n, 3)) if disp is None else disp, graph.grasp_force)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    doc = {
        "config": asdict(params.config),
        "norm_stats": params.norm_stats.to_dict(),
        "tensors": {k: params.tensors[k].tolist() for k in params.names()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, expect: ModelConfig | None = None) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        cfg = ModelConfig(**doc["config"])
        stats = NormStats.from_dict(doc["norm_stats"])
        tensors = {k: np.array(v, dtype=np.float64) for k, v in doc["tensors"].items()}
    except (KeyError, TypeError) as exc:
        raise ShapeMismatchError(f"malformed checkpoint: {exc}") from exc
    if expect is not None and expect != cfg:
        params = ModelParams(cfg, tensors, stats)
        # re-validate the stored tensors against the expected architecture
        ModelParams(expect, params.tensors, stats)
    return ModelParams(cfg, tensors, stats)
