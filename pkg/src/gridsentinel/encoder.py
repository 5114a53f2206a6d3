"""
Spatiotemporal encoder: per-timestep star-graph convolution, pooling,
multimodal fusion, a bidirectional GRU and per-timestep attack probabilities.

Batches are laid out time-major: row t*B + b holds sample b at timestep t,
and neighbor rows follow as (t, b, j).
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from src.gridsentinel.errors import CheckpointError, DimensionError
from src.gridsentinel.numerics import (
    Graph,
    GRUCellParams,
    add,
    concat_cols,
    concat_rows,
    dropout,
    global_norm,
    group_concat,
    gru_input_gates,
    gru_step,
    layernorm,
    matmul,
    mean_groups,
    propagate,
    relu,
    reshape,
    slice_cols,
    slice_rows,
    softmax_rows,
    transpose,
)
from src.gridsentinel.topology import normalized_adjacency

logger = logging.getLogger("gridsentinel.encoder")


class ModelParams(Mapping):
    """Ordered name -> float64 array mapping for the whole encoder."""

    def __init__(self, arrays):
        self._arrays = {name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()}

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def manifest(self):
        return [(name, tuple(a.shape)) for name, a in self._arrays.items()]

    def count(self):
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self):
        return ModelParams({name: a.copy() for name, a in self._arrays.items()})

    def global_norm(self):
        return global_norm(self._arrays)

    def same_manifest(self, other):
        return self.manifest() == other.manifest()

    @staticmethod
    def linear_combination(params, coefficients):
        """sum_i c_i * params_i, accumulated in list order."""
        if not params:
            raise ValueError("linear_combination needs at least one parameter set")
        out = {}
        for name in params[0]:
            acc = coefficients[0] * params[0][name]
            for p, c in zip(params[1:], coefficients[1:]):
                acc = acc + c * p[name]
            out[name] = acc
        return ModelParams(out)

    def tobytes(self):
        return b"".join(a.astype("<f8").tobytes() for a in self._arrays.values())

    @classmethod
    def frombytes(cls, manifest, payload):
        expected = sum(int(np.prod(shape)) for _, shape in manifest) * 8
        if len(payload) != expected:
            raise CheckpointError(f"payload holds {len(payload)} bytes, manifest needs {expected}")
        arrays, offset = {}, 0
        for name, shape in manifest:
            size = int(np.prod(shape)) * 8
            arrays[name] = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape).astype(np.float64)
            offset += size
        return cls(arrays)


@dataclass(frozen=True)
class InputDims:
    raw: int
    nbr: int
    meta: int


@dataclass
class EncoderOutput:
    logits: np.ndarray  # (..., W, 2)
    probs: np.ndarray   # (..., W)


def fused_width(cfg):
    return (3 if cfg.arch == "gru_only" else 4) * cfg.hidden


def param_shapes(cfg, dims):
    """Ordered parameter names and shapes for an architecture."""
    h, hg = cfg.hidden, cfg.gru_hidden
    shapes = {
        "raw.weight": (dims.raw, h), "raw.bias": (h,),
        "nbr.weight": (dims.nbr, h), "nbr.bias": (h,),
        "meta.weight": (dims.meta, h), "meta.bias": (h,),
    }
    if cfg.arch != "gru_only":
        shapes["gcn1.weight"] = (2 * h, 2 * h)
        shapes["gcn2.weight"] = (2 * h, h)
    width = fused_width(cfg)
    shapes["ln.gain"] = (width,)
    shapes["ln.bias"] = (width,)
    if cfg.arch != "gcn_only":
        for layer in range(cfg.gru_layers):
            d_in = width if layer == 0 else 2 * hg
            for direction in ("fwd", "bwd"):
                prefix = f"gru.l{layer}.{direction}"
                shapes[f"{prefix}.w_input"] = (d_in, 3 * hg)
                shapes[f"{prefix}.w_hidden"] = (hg, 3 * hg)
                shapes[f"{prefix}.b_input"] = (3 * hg,)
                shapes[f"{prefix}.b_hidden"] = (3 * hg,)
        shapes["head.weight"] = (2 * hg, 2)
    else:
        shapes["head.weight"] = (width, 2)
    shapes["head.bias"] = (2,)
    return shapes


def init_params(cfg, dims, seed=None):
    """Uniform fan-in initialization; layernorm starts as the identity."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    shapes = param_shapes(cfg, dims)
    arrays = {}
    for name, shape in shapes.items():
        if name == "ln.gain":
            arrays[name] = np.ones(shape)
            continue
        if name == "ln.bias":
            arrays[name] = np.zeros(shape)
            continue
        if name.startswith("gru."):
            fan_in = cfg.gru_hidden
        else:
            fan_in = shapes[name.replace(".bias", ".weight")][0]
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    params = ModelParams(arrays)
    logger.debug("initialized %s encoder with %d parameters", cfg.arch, params.count())
    return params


# ---------- building blocks ----------

def build_node_matrix(graph, h_raw, h_nbr, k):
    """Star node matrices: ego row [h_raw | 0], neighbor rows [0 | h_nbr].

    h_raw is (G, H) and h_nbr is (G*k, H); the result stacks G matrices of
    k + 1 rows each.
    """
    groups, hidden = h_raw.values.shape
    if h_nbr.values.shape != (groups * k, hidden):
        raise DimensionError(f"neighbor block {h_nbr.shape} does not match {groups} groups of {k}x{hidden}")
    ego = concat_cols(h_raw, graph.constant(np.zeros((groups, hidden))))
    neighbors = concat_cols(graph.constant(np.zeros((groups * k, hidden))), h_nbr)
    return group_concat(ego, neighbors, k)


def star_edges(k):
    """Undirected ego-to-neighbor edges of a star with k leaves."""
    return [(0, j) for j in range(1, k + 1)] + [(j, 0) for j in range(1, k + 1)]


def gcn_layer(z, edge_index, weight, num_nodes=None):
    """A_hat Z W for every stacked star; the caller applies the nonlinearity."""
    if num_nodes is None:
        num_nodes = 1 + max((max(e) for e in edge_index), default=0)
    return propagate(matmul(z, weight), normalized_adjacency(edge_index, num_nodes))


def _gru_params(weights, prefix):
    return GRUCellParams(
        weights[f"{prefix}.w_input"], weights[f"{prefix}.w_hidden"],
        weights[f"{prefix}.b_input"], weights[f"{prefix}.b_hidden"],
    )


def _bigru(graph, weights, x, cfg, batch, window):
    layer_in = x
    hg = cfg.gru_hidden
    for layer in range(cfg.gru_layers):
        outputs = {}
        for direction, steps in (("fwd", range(window)), ("bwd", range(window - 1, -1, -1))):
            params = _gru_params(weights, f"gru.l{layer}.{direction}")
            gates_x = gru_input_gates(layer_in, params)
            h = graph.constant(np.zeros((batch, hg)))
            for t in steps:
                h = gru_step(slice_rows(gates_x, t * batch, (t + 1) * batch), h, params)
                outputs[direction, t] = h
        layer_in = concat_rows(*[concat_cols(outputs["fwd", t], outputs["bwd", t]) for t in range(window)])
        if layer < cfg.gru_layers - 1:
            layer_in = dropout(layer_in, cfg.dropout_gru)
    return layer_in


@dataclass
class EncoderInputs:
    x_raw: np.ndarray   # (B, W, F_raw)
    x_nbr: np.ndarray   # (B, W, K, F_nbr)
    meta: np.ndarray    # (B, F_meta)

    @classmethod
    def from_samples(cls, samples):
        return cls(
            np.stack([s.x_raw for s in samples]),
            np.stack([s.x_nbr for s in samples]),
            np.stack([s.meta for s in samples]),
        )

    @property
    def batch(self):
        return self.x_raw.shape[0]

    @property
    def window(self):
        return self.x_raw.shape[1]

    @property
    def k(self):
        return self.x_nbr.shape[2]


def forward(graph, weights, inputs, cfg):
    """Record the encoder on graph; returns (logits (W*B, 2), probs (B, W))."""
    batch, window, k = inputs.batch, inputs.window, inputs.k
    rows = window * batch
    hidden = cfg.hidden
    f_raw, f_nbr, f_meta = inputs.x_raw.shape[2], inputs.x_nbr.shape[3], inputs.meta.shape[1]
    x_raw = graph.constant(inputs.x_raw.transpose(1, 0, 2).reshape(rows, f_raw))
    x_nbr = graph.constant(inputs.x_nbr.transpose(1, 0, 2, 3).reshape(rows * k, f_nbr))
    x_meta = graph.constant(np.broadcast_to(inputs.meta, (window, batch, f_meta)).reshape(rows, f_meta))

    with graph.scope("project"):
        h_raw = relu(add(matmul(x_raw, weights["raw.weight"]), weights["raw.bias"]))
        h_nbr = relu(add(matmul(x_nbr, weights["nbr.weight"]), weights["nbr.bias"]))
        h_meta = relu(add(matmul(x_meta, weights["meta.weight"]), weights["meta.bias"]))
        h_nbr_mean = mean_groups(h_nbr, k) if k > 0 else graph.constant(np.zeros((rows, hidden)))

    if cfg.arch == "gru_only":
        fused = concat_cols(h_nbr_mean, h_meta, h_raw)
    else:
        with graph.scope("gcn"):
            edges = star_edges(k)
            z = build_node_matrix(graph, h_raw, h_nbr, k)
            g1 = dropout(relu(gcn_layer(z, edges, weights["gcn1.weight"], k + 1)), cfg.dropout_gcn)
            g2 = dropout(relu(gcn_layer(g1, edges, weights["gcn2.weight"], k + 1)), cfg.dropout_gcn)
            pooled = mean_groups(g2, k + 1)
        fused = concat_cols(pooled, h_nbr_mean, h_meta, h_raw)

    with graph.scope("fusion"):
        z = layernorm(fused, weights["ln.gain"], weights["ln.bias"], cfg.ln_eps)

    if cfg.arch == "gcn_only":
        # rows stay independent, same as W = 1
        sequence = z
    else:
        with graph.scope("bigru"):
            sequence = _bigru(graph, weights, z, cfg, batch, window)

    with graph.scope("head"):
        logits = add(matmul(sequence, weights["head.weight"]), weights["head.bias"])
        attack = slice_cols(softmax_rows(logits), 1, 2)
        probs = transpose(reshape(attack, (window, batch)))
    return logits, probs


def temporal_context(cfg, window):
    """Timesteps one prediction can see; gcn_only scores each timestep alone."""
    return 1 if cfg.arch == "gcn_only" else window


def bind(graph, params, trainable=True):
    """Place every parameter array on the graph."""
    leaf = graph.variable if trainable else graph.constant
    return {name: leaf(value) for name, value in params.items()}


def encode_batch(batch, params, cfg, mode="eval", seed=None):
    """Run the encoder on same-client windows; dropout only in train mode."""
    inputs = batch if isinstance(batch, EncoderInputs) else EncoderInputs.from_samples(batch)
    graph = Graph(training=(mode == "train"), seed=seed)
    logits, probs = forward(graph, bind(graph, params, trainable=False), inputs, cfg)
    w, b = inputs.window, inputs.batch
    return EncoderOutput(
        logits=logits.values.reshape(w, b, 2).transpose(1, 0, 2).copy(),
        probs=probs.values.copy(),
    )


def encode_window(sample, params, cfg, mode="eval", seed=None):
    out = encode_batch([sample], params, cfg, mode, seed)
    return EncoderOutput(out.logits[0], out.probs[0])


def input_dims_of(samples):
    s = samples[0]
    return InputDims(raw=s.x_raw.shape[1], nbr=s.x_nbr.shape[2], meta=s.meta.shape[0])


def check_compatible(params, cfg, dims):
    expected = list(param_shapes(cfg, dims).items())
    if params.manifest() != expected:
        raise CheckpointError("parameter manifest does not match the model configuration")

