"""
Dense float64 tensors with tape-based reverse-mode differentiation.

A Graph records every op in forward order together with a closure that maps
the upstream gradient to the gradients of the op's inputs. backward() walks
the tape in exact reverse order and accumulates gradients per node.

Only exact-shape and row-vector broadcasting are supported.
"""

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from src.gridsentinel.errors import (
    DimensionError,
    DomainError,
    GradCheckError,
    NumericError,
)

logger = logging.getLogger("gridsentinel.numerics")

Backward = Callable[[np.ndarray], tuple]


class Tensor:
    """A node output: a float64 array bound to the graph that produced it."""

    __slots__ = ("graph", "index", "values", "requires_grad")

    def __init__(self, graph, index, values, requires_grad):
        self.graph = graph
        self.index = index
        self.values = values
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return list(self.values.shape)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index})"


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[Backward]
    scope: Optional[str] = None


@dataclass
class Graph:
    """Computation tape. One graph per forward/backward pass."""

    training: bool = False
    seed: Optional[int] = None
    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self._scope = None

    @contextlib.contextmanager
    def scope(self, name):
        """Tag nodes recorded inside the block with a layer name."""
        previous = self._scope
        self._scope = name if previous is None else f"{previous}/{name}"
        try:
            yield
        finally:
            self._scope = previous

    # ---------- leaves ----------

    def variable(self, values):
        """A leaf whose gradient is tracked."""
        return self._leaf("variable", values, requires_grad=True)

    def constant(self, values):
        """A leaf excluded from differentiation."""
        return self._leaf("constant", values, requires_grad=False)

    def _leaf(self, op, values, requires_grad):
        array = np.array(values, dtype=np.float64)
        self._check_finite(op, array)
        tensor = Tensor(self, len(self.nodes), array, requires_grad)
        self.nodes.append(_Node(op, (), tensor, None, self._scope))
        return tensor

    # ---------- recording ----------

    def record(self, op, inputs, values, backward):
        self._check_finite(op, values)
        requires_grad = any(t.requires_grad for t in inputs)
        tensor = Tensor(self, len(self.nodes), values, requires_grad)
        self.nodes.append(
            _Node(op, tuple(t.index for t in inputs), tensor,
                  backward if requires_grad else None, self._scope)
        )
        return tensor

    def _check_finite(self, op, values):
        if not np.all(np.isfinite(values)):
            raise NumericError("non-finite values produced", op=op, scope=self._scope)

    # ---------- reverse pass ----------

    def backward(self, output):
        """Accumulate d(output)/d(node) for every node on the tape."""
        if output.values.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {output.shape}")
        self.grads = {output.index: np.ones_like(output.values)}
        for node in reversed(self.nodes[: output.index + 1]):
            upstream = self.grads.get(node.output.index)
            if upstream is None or node.backward is None:
                continue
            for index, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not self.nodes[index].output.requires_grad:
                    continue
                if index in self.grads:
                    self.grads[index] = self.grads[index] + grad
                else:
                    self.grads[index] = grad

    def grad(self, tensor):
        """Gradient of the last backward() output with respect to tensor."""
        grad = self.grads.get(tensor.index)
        if grad is None:
            return np.zeros_like(tensor.values)
        return grad


def _graph_of(*tensors):
    graph = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not graph:
            raise ValueError("operands belong to different graphs")
    return graph


# ---------- broadcasting ----------

def _is_row(shape, width):
    return shape == (width,) or shape == (1, width)


def _check_broadcast(op, a, b):
    sa, sb = a.values.shape, b.values.shape
    if sa == sb:
        return sa
    if len(sa) == 2 and _is_row(sb, sa[1]):
        return sa
    if len(sb) == 2 and _is_row(sa, sb[1]):
        return sb
    raise DimensionError(f"{op}: shapes {list(sa)} and {list(sb)} are not broadcast-compatible")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 1:
        return grad.sum(axis=0)
    return grad.sum(axis=0, keepdims=True)


# ---------- linear algebra ----------

def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    graph = _graph_of(a, b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return graph.record("matmul", (a, b), av @ bv, backward)


def transpose(a):
    graph = _graph_of(a)
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D tensor, got {a.shape}")
    return graph.record("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def reshape(a, shape):
    graph = _graph_of(a)
    original = a.values.shape
    try:
        values = a.values.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {e}") from e
    return graph.record("reshape", (a,), values, lambda g: (g.reshape(original),))


# ---------- elementwise ----------

def add(a, b):
    graph = _graph_of(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.values.shape, b.values.shape
    return graph.record("add", (a, b), a.values + b.values,
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    graph = _graph_of(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.values.shape, b.values.shape
    return graph.record("sub", (a, b), a.values - b.values,
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    graph = _graph_of(a, b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values

    def backward(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return graph.record("mul", (a, b), av * bv, backward)


def scale(a, factor):
    """Multiply by a Python scalar."""
    graph = _graph_of(a)
    factor = float(factor)
    return graph.record("scale", (a,), a.values * factor, lambda g: (g * factor,))


def relu(a):
    graph = _graph_of(a)
    mask = a.values > 0
    return graph.record("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def sigmoid(a):
    graph = _graph_of(a)
    out = expit(a.values)
    return graph.record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a):
    graph = _graph_of(a)
    out = np.tanh(a.values)
    return graph.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def softmax_rows(a):
    """Row-wise softmax with max subtraction."""
    graph = _graph_of(a)
    if a.values.ndim != 2:
        raise DimensionError(f"softmax_rows: expected 2-D tensor, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return graph.record("softmax_rows", (a,), out, backward)


def log(a):
    graph = _graph_of(a)
    if np.any(a.values <= 0):
        raise DomainError(f"log of non-positive input (min {a.values.min():.6g})")
    av = a.values
    return graph.record("log", (a,), np.log(av), lambda g: (g / av,))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient passes only where the input is inside."""
    graph = _graph_of(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return graph.record("clip", (a,), np.clip(a.values, lo, hi), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax-rows": softmax_rows,
    "log": log,
}


def elementwise(op, *args):
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------- normalization ----------

def layernorm(x, gain, bias, eps=1e-5):
    """Per-row standardization followed by an affine map."""
    graph = _graph_of(x, gain, bias)
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    original = x.values.shape
    xv = x.values.reshape(1, -1) if x.values.ndim == 1 else x.values
    d = xv.shape[1]
    if d < 1 or gain.values.shape != (d,) or bias.values.shape != (d,):
        raise DimensionError(f"layernorm: width {d} vs gain {gain.shape} / bias {bias.shape}")
    mean = xv.mean(axis=1, keepdims=True)
    centered = xv - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.values + bias.values
    gv = gain.values

    def backward(g):
        g2 = g.reshape(xv.shape)
        dxhat = g2 * gv
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx.reshape(original), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    return graph.record("layernorm", (x, gain, bias), out.reshape(original), backward)


# ---------- structural ----------

def concat_cols(*tensors):
    graph = _graph_of(*tensors)
    widths = [t.values.shape[1] for t in tensors]
    if len({t.values.shape[0] for t in tensors}) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[t.shape for t in tensors]}")
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return graph.record("concat_cols", tensors,
                        np.concatenate([t.values for t in tensors], axis=1), backward)


def concat_rows(*tensors):
    graph = _graph_of(*tensors)
    heights = [t.values.shape[0] for t in tensors]
    if len({t.values.shape[1:] for t in tensors}) != 1:
        raise DimensionError(f"concat_rows: widths differ {[t.shape for t in tensors]}")
    offsets = np.cumsum([0] + heights)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return graph.record("concat_rows", tensors,
                        np.concatenate([t.values for t in tensors], axis=0), backward)


def slice_rows(a, start, stop):
    graph = _graph_of(a)
    shape = a.values.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return graph.record("slice_rows", (a,), a.values[start:stop].copy(), backward)


def slice_cols(a, start, stop):
    graph = _graph_of(a)
    shape = a.values.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return graph.record("slice_cols", (a,), a.values[:, start:stop].copy(), backward)


def sum_all(a):
    graph = _graph_of(a)
    shape = a.values.shape
    return graph.record("sum_all", (a,), np.array(a.values.sum()),
                        lambda g: (np.full(shape, float(g)),))


def mean_all(a):
    graph = _graph_of(a)
    shape, n = a.values.shape, a.values.size
    return graph.record("mean_all", (a,), np.array(a.values.mean()),
                        lambda g: (np.full(shape, float(g) / n),))


def mean_groups(a, group_size):
    """Mean over consecutive blocks of group_size rows: (G*n, d) -> (G, d)."""
    graph = _graph_of(a)
    rows, d = a.values.shape
    if group_size < 1 or rows % group_size:
        raise DimensionError(f"mean_groups: {rows} rows not divisible into groups of {group_size}")
    groups = rows // group_size
    out = a.values.reshape(groups, group_size, d).mean(axis=1)

    def backward(g):
        return (np.repeat(g / group_size, group_size, axis=0),)

    return graph.record("mean_groups", (a,), out, backward)


def group_concat(first, rest, k):
    """Interleave one row of first with k rows of rest per group.

    (G, d) and (G*k, d) -> (G*(k+1), d); each group starts with its row of first.
    """
    graph = _graph_of(first, rest)
    groups, d = first.values.shape
    if rest.values.shape != (groups * k, d):
        raise DimensionError(f"group_concat: {rest.shape} does not hold {k} rows per group of {first.shape}")
    stacked = np.concatenate(
        [first.values[:, None, :], rest.values.reshape(groups, k, d)], axis=1
    ).reshape(groups * (k + 1), d)

    def backward(g):
        r = g.reshape(groups, k + 1, d)
        return r[:, 0, :].copy(), r[:, 1:, :].reshape(groups * k, d)

    return graph.record("group_concat", (first, rest), stacked, backward)


def propagate(a, adjacency):
    """Left-multiply every group of n rows by the fixed (n, n) matrix."""
    graph = _graph_of(a)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    rows, d = a.values.shape
    if adjacency.shape != (n, n) or rows % n:
        raise DimensionError(f"propagate: {a.shape} is not a stack of {n}-row groups")
    groups = rows // n
    out = np.matmul(adjacency, a.values.reshape(groups, n, d)).reshape(rows, d)

    def backward(g):
        return (np.matmul(adjacency.T, g.reshape(groups, n, d)).reshape(rows, d),)

    return graph.record("propagate", (a,), out, backward)


def topk_mean_rows(a, k):
    """Mean of the k largest entries of each row; ties go to the earlier column."""
    graph = _graph_of(a)
    rows, width = a.values.shape
    if not 1 <= k <= width:
        raise DimensionError(f"topk_mean_rows: k={k} outside [1, {width}]")
    order = np.argsort(-a.values, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(a.values, order, axis=1)

    def backward(g):
        full = np.zeros((rows, width))
        np.put_along_axis(full, order, np.repeat(g.reshape(rows, 1) / k, k, axis=1), axis=1)
        return (full,)

    return graph.record("topk_mean_rows", (a,), picked.mean(axis=1), backward)


def dropout(a, rate):
    """Inverted dropout; identity outside training or at rate 0."""
    graph = _graph_of(a)
    if not graph.training or rate <= 0:
        return a
    if rate >= 1:
        raise ValueError("dropout rate must be below 1")
    mask = (graph.rng.random(a.values.shape) >= rate) / (1.0 - rate)
    return graph.record("dropout", (a,), a.values * mask, lambda g: (g * mask,))


# ---------- recurrent cell ----------

@dataclass
class GRUCellParams:
    """Gate blocks are stacked as [z | r | n] along the last axis."""

    w_input: Tensor   # (d_in, 3H)
    w_hidden: Tensor  # (H, 3H)
    b_input: Tensor   # (3H,)
    b_hidden: Tensor  # (3H,)

    @property
    def hidden_size(self):
        return self.w_hidden.values.shape[0]


def gru_input_gates(x, params):
    """Input contribution to all three gates; can be computed for every step at once."""
    return add(matmul(x, params.w_input), params.b_input)


def gru_step(gates_x, h, params):
    """One GRU update from precomputed input gates."""
    size = params.hidden_size
    gates_h = add(matmul(h, params.w_hidden), params.b_hidden)
    z = sigmoid(add(slice_cols(gates_x, 0, size), slice_cols(gates_h, 0, size)))
    r = sigmoid(add(slice_cols(gates_x, size, 2 * size), slice_cols(gates_h, size, 2 * size)))
    candidate = tanh(add(slice_cols(gates_x, 2 * size, 3 * size),
                         mul(r, slice_cols(gates_h, 2 * size, 3 * size))))
    # h' = (1 - z) * n + z * h
    return add(candidate, mul(z, sub(h, candidate)))


def gru_cell(x, h, params):
    """GRU update for a batch of rows (or a single vector)."""
    d_in = params.w_input.values.shape[0]
    size = params.hidden_size
    if params.w_input.values.shape != (d_in, 3 * size) or params.w_hidden.values.shape != (size, 3 * size):
        raise DimensionError("gru_cell: inconsistent weight shapes")
    single = x.values.ndim == 1
    if single:
        x = reshape(x, (1, -1))
        h = reshape(h, (1, -1))
    if x.values.shape[1] != d_in or h.values.shape[1] != size:
        raise DimensionError(f"gru_cell: x {x.shape} / h {h.shape} vs d_in={d_in}, H={size}")
    out = gru_step(gru_input_gates(x, params), h, params)
    return reshape(out, (size,)) if single else out


# ---------- gradient checking ----------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: tuple
    analytic: dict
    numeric: dict
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def grad_check(f, point, step=1e-5, tol=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare reverse-mode gradients with central finite differences.

    f receives a fresh Graph and the variables (a Tensor, or a dict of Tensors
    when point is a dict) and must return a scalar Tensor.
    """
    single = not isinstance(point, dict)
    arrays = {"x": np.array(point, dtype=np.float64)} if single else {
        name: np.array(value, dtype=np.float64) for name, value in point.items()
    }

    def evaluate(values, backward=False):
        graph = Graph()
        variables = {name: graph.variable(v) for name, v in values.items()}
        try:
            out = f(graph, variables["x"] if single else variables)
        except NumericError as e:
            raise GradCheckError(f"function not finite near the check point: {e}") from e
        if out.values.size != 1:
            raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
        if backward:
            graph.backward(out)
            return {name: graph.grad(t) for name, t in variables.items()}
        return float(out.values.reshape(()))

    analytic = evaluate(arrays, backward=True)

    coords = [(name, idx) for name in arrays for idx in np.ndindex(arrays[name].shape)]
    if max_coords is not None and len(coords) > max_coords:
        picks = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    numeric = {name: np.full(a.shape, np.nan) for name, a in arrays.items()}
    max_rel, max_abs, worst = 0.0, 0.0, None
    for name, idx in coords:
        original = arrays[name][idx]
        arrays[name][idx] = original + step
        f_plus = evaluate(arrays)
        arrays[name][idx] = original - step
        f_minus = evaluate(arrays)
        arrays[name][idx] = original
        num = (f_plus - f_minus) / (2.0 * step)
        numeric[name][idx] = num
        ana = float(analytic[name][idx])
        abs_err = abs(ana - num)
        rel_err = abs_err / max(abs(ana), abs(num), floor)
        max_abs = max(max_abs, abs_err)
        if rel_err >= max_rel:
            max_rel, worst = rel_err, (name, idx)

    logger.debug("grad_check: %d coords, max rel error %.3e at %s", len(coords), max_rel, worst)
    if single:
        analytic, numeric = analytic["x"], numeric["x"]
    return GradCheckReport(max_rel, max_abs, len(coords), worst, analytic, numeric, tol)


# ---------- optimization ----------

class AdamOptimizer:
    """Bias-corrected Adam over a name -> array mapping."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        """Return updated arrays; params and grads share keys."""
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        updated = {}
        for name, value in params.items():
            grad = grads[name]
            m = self.beta1 * self._m.get(name, 0.0) + (1.0 - self.beta1) * grad
            v = self.beta2 * self._v.get(name, 0.0) + (1.0 - self.beta2) * grad * grad
            self._m[name], self._v[name] = m, v
            updated[name] = value - self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
        return updated


def global_norm(arrays):
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays.values())))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients together so their joint norm is at most max_norm."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm
