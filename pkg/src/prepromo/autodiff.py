"""Reverse-mode automatic differentiation on dense float64 arrays.

Small operator set, batch-first shapes (leading axis = samples), and a
first-class stop-gradient boundary. Everything is 64-bit: gradient checks
against central finite differences at tight tolerances are part of the
contract and are unreliable in 32-bit.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, UsageError

Array = np.ndarray

_node_ids = itertools.count()


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


class Node:
    """One value in a computation graph: data, parents, and a local backward rule."""

    __slots__ = ("data", "op", "nid", "parents", "_backward", "param")

    def __init__(self, data, op: str = "const", parents: tuple = (),
                 backward: Callable[[Array], tuple] | None = None,
                 param: "Parameter | None" = None):
        self.data = _as_array(data)
        self.op = op
        self.nid = next(_node_ids)
        self.parents = parents
        self._backward = backward
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.data.shape}, id={self.nid})"

    # Arithmetic sugar; non-Node operands become constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))


def constant(value) -> Node:
    """A leaf that never receives gradient."""
    return Node(value, op="const")


def _wrap(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


class Parameter:
    """Named trainable (or frozen) array. Frozen parameters are never stepped."""

    __slots__ = ("name", "data", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.data = _as_array(data)
        self.trainable = trainable

    def node(self) -> Node:
        return Node(self.data, op="param", param=self)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape}, trainable={self.trainable})"


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return Node(a.data + b.data, op="add", parents=(a, b), backward=back)


def sub(a: Node, b: Node) -> Node:
    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return Node(a.data - b.data, op="sub", parents=(a, b), backward=back)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting."""
    def back(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)
    return Node(a.data * b.data, op="mul", parents=(a, b), backward=back)


def matmul(a: Node, b: Node) -> Node:
    """(n, k) @ (k, m). Raises ConfigError on inner-dimension mismatch."""
    if a.data.shape[-1] != b.data.shape[0]:
        raise ConfigError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g
    return Node(a.data @ b.data, op="matmul", parents=(a, b), backward=back)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = list(nodes)
    sizes = [n.data.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Node(np.concatenate([n.data for n in nodes], axis=axis),
                op="concat", parents=tuple(nodes), backward=back)


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Node) -> Node:
    """1 / (1 + exp(-x)), computed stably; output strictly inside (0, 1).

    Saturated values are nudged to the nearest representable neighbor of
    0/1 so downstream logs of p and 1-p stay finite without special cases.
    """
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def back(g):
        return (g * out * (1.0 - out),)
    return Node(out, op="sigmoid", parents=(a,), backward=back)


def log(a: Node) -> Node:
    def back(g):
        return (g / a.data,)
    return Node(np.log(a.data), op="log", parents=(a,), backward=back)


def square(a: Node) -> Node:
    def back(g):
        return (2.0 * a.data * g,)
    return Node(a.data * a.data, op="square", parents=(a,), backward=back)


def mean(a: Node) -> Node:
    """Mean over all elements; returns a scalar node."""
    size = a.data.size

    def back(g):
        return (np.full(a.data.shape, float(g) / size),)
    return Node(a.data.mean(), op="mean", parents=(a,), backward=back)


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp values into [lo, hi]; gradient passes only where unclipped."""
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)
    return Node(np.clip(a.data, lo, hi), op="clip", parents=(a,), backward=back)


def stop_gradient(a: Node) -> Node:
    """Identity forward; the backward pass never crosses this node.

    Implemented as a parentless copy, so ancestors of the wrapped value are
    not even visited during backprop.
    """
    return Node(a.data, op="stop_gradient")


def embedding(table: Node, ids: Array) -> Node:
    """Row lookup: ids (n,) int -> (n, dim)."""
    ids = np.asarray(ids)

    def back(g):
        grad = np.zeros_like(table.data)
        for k in range(grad.shape[1]):
            grad[:, k] = np.bincount(ids, weights=g[:, k], minlength=grad.shape[0])
        return (grad,)
    return Node(table.data[ids], op="embedding", parents=(table,), backward=back)


def embedding_bag(table: Node, ids: Array, mask: Array) -> Node:
    """Masked mean-pool of rows: ids (n, L) int, mask (n, L) in {0,1} -> (n, dim).

    Rows with an all-zero mask pool to the zero vector.
    """
    ids = np.asarray(ids)
    mask = _as_array(mask)
    counts = mask.sum(axis=1)
    denom = np.maximum(counts, 1.0)
    rows = table.data[ids]                       # (n, L, dim)
    pooled = (rows * mask[:, :, None]).sum(axis=1) / denom[:, None]

    def back(g):
        contrib = (g / denom[:, None])[:, None, :] * mask[:, :, None]   # (n, L, dim)
        flat_ids = ids.reshape(-1)
        flat = contrib.reshape(-1, table.data.shape[1])
        grad = np.zeros_like(table.data)
        for k in range(grad.shape[1]):
            grad[:, k] = np.bincount(flat_ids, weights=flat[:, k], minlength=grad.shape[0])
        return (grad,)
    return Node(pooled, op="embedding_bag", parents=(table,), backward=back)


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph below one node.

    nodes[i] only depends on nodes[:i]; a backward sweep therefore visits
    each node exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Node) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Node, params: Iterable[Parameter] = ()) -> dict[str, Array]:
        """Gradients of the scalar root w.r.t. every trainable parameter.

        Trainable parameters unreachable from the root (or cut off by a
        stop-gradient) get an explicit zero entry when listed in `params`.
        """
        if root.data.shape != ():
            raise UsageError("backward requires a scalar loss node, got shape "
                             f"{root.data.shape}")
        grads: dict[int, Array] = {id(root): np.ones(())}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

        out: dict[str, Array] = {}
        for node in self.nodes:
            if node.param is not None and node.param.trainable:
                g = grads.get(id(node))
                if g is not None:
                    prev = out.get(node.param.name)
                    out[node.param.name] = g if prev is None else prev + g
        for p in params:
            if p.trainable and p.name not in out:
                out[p.name] = np.zeros_like(p.data)
        return out


def backward(loss: Node, params: Iterable[Parameter] = ()) -> dict[str, Array]:
    """Trace the graph below `loss` and return its gradient map."""
    return Tape.trace(loss).backward(loss, params)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

PROB_EPS = 1e-7


def bce(p: Node, y, eps: float = PROB_EPS) -> Node:
    """Binary cross-entropy, averaged when batched.

    p is clamped into [eps, 1 - eps] before the logs; additive probability
    compositions can land outside (0, 1) and the logs must stay finite.
    """
    y = _as_array(y)
    pc = clip(p, eps, 1.0 - eps)
    losses = -(mul(constant(y), log(pc)) + mul(constant(1.0 - y), log(constant(1.0) - pc)))
    return mean(losses)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

ACTIVATIONS = ("sigmoid", "tanh", "linear")


def tanh(a: Node) -> Node:
    """tanh(x) as 2*sigmoid(2x) - 1: zero-centered, built from the primitive set."""
    return sub(mul(constant(2.0), sigmoid(mul(constant(2.0), a))), constant(1.0))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """Plain fully connected stack; forward exposes every layer's activation.

    Intermediate activations are first-class outputs because downstream
    consumers tap them layer by layer, not just the head.
    """

    def __init__(self, name: str, layer_sizes: Sequence[int],
                 activations: Sequence[str], rng: np.random.Generator,
                 zero_last: bool = False):
        if len(activations) != len(layer_sizes) - 1:
            raise ConfigError(f"{name}: {len(layer_sizes) - 1} layers but "
                              f"{len(activations)} activations")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"{name}: unknown activation {act!r}")
        self.name = name
        self.sizes = list(layer_sizes)
        self.activations = list(activations)
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        n_layers = len(layer_sizes) - 1
        for i, (fi, fo) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            # zero_last starts the output layer at zero, so an untrained
            # probability head emits exactly 0.5.
            if zero_last and i == n_layers - 1:
                w = np.zeros((fi, fo))
            else:
                w = glorot_uniform(rng, fi, fo)
            self.weights.append(Parameter(f"{name}/w{i}", w))
            self.biases.append(Parameter(f"{name}/b{i}", np.zeros(fo)))

    def parameters(self) -> list[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: Node) -> list[Node]:
        """Per-layer outputs h^1..h^L; the last entry is the head output."""
        outs: list[Node] = []
        h = x
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if h.data.shape[-1] != w.data.shape[0]:
                raise ConfigError(
                    f"{self.name}: layer {i} expects width {w.data.shape[0]}, "
                    f"got {h.data.shape[-1]}")
            z = add(matmul(h, w.node()), b.node())
            if act == "sigmoid":
                h = sigmoid(z)
            elif act == "tanh":
                h = tanh(z)
            else:
                h = z
            outs.append(h)
        return outs


def mlp_forward(mlp: MLP, x: Node) -> list[Node]:
    return mlp.forward(x)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adagrad:
    """Per-coordinate Adagrad: accum += g^2; p -= lr * g / (sqrt(accum) + eps).

    Only trainable parameters are registered; anything else is untouched by
    step() no matter what the gradient map contains.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 0.001,
                 eps: float = 1e-10):
        self.lr = lr
        self.eps = eps
        self._params = [p for p in params if p.trainable]
        names = [p.name for p in self._params]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names: {sorted(names)}")
        self.accum = {p.name: np.zeros_like(p.data) for p in self._params}

    def step(self, grads: dict[str, Array]) -> None:
        for p in self._params:
            g = grads.get(p.name)
            if g is None:
                continue
            acc = self.accum[p.name]
            acc += g * g
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)


def adagrad_step(params: Iterable[Parameter], grads: dict[str, Array],
                 state: Adagrad) -> None:
    """Functional alias for a single optimizer step."""
    del params  # the state object already holds the trainable set
    state.step(grads)


def param_hash(params: Iterable[Parameter]) -> str:
    """SHA-256 over raw parameter bytes in name order; detects any mutation."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
