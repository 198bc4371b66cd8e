"""Batched reverse-mode differentiation for small tanh MLPs.

Values are float64 numpy arrays; the leading axis is the batch. The tape
records every primitive in creation order, so a single reversed sweep
visits nodes in reverse topological order.

Input gradients of an MLP are built as an explicit "gradient network"
(the closed-form tanh Jacobian chain) out of ordinary tape primitives.
Differentiating a loss that consumes those input gradients with respect
to the weights therefore needs no nested tapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Node:
    __slots__ = ("tape", "index", "value", "parents", "fn", "vjp", "requires_grad")

    def __init__(self, tape, index, value, parents, fn, vjp, requires_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.fn = fn
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    # -- leaves -----------------------------------------------------------

    def _leaf(self, value, requires_grad):
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), value, (), None, None, requires_grad)
        self.nodes.append(node)
        return node

    def var(self, value) -> Node:
        return self._leaf(value, True)

    def const(self, value) -> Node:
        return self._leaf(value, False)

    def _as_node(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeError("node belongs to a different tape")
            return x
        return self.const(x)

    def _op(self, fn: Callable, vjp: Callable, *parents: Node) -> Node:
        value = fn(*(p.value for p in parents))
        req = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, parents, fn, vjp, req)
        self.nodes.append(node)
        return node

    # -- primitives -------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._op(
            np.add,
            lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
            a, b,
        )

    def sub(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._op(
            np.subtract,
            lambda g, out, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
            a, b,
        )

    def mul(self, a, b) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        return self._op(
            np.multiply,
            lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            a, b,
        )

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op(lambda x: c * x, lambda g, out, x: (c * g,), a)

    def axpy(self, c: float, x: Node, y: Node) -> Node:
        """y + c * x, the kick/drift update shape."""
        c = float(c)
        return self._op(
            lambda u, v: v + c * u,
            lambda g, out, u, v: (c * g, g),
            x, y,
        )

    def tanh(self, a: Node) -> Node:
        return self._op(np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)

    def one_minus_square(self, a: Node) -> Node:
        return self._op(lambda x: 1.0 - x * x, lambda g, out, x: (-2.0 * g * x,), a)

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """x @ w.T + b for row-batched x."""
        return self._op(
            lambda x, w, b: x @ w.T + b,
            lambda g, out, x, w, b: (g @ w, g.T @ x, g.sum(axis=0)),
            x, w, b,
        )

    def matmul(self, x: Node, w: Node) -> Node:
        return self._op(
            lambda x, w: x @ w,
            lambda g, out, x, w: (g @ w.T, x.T @ g),
            x, w,
        )

    def broadcast_rows(self, a: Node, n: int) -> Node:
        """Repeat a single row n times."""
        return self._op(
            lambda x: np.broadcast_to(x.reshape(1, -1), (n, x.size)).copy(),
            lambda g, out, x: (g.sum(axis=0).reshape(x.shape),),
            a,
        )

    def rows(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g, out, x):
            full = np.zeros_like(x)
            full[start:stop] = g
            return (full,)

        return self._op(lambda x: x[start:stop], vjp, a)

    def cols(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g, out, x):
            full = np.zeros_like(x)
            full[:, start:stop] = g
            return (full,)

        return self._op(lambda x: x[:, start:stop], vjp, a)

    def concat_cols(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        k = a.value.shape[1]
        return self._op(
            lambda x, y: np.concatenate([x, y], axis=1),
            lambda g, out, x, y: (g[:, :k], g[:, k:]),
            a, b,
        )

    def sum(self, a: Node) -> Node:
        return self._op(
            lambda x: np.asarray(x.sum()),
            lambda g, out, x: (np.full_like(x, g),),
            a,
        )

    def sum_squares(self, a: Node) -> Node:
        return self._op(
            lambda x: np.asarray(np.sum(x * x)),
            lambda g, out, x: (2.0 * g * x,),
            a,
        )

    def row_sum_squares(self, a: Node) -> Node:
        return self._op(
            lambda x: np.sum(x * x, axis=1),
            lambda g, out, x: (2.0 * g[:, None] * x,),
            a,
        )

    def sqrt(self, a: Node) -> Node:
        return self._op(np.sqrt, lambda g, out, x: (0.5 * g / out,), a)

    # -- sweeps -----------------------------------------------------------

    def backward(self, output: Node) -> list:
        """Adjoints of every node with respect to a scalar output."""
        if output.tape is not self:
            raise TapeError("output node belongs to a different tape")
        if output.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.value.shape}")
        adj: list = [None] * len(self.nodes)
        adj[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            g = adj[node.index]
            if g is None or not node.parents or not node.requires_grad:
                continue
            grads = node.vjp(g, node.value, *(p.value for p in node.parents))
            for parent, pg in zip(node.parents, grads):
                if not parent.requires_grad:
                    continue
                i = parent.index
                adj[i] = pg if adj[i] is None else adj[i] + pg
        return adj

    def replay(self) -> list[np.ndarray]:
        """Recompute every op node from the recorded leaves."""
        values = []
        for node in self.nodes:
            if node.fn is None:
                values.append(node.value)
            else:
                values.append(node.fn(*(values[p.index] for p in node.parents)))
        return values


# -- MLPs -----------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if sizes[-1] != 1:
            raise ValueError(f"output dimension must be 1, got {sizes[-1]}")
        if any(n < 1 for n in sizes):
            raise ValueError(f"layer sizes must be positive: {sizes}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i + 1] * (s[i] + 1) for i in range(len(s) - 1))


@dataclass(frozen=True)
class MlpParams:
    """Weights are (fan_out, fan_in) matrices; biases are (fan_out,) vectors."""

    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        s = self.spec.layer_sizes
        if len(self.weights) != len(s) - 1 or len(self.biases) != len(s) - 1:
            raise ShapeError("number of layers does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (s[i + 1], s[i]) or b.shape != (s[i + 1],):
                raise ShapeError(
                    f"layer {i}: got W{w.shape}, b{b.shape}, expected W{(s[i + 1], s[i])}, b{(s[i + 1],)}"
                )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: MlpSpec, vec: np.ndarray, seed=None) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != spec.n_params:
            raise ShapeError(f"expected {spec.n_params} parameters, got {vec.size}")
        s = spec.layer_sizes
        ws, bs, off = [], [], 0
        for i in range(len(s) - 1):
            n = s[i + 1] * s[i]
            ws.append(vec[off:off + n].reshape(s[i + 1], s[i]).copy())
            off += n
            bs.append(vec[off:off + s[i + 1]].copy())
            off += s[i + 1]
        return cls(spec, tuple(ws), tuple(bs), seed)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.spec.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        spec = MlpSpec(tuple(d["layer_sizes"]))
        ws = tuple(np.array(w, dtype=np.float64).reshape(spec.layer_sizes[i + 1], spec.layer_sizes[i])
                   for i, w in enumerate(d["weights"]))
        bs = tuple(np.array(b, dtype=np.float64) for b in d["biases"])
        return cls(spec, ws, bs, d.get("seed"))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips doubles exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def zeros(spec: MlpSpec) -> MlpParams:
    return MlpParams.from_flat(spec, np.zeros(spec.n_params))


def init_gaussian(spec: MlpSpec, seed: int) -> MlpParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    s = spec.layer_sizes
    ws = tuple(rng.normal(0.0, 1.0 / np.sqrt(s[i]), size=(s[i + 1], s[i])) for i in range(len(s) - 1))
    bs = tuple(np.zeros(s[i + 1]) for i in range(len(s) - 1))
    return MlpParams(spec, ws, bs, seed)


class MlpNodes:
    """Parameter leaves of one MLP registered on a tape."""

    def __init__(self, tape: Tape, params: MlpParams, trainable: bool = True):
        leaf = tape.var if trainable else tape.const
        self.spec = params.spec
        self.weights = [leaf(w) for w in params.weights]
        self.biases = [leaf(b) for b in params.biases]

    def leaves(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def _check_input(spec: MlpSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[-1] if x.ndim else 0
    if x.ndim not in (1, 2) or dim != spec.input_dim:
        raise ShapeError(f"input has dimension {dim}, network expects {spec.input_dim}")
    return x


def forward_nodes(tape: Tape, net: MlpNodes, x: Node) -> tuple[Node, list[Node]]:
    """Scalar output (batch, 1) and the hidden activations."""
    acts = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = tape.affine(h, w, b)
        if i < last:
            h = tape.tanh(h)
            acts.append(h)
    return h, acts


def hidden_nodes(tape: Tape, net: MlpNodes, x: Node) -> list[Node]:
    """Hidden tanh activations only; enough for the gradient network."""
    acts = []
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = tape.tanh(tape.affine(h, w, b))
        acts.append(h)
    return acts


def input_gradient_nodes(tape: Tape, net: MlpNodes, acts: list[Node]) -> Node:
    """d(output)/d(input), batch x input_dim, built from the forward activations."""
    # the (1, n) output weight row broadcasts across the batch
    g = tape.mul(tape.one_minus_square(acts[-1]), net.weights[-1])
    g = tape.matmul(g, net.weights[-2])
    for i in range(len(acts) - 2, -1, -1):
        g = tape.mul(g, tape.one_minus_square(acts[i]))
        g = tape.matmul(g, net.weights[i])
    return g


def input_gradient_on_tape(tape: Tape, net: MlpNodes, x: Node) -> Node:
    return input_gradient_nodes(tape, net, hidden_nodes(tape, net, x))


def mlp_eval(spec: MlpSpec, params: MlpParams, x) -> np.ndarray | float:
    if params.spec != spec:
        raise ShapeError(f"params built for {params.spec.layer_sizes}, not {spec.layer_sizes}")
    x = _check_input(spec, x)
    h = np.atleast_2d(x)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < len(params.weights) - 1:
            h = np.tanh(h)
    out = h[:, 0]
    return float(out[0]) if x.ndim == 1 else out


def mlp_input_gradient(spec: MlpSpec, params: MlpParams, x) -> np.ndarray:
    if params.spec != spec:
        raise ShapeError(f"params built for {params.spec.layer_sizes}, not {spec.layer_sizes}")
    x = _check_input(spec, x)
    h = np.atleast_2d(x)
    acts = []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    g = np.broadcast_to(params.weights[-1], (h.shape[0], params.weights[-1].shape[1]))
    for i in range(len(acts) - 1, -1, -1):
        g = (g * (1.0 - acts[i] * acts[i])) @ params.weights[i]
    return g[0] if x.ndim == 1 else g


def grad_params(tape: Tape, output: Node, nets: Sequence[MlpNodes]) -> list[MlpParams]:
    """d(output)/d(theta) for each registered network, shaped like its params."""
    adj = tape.backward(output)
    grads = []
    for net in nets:
        ws = tuple(np.zeros_like(n.value) if adj[n.index] is None else adj[n.index] for n in net.weights)
        bs = tuple(np.zeros_like(n.value) if adj[n.index] is None else adj[n.index] for n in net.biases)
        grads.append(MlpParams(net.spec, ws, bs))
    return grads
