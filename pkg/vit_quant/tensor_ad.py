"""Dense float64 kernels and a tape recording them for reverse-mode differentiation.

Tensors are plain numpy float64 arrays that are frozen (read-only) once a kernel
returns them. The tape records primitives in topological order; every primitive
has a forward kernel and a vector-Jacobian product registered in PRIMITIVES.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .exceptions import ShapeError, UsageError

logger = logging.getLogger(__name__)

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def freeze(value):
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


def _check_batch_dims(a, b, what):
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(
            f"{what}: batch dimensions do not broadcast", left=a.shape, right=b.shape
        ) from exc


def unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Kernels


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2", left=a.shape, right=b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul inner dimensions differ", left=a.shape, right=b.shape
        )
    _check_batch_dims(a, b, "matmul")
    return np.matmul(a, b)


def layernorm(x, gamma, beta, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if eps < 0:
        raise UsageError("layernorm eps must be non-negative", eps=eps)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            "layernorm affine parameters do not match the feature axis",
            x=x.shape,
            gamma=gamma.shape,
            beta=beta.shape,
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    # population variance over the feature axis
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("softmax axis out of range", shape=x.shape, axis=axis)
    shifted = x - x.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (0.5 * (1.0 + erf(x * INV_SQRT2)))


def log_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# Vector-Jacobian products


def _add_vjp(g, out, a, b):
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def _mul_vjp(g, out, a, b):
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def _scale_vjp(g, out, a, factor):
    return (g * factor,)


def _matmul_vjp(g, out, a, b):
    grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
    grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


def _layernorm_vjp(g, out, x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    dxhat = g * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)


def _softmax_vjp(g, out, x, axis):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _gelu_vjp(g, out, x):
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return (g * (cdf + x * pdf),)


def _reshape_vjp(g, out, x, shape):
    return (g.reshape(x.shape),)


def _transpose_vjp(g, out, x, axes):
    return (g.transpose(np.argsort(axes)),)


def _take(x, axis, index):
    return np.take(x, index, axis=axis)


def _take_vjp(g, out, x, axis, index):
    grad = np.zeros_like(x)
    selector = [slice(None)] * x.ndim
    selector[axis] = index
    grad[tuple(selector)] = g
    return (grad,)


def _concat(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _broadcast(x, shape):
    return np.broadcast_to(x, shape).copy()


def _broadcast_vjp(g, out, x, shape):
    return (unbroadcast(g, x.shape),)


def _straight_through(x, fn, label=None):
    return fn(x)


def _straight_through_vjp(g, out, x, fn, label=None):
    return (g,)


def _cross_entropy(logits, labels):
    picked = np.take_along_axis(log_softmax(logits), labels[:, None], axis=-1)
    return -picked.mean()


def _cross_entropy_vjp(g, out, logits, labels):
    probs = softmax(logits)
    probs[np.arange(len(labels)), labels] -= 1.0
    return (g * probs / len(labels),)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable
    # relevance follows the vjp for pure data movement
    structural: bool = False


PRIMITIVES = {}


def defprimitive(name, forward, vjp, structural=False):
    PRIMITIVES[name] = Primitive(name, forward, vjp, structural)


defprimitive("add", np.add, _add_vjp)
defprimitive("mul", np.multiply, _mul_vjp)
defprimitive("scale", lambda a, factor: a * factor, _scale_vjp)
defprimitive("matmul", matmul, _matmul_vjp)
defprimitive("layernorm", layernorm, _layernorm_vjp)
defprimitive("softmax", softmax, _softmax_vjp)
defprimitive("gelu", gelu, _gelu_vjp)
defprimitive("reshape", lambda x, shape: x.reshape(shape), _reshape_vjp, structural=True)
defprimitive("transpose", lambda x, axes: x.transpose(axes), _transpose_vjp, structural=True)
defprimitive("take", _take, _take_vjp, structural=True)
defprimitive("concat", _concat, _concat_vjp, structural=True)
defprimitive("broadcast", _broadcast, _broadcast_vjp, structural=True)
defprimitive("straight_through", _straight_through, _straight_through_vjp)
defprimitive("cross_entropy", _cross_entropy, _cross_entropy_vjp)


@dataclass(frozen=True, eq=False)
class Node:
    index: int
    op: str
    inputs: tuple
    value: np.ndarray = field(repr=False)
    attrs: dict = field(default_factory=dict, repr=False)
    kind: str = "op"
    name: str = None
    tracks_input: bool = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.kind != "op"


class Gradients:
    """Gradients produced by one backward pass, addressable by node or index."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __contains__(self, node):
        return self._index(node) in self._grads

    def __getitem__(self, node):
        index = self._index(node)
        if index not in self._grads:
            return np.zeros_like(self._tape.nodes[index].value)
        return self._grads[index]

    def of(self, node):
        return self[node]

    @staticmethod
    def _index(node):
        return node.index if isinstance(node, Node) else int(node)


class Tape:
    """Single-owner recorder; read-only and shareable once recording is done."""

    def __init__(self):
        self.nodes = []
        self._consumers = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, **fields):
        node = Node(index=len(self.nodes), **fields)
        self.nodes.append(node)
        self._consumers.append(0)
        return node

    def input(self, value, name="input"):
        return self._append(
            op="leaf", inputs=(), value=freeze(value), kind="input", name=name, tracks_input=True
        )

    def param(self, value, name=None):
        return self._append(op="leaf", inputs=(), value=freeze(value), kind="param", name=name)

    def apply(self, op, *inputs, name=None, **attrs):
        primitive = PRIMITIVES[op]
        value = primitive.forward(*(node.value for node in inputs), **attrs)
        if not np.all(np.isfinite(value)):
            logger.warning(f"Non-finite values produced by {op} ({name or 'unnamed'})")
        for node in inputs:
            self._consumers[node.index] += 1
        return self._append(
            op=op,
            inputs=tuple(node.index for node in inputs),
            value=freeze(value),
            attrs=attrs,
            name=name,
            tracks_input=any(node.tracks_input for node in inputs),
        )

    # convenience wrappers

    def add(self, a, b, name=None):
        return self.apply("add", a, b, name=name)

    def mul(self, a, b, name=None):
        return self.apply("mul", a, b, name=name)

    def scale(self, a, factor, name=None):
        return self.apply("scale", a, factor=float(factor), name=name)

    def matmul(self, a, b, name=None):
        return self.apply("matmul", a, b, name=name)

    def linear(self, x, weight, bias, name=None):
        return self.add(self.matmul(x, weight), bias, name=name)

    def layernorm(self, x, gamma, beta, eps=1e-6, name=None):
        return self.apply("layernorm", x, gamma, beta, eps=eps, name=name)

    def softmax(self, x, axis=-1, name=None):
        return self.apply("softmax", x, axis=axis, name=name)

    def gelu(self, x, name=None):
        return self.apply("gelu", x, name=name)

    def reshape(self, x, shape, name=None):
        return self.apply("reshape", x, shape=tuple(shape), name=name)

    def transpose(self, x, axes, name=None):
        return self.apply("transpose", x, axes=tuple(axes), name=name)

    def take(self, x, axis, index, name=None):
        return self.apply("take", x, axis=axis, index=index, name=name)

    def concat(self, nodes, axis, name=None):
        return self.apply("concat", *nodes, axis=axis, name=name)

    def broadcast(self, x, shape, name=None):
        return self.apply("broadcast", x, shape=tuple(shape), name=name)

    def straight_through(self, x, fn, label=None, name=None):
        """Apply `fn` forward, pass the gradient through unchanged."""
        return self.apply("straight_through", x, fn=fn, label=label, name=name)

    def cross_entropy(self, logits, labels, name="loss"):
        return self.apply(
            "cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64), name=name
        )

    # inspection

    def is_terminal(self, node):
        return self._consumers[node.index] == 0

    def consumers(self, node):
        return [other for other in self.nodes if node.index in other.inputs]

    def replay(self):
        """Recompute every node from the recorded leaves."""
        values = []
        for node in self.nodes:
            if node.is_leaf:
                values.append(node.value)
                continue
            primitive = PRIMITIVES[node.op]
            values.append(
                freeze(primitive.forward(*(values[i] for i in node.inputs), **node.attrs))
            )
        return values

    def backward(self, output, seed=None):
        return backward(self, output, seed)


def backward(tape, output, seed=None):
    """Reverse-mode pass from a terminal node; returns gradients for every node on its path."""
    if not tape.is_terminal(output):
        raise UsageError(
            "backward must be seeded on a terminal value", node=output.index, op=output.op
        )
    if seed is None:
        seed = np.ones_like(output.value)
    elif np.ndim(seed) == 0:
        seed = np.full_like(output.value, float(seed))
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError("seed shape does not match the terminal value", seed=seed.shape, value=output.shape)

    grads = {output.index: seed}
    for node in reversed(tape.nodes[: output.index + 1]):
        grad = grads.get(node.index)
        if grad is None or node.is_leaf:
            continue
        primitive = PRIMITIVES[node.op]
        input_values = [tape.nodes[i].value for i in node.inputs]
        input_grads = primitive.vjp(grad, node.value, *input_values, **node.attrs)
        for index, input_grad in zip(node.inputs, input_grads):
            if index in grads:
                grads[index] = grads[index] + input_grad
            else:
                grads[index] = np.asarray(input_grad, dtype=np.float64)
    return Gradients(tape, grads)
