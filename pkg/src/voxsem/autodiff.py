"""Minimal reverse-mode differentiation over dense float64 tensors.

Volumes are laid out as (batch, channels, X, Y, Z). Only scalar * tensor
broadcasting is supported; every other primitive requires exact shapes.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, ShapeError

_OFFSETS = list(itertools.product(range(3), repeat=3))


class Node:
    """A value in the computation graph.

    ``backward_fn`` maps the gradient of this node to a tuple of gradients,
    one per parent (None where a parent needs nothing).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None, op: str = "leaf",
                 requires_grad: Optional[bool] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"


class Parameter(Node):
    __slots__ = ("name", "momentum")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _same_shape(op: str, *nodes: Node) -> None:
    shapes = [n.shape for n in nodes]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ShapeError(f"{op}: incompatible shapes {shapes}")


def _make(value, parents, backward_fn, op) -> Node:
    return Node(value, parents, backward_fn, op)


# -- elementwise ------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def add_n(nodes: Sequence[Node]) -> Node:
    out = nodes[0]
    for n in nodes[1:]:
        out = add(out, n)
    return out


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scalar_mul(a: Node, s: float) -> Node:
    s = float(s)
    return _make(a.value * s, (a,), lambda g: (g * s,), "scalar_mul")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.full(shape, g),), "sum")


def detach(a: Node) -> Node:
    return constant(a.value.copy())


def external(parents: Sequence[Node], value: float, grads: Sequence[np.ndarray], op: str = "external") -> Node:
    """Scalar node whose local gradients w.r.t. ``parents`` were computed elsewhere."""
    for p, gr in zip(parents, grads):
        if gr.shape != p.shape:
            raise ShapeError(f"{op}: gradient shape {gr.shape} does not match input {p.shape}")
    return _make(float(value), parents, lambda g: tuple(g * gr for gr in grads), op)


# -- volumetric ---------------------------------------------------------------

def _check_volume(op: str, x: Node, channels: Optional[int] = None) -> None:
    if x.value.ndim != 5:
        raise ShapeError(f"{op}: expected (B, C, X, Y, Z) input, got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{op}: expected {channels} input channels, got {x.shape[1]}")


def linear(x: Node, w: Node, b: Node) -> Node:
    """Per-voxel channel mixing: out[:, o] = sum_i w[o, i] x[:, i] + b[o]."""
    _check_volume("linear", x, w.shape[1])
    if w.value.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: weight {w.shape} and bias {b.shape} are inconsistent")
    xv, wv = x.value, w.value
    out = np.einsum("oi,bixyz->boxyz", wv, xv) + b.value[None, :, None, None, None]

    def backward(g):
        return (
            np.einsum("oi,boxyz->bixyz", wv, g),
            np.einsum("boxyz,bixyz->oi", g, xv),
            g.sum(axis=(0, 2, 3, 4)),
        )

    return _make(out, (x, w, b), backward, "linear")


def _im2col(x: np.ndarray, stride: int) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Rows = output voxels, columns = (offset, channel); built channels-last."""
    B, C, X, Y, Z = x.shape
    out_dims = tuple((d - 1) // stride + 1 for d in (X, Y, Z))
    Xo, Yo, Zo = out_dims
    xl = np.zeros((B, X + 2, Y + 2, Z + 2, C))
    xl[:, 1:-1, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 4, 1)
    cols = np.empty((B, Xo, Yo, Zo, 27, C))
    for n, (i, j, k) in enumerate(_OFFSETS):
        cols[:, :, :, :, n, :] = xl[:, i:i + stride * Xo:stride, j:j + stride * Yo:stride, k:k + stride * Zo:stride]
    return cols.reshape(B * Xo * Yo * Zo, 27 * C), out_dims


def conv3d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    """3x3x3 convolution with zero padding 1 and stride 1 or 2.

    ``w`` has shape (C_out, C_in, 3, 3, 3).
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv3d: stride must be 1 or 2, got {stride}")
    if w.value.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d: weight must be (C_out, C_in, 3, 3, 3), got {w.shape}")
    _check_volume("conv3d", x, w.shape[1])
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias {b.shape} does not match {w.shape[0]} output channels")

    B, C, X, Y, Z = x.shape
    cout = w.shape[0]
    cols, (Xo, Yo, Zo) = _im2col(x.value, stride)
    # (C_out, offset, C_in) ordering to match the im2col columns
    wmat = w.value.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * C)
    out = (cols @ wmat.T + b.value).reshape(B, Xo, Yo, Zo, cout).transpose(0, 4, 1, 2, 3)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, 3, 3, 3, C).transpose(0, 4, 1, 2, 3)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Xo, Yo, Zo, 27, C)
            gxl = np.zeros((B, X + 2, Y + 2, Z + 2, C))
            for n, (i, j, k) in enumerate(_OFFSETS):
                gxl[:, i:i + stride * Xo:stride, j:j + stride * Yo:stride, k:k + stride * Zo:stride] += \
                    gcols[:, :, :, :, n, :]
            gx = gxl[:, 1:-1, 1:-1, 1:-1, :].transpose(0, 4, 1, 2, 3)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), backward, "conv3d")


def upsample_nearest(x: Node) -> Node:
    _check_volume("upsample_nearest", x)
    v = x.value
    out = v.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    B, C, X, Y, Z = v.shape

    def backward(g):
        return (g.reshape(B, C, X, 2, Y, 2, Z, 2).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward, "upsample_nearest")


def concat_channels(nodes: Sequence[Node]) -> Node:
    for n in nodes:
        _check_volume("concat_channels", n)
    spatial = {(n.shape[0],) + n.shape[2:] for n in nodes}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels: incompatible shapes {[n.shape for n in nodes]}")
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]
    out = np.concatenate([n.value for n in nodes], axis=1)
    return _make(out, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=1)), "concat_channels")


def softmax_axis(x: Node, axis: int = 1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


# -- graph traversal ----------------------------------------------------------

def _topological(root: Node) -> List[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d root / d param into every reachable Parameter's ``grad``."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


# -- optimisation -------------------------------------------------------------

def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005) -> None:
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad + weight_decay * p.value
        p.value -= lr * p.momentum
        if not np.all(np.isfinite(p.value)):
            raise FloatingPointError(f"parameter {p.name!r} became non-finite")
        p.zero_grad()


def poly_lr(base_lr: float, iteration: int, max_iteration: int, power: float = 0.9) -> float:
    if max_iteration <= 0 or iteration < 0 or iteration > max_iteration:
        raise DomainError(f"iteration {iteration} outside [0, {max_iteration}]")
    return base_lr * (1.0 - iteration / max_iteration) ** power


def init_uniform(rng: np.random.Generator, shape, fan_in: int, name: str = "") -> Parameter:
    bound = np.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape), name)


# -- finite-difference checking -----------------------------------------------

def numeric_grad(fn: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradcheck(build: Callable[[Sequence[Node]], Node], inputs: Sequence[np.ndarray],
              seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error between backward and finite differences for ``build``.

    The output is contracted with a fixed random tensor to obtain a scalar.
    """
    params = [Parameter(np.array(a, dtype=np.float64), f"in{i}") for i, a in enumerate(inputs)]
    probe = np.random.default_rng(seed).normal(size=build(params).shape)

    def scalar() -> float:
        return float(np.sum(build(params).value * probe))

    out = build(params)
    backward(external([out], float(np.sum(out.value * probe)), [probe]))
    worst = 0.0
    for p in params:
        num = numeric_grad(scalar, p.value, h)
        scale = max(np.abs(p.grad).max(), np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(p.grad - num).max() / scale))
    return worst


def primitive_gradchecks(seed: int = 0) -> Dict[str, float]:
    """Finite-difference check of every primitive on small random tensors."""
    rng = np.random.default_rng(seed)

    def vol(*shape):
        v = rng.normal(size=shape)
        return np.where(np.abs(v) < 0.05, v + 0.1 * np.sign(v + 1e-9), v)

    return {
        "add": gradcheck(lambda p: add(p[0], p[1]), [vol(1, 2, 3, 3, 3), vol(1, 2, 3, 3, 3)], seed),
        "mul": gradcheck(lambda p: mul(p[0], p[1]), [vol(1, 2, 3, 3, 3), vol(1, 2, 3, 3, 3)], seed),
        "scalar_mul": gradcheck(lambda p: scalar_mul(p[0], -1.7), [vol(2, 2, 3, 3, 3)], seed),
        "relu": gradcheck(lambda p: relu(p[0]), [vol(1, 4, 4, 4, 4)], seed),
        "linear": gradcheck(lambda p: linear(p[0], p[1], p[2]),
                            [vol(2, 3, 3, 3, 3), vol(4, 3), vol(4)], seed),
        "conv3d": gradcheck(lambda p: conv3d(p[0], p[1], p[2], 1),
                            [vol(1, 2, 4, 4, 4), vol(3, 2, 3, 3, 3), vol(3)], seed),
        "conv3d_stride2": gradcheck(lambda p: conv3d(p[0], p[1], p[2], 2),
                                    [vol(1, 2, 6, 6, 6), vol(2, 2, 3, 3, 3), vol(2)], seed),
        "upsample_nearest": gradcheck(lambda p: upsample_nearest(p[0]), [vol(1, 2, 3, 3, 3)], seed),
        "concat_channels": gradcheck(lambda p: concat_channels([p[0], p[1]]),
                                     [vol(1, 2, 3, 3, 3), vol(1, 1, 3, 3, 3)], seed),
        "softmax_axis": gradcheck(lambda p: softmax_axis(p[0], 1), [vol(1, 4, 3, 3, 3)], seed),
        "sum": gradcheck(lambda p: sum_all(p[0]), [vol(1, 2, 3, 3, 3)], seed),
    }
