"""Minimal dense-tensor reverse-mode differentiation on top of numpy.

Every primitive application is appended to a :class:`Record` (a tape). The
tape can be replayed with new leaf values (:func:`forward_eval`) and
differentiated (:func:`backward_grad`). All values are float64.

Example::

    rec = Record()
    x = rec.input(np.array([3.0]))
    y = (x * x).sum()
    (gx,) = rec.backward(y, wrt=[x])   # -> [6.]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    """Handle to one value stored in a :class:`Record`."""

    __slots__ = ("record", "id")

    def __init__(self, record: "Record", id_: int):
        self.record = record
        self.id = id_

    @property
    def value(self) -> np.ndarray:
        return self.record.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.record.values[self.id].shape

    @property
    def requires_grad(self) -> bool:
        return self.record.requires[self.id]

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return self.record.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(self._lift(other), self.record.constant(-1.0)))

    def __rsub__(self, other):
        return add(self._lift(other), mul(self, self.record.constant(-1.0)))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, self.record.constant(-1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, self.record.constant(1.0 / other))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: list
    output: int
    attrs: dict
    saved: object = None


@dataclass
class Record:
    """Ordered list of primitive applications (a computation tape).

    Leaves are created with :meth:`input` (differentiable, replaceable on
    replay) or :meth:`constant` (fixed). ``check_finite`` validates each
    primitive's output.
    """

    check_finite: bool = True
    nodes: list = field(default_factory=list)
    values: list = field(default_factory=list)
    requires: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def _new(self, value: np.ndarray, requires_grad: bool) -> Tensor:
        self.values.append(value)
        self.requires.append(requires_grad)
        return Tensor(self, len(self.values) - 1)

    def input(self, value, requires_grad: bool = True) -> Tensor:
        t = self._new(np.array(value, dtype=np.float64), requires_grad)
        self.inputs.append(t.id)
        return t

    def constant(self, value) -> Tensor:
        return self._new(np.asarray(value, dtype=np.float64), False)

    def mark_output(self, t: Tensor) -> Tensor:
        self.outputs.append(t.id)
        return t

    def apply(self, op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        for t in inputs:
            if t.record is not self:
                raise ValueError("tensors from different records cannot be combined")
        prim = PRIMITIVES[op]
        ids = [t.id for t in inputs]
        vals = [self.values[i] for i in ids]
        prim.check(vals, attrs)
        out, saved = prim.forward(vals, attrs)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        req = (not prim.stops_gradient) and any(self.requires[i] for i in ids)
        t = self._new(out, req)
        self.nodes.append(Node(op, ids, t.id, attrs, saved if req else None))
        return t

    def replay(self, inputs: Sequence[np.ndarray] | None = None) -> list:
        """Recompute every node, optionally with new values for the input leaves."""
        if inputs is not None:
            if len(inputs) != len(self.inputs):
                raise ValueError(f"expected {len(self.inputs)} inputs, got {len(inputs)}")
            for i, v in zip(self.inputs, inputs):
                v = np.asarray(v, dtype=np.float64)
                if v.shape != self.values[i].shape:
                    raise ShapeError(f"input {i}: shape {v.shape} != recorded {self.values[i].shape}")
                self.values[i] = v
        for node in self.nodes:
            prim = PRIMITIVES[node.op]
            vals = [self.values[i] for i in node.inputs]
            out, saved = prim.forward(vals, node.attrs)
            self.values[node.output] = out
            node.saved = saved if self.requires[node.output] else None
        outs = self.outputs or ([self.nodes[-1].output] if self.nodes else [])
        return [self.values[i] for i in outs]

    def backward(self, output: Tensor, seed=None, wrt: Sequence[Tensor] | None = None) -> list:
        """Gradients of ``sum(seed * output)`` with respect to ``wrt`` (default: inputs)."""
        out_val = self.values[output.id]
        if seed is None:
            if out_val.size != 1:
                raise ShapeError("a seed is required for non-scalar outputs")
            seed = np.ones_like(out_val)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out_val.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {out_val.shape}")
        wrt_ids = [t.id for t in wrt] if wrt is not None else list(self.inputs)
        keep = set(wrt_ids)
        grads = {output.id: seed}
        if self.requires[output.id]:
            for node in reversed(self.nodes):
                if node.output > output.id:
                    continue
                g = grads.get(node.output)
                if g is None:
                    continue
                if node.output not in keep:
                    del grads[node.output]
                prim = PRIMITIVES[node.op]
                vals = [self.values[i] for i in node.inputs]
                in_grads = prim.backward(g, vals, self.values[node.output], node.saved, node.attrs)
                for i, gi in zip(node.inputs, in_grads):
                    if gi is None or not self.requires[i]:
                        continue
                    prev = grads.get(i)
                    grads[i] = gi if prev is None else prev + gi
        return [grads[i] if i in grads else np.zeros_like(self.values[i]) for i in wrt_ids]


def forward_eval(record: Record, inputs: Sequence[np.ndarray]) -> list:
    """Replay ``record`` on new input-leaf values and return its marked outputs."""
    return record.replay(inputs)


def backward_grad(record: Record, output_seed, output: Tensor | None = None) -> list:
    """Gradients with respect to every input leaf of ``record``."""
    if output is None:
        idx = record.outputs[-1] if record.outputs else record.nodes[-1].output
        output = Tensor(record, idx)
    return record.backward(output, output_seed)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _no_check(vals, attrs):
    pass


def _check_broadcast(vals, attrs):
    try:
        np.broadcast_shapes(vals[0].shape, vals[1].shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {vals[0].shape} with {vals[1].shape}") from exc


def _check_matmul(vals, attrs):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc


def _check_concat(vals, attrs):
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.shape[:-1] != lead:
            raise ShapeError("concat operands must agree on all but the last axis")


def _check_split(vals, attrs):
    n = vals[0].shape[-1]
    if not 0 <= attrs["start"] < attrs["stop"] <= n:
        raise ShapeError(f"split range [{attrs['start']}, {attrs['stop']}) outside last axis of size {n}")


def _check_reshape(vals, attrs):
    if int(np.prod(attrs["shape"])) != vals[0].size:
        raise ShapeError(f"cannot reshape {vals[0].shape} into {attrs['shape']}")


def _check_cdist(vals, attrs):
    x, y = vals
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-1] or x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"pairwise distance needs (..., m, G) and (..., n, G); got {x.shape}, {y.shape}")


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable
    check: Callable = _no_check
    stops_gradient: bool = False


def _add_bw(g, vals, out, saved, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _mul_bw(g, vals, out, saved, attrs):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fw(vals, attrs):
    a, b = vals
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM instead of a broadcast loop over leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],)), None
    return np.matmul(a, b), None


def _matmul_bw(g, vals, out, saved, attrs):
    a, b = vals
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        return ga, a.reshape(-1, a.shape[-1]).T @ g2
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _transpose_fw(vals, attrs):
    return np.transpose(vals[0], attrs["axes"]), None


def _transpose_bw(g, vals, out, saved, attrs):
    axes = attrs["axes"]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _reduce_fw(fn):
    def forward(vals, attrs):
        return np.asarray(fn(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])), None

    return forward


def _reduce_bw(mean: bool):
    def backward(g, vals, out, saved, attrs):
        x = vals[0]
        axis = attrs["axis"]
        if axis is None:
            count = x.size
            g = np.reshape(g, (1,) * x.ndim)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            count = int(np.prod([x.shape[a] for a in axes]))
            if not attrs["keepdims"]:
                g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, x.shape)
        return ((g / count) if mean else g.copy(),)

    return backward


def _sqrt_bw(g, vals, out, saved, attrs):
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g * 0.5 / safe, 0.0),)


def _relu_bw(g, vals, out, saved, attrs):
    # subgradient 1 at exactly 0 so a zero-initialised output head can learn
    return (g * (vals[0] >= 0),)


def _layernorm_fw(vals, attrs):
    x = vals[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs["eps"])
    y = xc * inv
    return y, inv


def _layernorm_bw(g, vals, out, saved, attrs):
    inv = saved
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - out * gy),)


def _softmax_fw(vals, attrs):
    x = vals[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bw(g, vals, out, saved, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _concat_fw(vals, attrs):
    return np.concatenate(vals, axis=-1), None


def _concat_bw(g, vals, out, saved, attrs):
    bounds = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return np.split(g, bounds, axis=-1)


def _split_fw(vals, attrs):
    return vals[0][..., attrs["start"]:attrs["stop"]].copy(), None


def _split_bw(g, vals, out, saved, attrs):
    full = np.zeros_like(vals[0])
    full[..., attrs["start"]:attrs["stop"]] = g
    return (full,)


def _cdist_fw(vals, attrs):
    x, y = vals
    diff = x[..., :, None, :] - y[..., None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    return d, diff


def _cdist_bw(g, vals, out, saved, attrs):
    diff = saved
    # gradient of |a - b| at a == b is defined as 0
    w = np.where(out > 0, g / np.where(out > 0, out, 1.0), 0.0)
    gd = w[..., None] * diff
    return gd.sum(axis=-2), -gd.sum(axis=-3)


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(lambda v, a: (v[0] + v[1], None), _add_bw, _check_broadcast),
    "mul": Primitive(lambda v, a: (v[0] * v[1], None), _mul_bw, _check_broadcast),
    "matmul": Primitive(_matmul_fw, _matmul_bw, _check_matmul),
    "transpose": Primitive(_transpose_fw, _transpose_bw),
    "reshape": Primitive(
        lambda v, a: (np.reshape(v[0], a["shape"]), None),
        lambda g, v, o, s, a: (np.reshape(g, v[0].shape),),
        _check_reshape,
    ),
    "concat": Primitive(_concat_fw, _concat_bw, _check_concat),
    "split": Primitive(_split_fw, _split_bw, _check_split),
    "sum": Primitive(_reduce_fw(np.sum), _reduce_bw(False)),
    "mean": Primitive(_reduce_fw(np.mean), _reduce_bw(True)),
    "sqrt": Primitive(lambda v, a: (np.sqrt(v[0]), None), _sqrt_bw),
    "exp": Primitive(lambda v, a: (np.exp(v[0]), None), lambda g, v, o, s, a: (g * o,)),
    "log": Primitive(lambda v, a: (np.log(v[0]), None), lambda g, v, o, s, a: (g / v[0],)),
    "relu": Primitive(lambda v, a: (np.maximum(v[0], 0.0), None), _relu_bw),
    "layernorm": Primitive(_layernorm_fw, _layernorm_bw),
    "softmax": Primitive(_softmax_fw, _softmax_bw),
    "cdist": Primitive(_cdist_fw, _cdist_bw, _check_cdist),
    "stop_gradient": Primitive(lambda v, a: (v[0], None), lambda g, v, o, s, a: (None,), stops_gradient=True),
}


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.record.apply("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.record.apply("mul", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.record.apply("matmul", [a, b])


def transpose(x: Tensor, axes=None) -> Tensor:
    return x.record.apply("transpose", [x], axes=None if axes is None else tuple(axes))


def reshape(x: Tensor, shape) -> Tensor:
    return x.record.apply("reshape", [x], shape=tuple(shape))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    return xs[0].record.apply("concat", list(xs))


def split(x: Tensor, sizes: Sequence[int]) -> list:
    """Split along the last axis into pieces of the given sizes."""
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[-1]}")
    out, start = [], 0
    for n in sizes:
        out.append(x.record.apply("split", [x], start=start, stop=start + n))
        start += n
    return out


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return x.record.apply("sum", [x], axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return x.record.apply("mean", [x], axis=axis, keepdims=keepdims)


def sqrt(x: Tensor) -> Tensor:
    return x.record.apply("sqrt", [x])


def exp(x: Tensor) -> Tensor:
    return x.record.apply("exp", [x])


def log(x: Tensor) -> Tensor:
    return x.record.apply("log", [x])


def relu(x: Tensor) -> Tensor:
    return x.record.apply("relu", [x])


def layer_norm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    return x.record.apply("layernorm", [x], eps=eps)


def softmax(x: Tensor) -> Tensor:
    return x.record.apply("softmax", [x])


def pairwise_distance(x: Tensor, y: Tensor) -> Tensor:
    """Euclidean distances between rows: (..., m, G) x (..., n, G) -> (..., m, n)."""
    return x.record.apply("cdist", [x, y])


def stop_gradient(x: Tensor) -> Tensor:
    return x.record.apply("stop_gradient", [x])


def check_gradients(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    coords: int | Sequence[int] | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``fn`` maps a leaf tensor to a scalar tensor. The error per coordinate is
    ``|analytic - fd| / max(1, |fd|)``. ``coords`` restricts the check to a
    random subset (an int) or explicit flat indices.
    """
    point = np.array(point, dtype=np.float64)
    rec = Record()
    x = rec.input(point)
    out = fn(x)
    rec.mark_output(out)
    (grad,) = rec.backward(out, wrt=[x])
    flat = grad.ravel()
    if coords is None:
        idx = np.arange(point.size)
    elif isinstance(coords, (int, np.integer)):
        idx = np.random.default_rng(seed).choice(point.size, size=min(int(coords), point.size), replace=False)
    else:
        idx = np.asarray(coords)
    worst = 0.0
    for i in idx:
        p = point.copy().ravel()
        p[i] += step
        (hi,) = forward_eval(rec, [p.reshape(point.shape)])
        p[i] -= 2 * step
        (lo,) = forward_eval(rec, [p.reshape(point.shape)])
        fd = (float(hi) - float(lo)) / (2 * step)
        worst = max(worst, abs(flat[i] - fd) / max(1.0, abs(fd)))
    forward_eval(rec, [point])
    return worst
