"""Reverse-mode automatic differentiation on a dynamic value graph.

Every backward rule is written once against an ops namespace ``F``.  When
gradients are requested with ``create_graph=False`` the namespace is plain
numpy and the result is a set of constant arrays; with ``create_graph=True``
the same rules append new nodes to the graph, so the returned gradients can
be differentiated again (double backpropagation).

Broadcasting is limited to scalar-vs-array.  Batch reductions and bias
additions are explicit primitives (``sum(axis=...)``, ``bias_add``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12
HUBER_DELTA = 1.0


class ShapeError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    """Forward evaluation left the primitive's domain (e.g. log of a negative)."""


class UninitializedLeafError(RuntimeError):
    pass


class HigherOrderError(NotImplementedError):
    pass


# ---------------------------------------------------------------------------
# numpy kernels shared by the graph and by plain-array inference paths
# ---------------------------------------------------------------------------

def np_sigmoid(x):
    s = np.tanh(0.5 * x)
    s *= 0.5
    s += 0.5
    return s


def np_swish(x):
    s = np_sigmoid(x)
    s *= x
    return s


def np_swish_grad(x):
    s = np_sigmoid(x)
    out = 1.0 - s
    out *= x
    out += 1.0
    out *= s
    return out


def np_swish_grad2(x):
    s = np_sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def np_huber(x):
    ax = np.abs(x)
    return np.where(ax <= HUBER_DELTA, 0.5 * x * x, HUBER_DELTA * (ax - 0.5 * HUBER_DELTA))


def np_relu(x):
    return np.maximum(x, 0.0)


def _binary(fn, kind):
    def forward(attrs, a, b):
        if a.shape == b.shape:
            return np.asarray(fn(a, b), dtype=np.float64)
        if a.size == 1 and b.size == 1:
            shape = a.shape if a.ndim >= b.ndim else b.shape
        elif a.size == 1:
            shape = b.shape
        elif b.size == 1:
            shape = a.shape
        else:
            raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")
        a2 = a.reshape(()) if a.size == 1 else a
        b2 = b.reshape(()) if b.size == 1 else b
        return np.asarray(fn(a2, b2), dtype=np.float64).reshape(shape)
    return forward


def _fw_log(attrs, x):
    if np.any(x <= 0.0):
        raise EvaluationError("log of a non-positive value")
    return np.log(x)


def _fw_sqrt(attrs, x):
    if np.any(x < 0.0):
        raise EvaluationError("sqrt of a negative value")
    return np.sqrt(x)


_fw_div_unchecked = _binary(np.divide, "div")


def _fw_div(attrs, a, b):
    if np.any(b == 0.0):
        raise EvaluationError("division by zero")
    return _fw_div_unchecked(attrs, a, b)


def _fw_matmul(attrs, a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.ndim + b.ndim < 3:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    return a @ b


def _fw_transpose(attrs, x):
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return np.ascontiguousarray(x.T)


def _fw_reshape(attrs, x):
    shape = attrs["shape"]
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return x.reshape(shape)


def _fw_sum(attrs, x):
    axis = attrs["axis"]
    if axis is not None and not 0 <= axis < x.ndim:
        raise ShapeError(f"sum: bad axis {axis} for shape {x.shape}")
    return np.asarray(np.sum(x, axis=axis), dtype=np.float64)


def _fw_mean(attrs, x):
    axis = attrs["axis"]
    if axis is not None and not 0 <= axis < x.ndim:
        raise ShapeError(f"mean: bad axis {axis} for shape {x.shape}")
    return np.asarray(np.mean(x, axis=axis), dtype=np.float64)


def _fw_expand(attrs, x):
    shape, axis = attrs["shape"], attrs["axis"]
    if axis is None:
        if x.size != 1:
            raise ShapeError("expand without axis needs a scalar")
        return np.full(shape, x.reshape(()).item())
    expected = tuple(s for i, s in enumerate(shape) if i != axis)
    if x.shape != expected:
        raise ShapeError(f"expand: {x.shape} cannot fill {shape} along axis {axis}")
    return np.array(np.broadcast_to(np.expand_dims(x, axis), shape))


def _fw_bias_add(attrs, x, b):
    if b.ndim != 1 or x.ndim != 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
    return x + b


def _fw_concat(attrs, *xs):
    rows = {x.shape[:-1] for x in xs}
    if len(rows) != 1:
        raise ShapeError("concat: leading dims differ")
    return np.concatenate(xs, axis=-1)


def _fw_slice(attrs, x):
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {x.shape}")
    return np.ascontiguousarray(x[..., start:stop])


def _fw_embed(attrs, x):
    width, start = attrs["width"], attrs["start"]
    if start + x.shape[-1] > width:
        raise ShapeError("embed: slab does not fit")
    out = np.zeros(x.shape[:-1] + (width,))
    out[..., start:start + x.shape[-1]] = x
    return out


def _fw_clip(attrs, x):
    return np.clip(x, attrs["lo"], attrs["hi"])


def _fw_in_range(attrs, x):
    return ((x >= attrs["lo"]) & (x <= attrs["hi"])).astype(np.float64)


def _fw_l1(attrs, x):
    return np.asarray(np.sum(np.abs(x), axis=attrs["axis"]), dtype=np.float64)


def _fw_l2(attrs, x):
    return np.sqrt(np.asarray(np.sum(x * x, axis=attrs["axis"]), dtype=np.float64) + NORM_EPS)


def _fw_reparam(attrs, mean, log_std, noise):
    if not mean.shape == log_std.shape == noise.shape:
        raise ShapeError("gaussian_reparam: mean, log_std and noise must share a shape")
    return mean + np.exp(log_std) * noise


def _fw_swish_grad2(attrs, x):
    return np_swish_grad2(x)


FORWARD: dict[str, Callable] = {
    "add": _binary(np.add, "add"),
    "sub": _binary(np.subtract, "sub"),
    "mul": _binary(np.multiply, "mul"),
    "div": _fw_div,
    "min": _binary(np.minimum, "min"),
    "atan2": _binary(np.arctan2, "atan2"),
    "less_equal": _binary(lambda a, b: (a <= b).astype(np.float64), "less_equal"),
    "neg": lambda attrs, x: -x,
    "scalar_mul": lambda attrs, x: x * attrs["c"],
    "add_scalar": lambda attrs, x: x + attrs["c"],
    "matmul": _fw_matmul,
    "transpose": _fw_transpose,
    "reshape": _fw_reshape,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "expand": _fw_expand,
    "bias_add": _fw_bias_add,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "embed": _fw_embed,
    "tanh": lambda attrs, x: np.tanh(x),
    "sigmoid": lambda attrs, x: np_sigmoid(x),
    "swish": lambda attrs, x: np_swish(x),
    "swish_grad": lambda attrs, x: np_swish_grad(x),
    "swish_grad2": _fw_swish_grad2,
    "relu": lambda attrs, x: np_relu(x),
    "exp": lambda attrs, x: np.exp(x),
    "log": _fw_log,
    "square": lambda attrs, x: x * x,
    "sqrt": _fw_sqrt,
    "abs": lambda attrs, x: np.abs(x),
    "sign": lambda attrs, x: np.sign(x),
    "positive": lambda attrs, x: (x > 0.0).astype(np.float64),
    "sin": lambda attrs, x: np.sin(x),
    "cos": lambda attrs, x: np.cos(x),
    "huber": lambda attrs, x: np_huber(x),
    "clip": _fw_clip,
    "in_range": _fw_in_range,
    "l1_norm": _fw_l1,
    "l2_norm_smoothed": _fw_l2,
    "gaussian_reparam": _fw_reparam,
}

# Masks and signs are piecewise constant: their derivative is zero everywhere
# it exists, so they never propagate gradient.
NONDIFF = frozenset({"less_equal", "sign", "positive", "in_range"})


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Value:
    """A node of a :class:`Graph`; ``data`` holds a float64 array."""

    __slots__ = ("graph", "id", "shape", "data", "kind", "parents", "attrs", "requires_grad", "_ver")
    __array_priority__ = 1000

    def __init__(self, graph, kind, parents, attrs, data, shape, requires_grad):
        self.graph = graph
        self.id = len(graph.nodes)
        self.kind = kind
        self.parents = parents
        self.attrs = attrs
        self.data = data
        self.shape = shape
        self.requires_grad = requires_grad
        self._ver = graph.version
        graph.nodes.append(self)

    @property
    def is_leaf(self):
        return self.kind == "input"

    @property
    def size(self):
        return int(np.prod(self.shape))

    def __repr__(self):
        return f"Value(id={self.id}, kind={self.kind}, shape={self.shape})"

    def numpy(self):
        return self.graph.eval(self)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Value):
            return self.graph.apply("add", (self, other))
        return self.graph.apply("add_scalar", (self,), {"c": float(other)})

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Value):
            return self.graph.apply("sub", (self, other))
        return self.graph.apply("add_scalar", (self,), {"c": -float(other)})

    def __rsub__(self, other):
        return self.graph.apply("add_scalar", (self.graph.apply("neg", (self,)),), {"c": float(other)})

    def __mul__(self, other):
        if isinstance(other, Value):
            return self.graph.apply("mul", (self, other))
        return self.graph.apply("scalar_mul", (self,), {"c": float(other)})

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Value):
            return self.graph.apply("div", (self, other))
        return self.graph.apply("scalar_mul", (self,), {"c": 1.0 / float(other)})

    def __neg__(self):
        return self.graph.apply("neg", (self,))

    def __matmul__(self, other):
        return self.graph.apply("matmul", (self, other))

    @property
    def T(self):
        return self.graph.apply("transpose", (self,))


class Graph:
    """Append-only node store.  Node ids are dense and topologically ordered."""

    def __init__(self, seed: int | None = None, rng: np.random.Generator | None = None):
        self.nodes: list[Value] = []
        self.version = 0
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    def make_input(self, shape, values=None, requires_grad=False) -> Value:
        shape = tuple(int(s) for s in shape)
        data = None
        if values is not None:
            arr = np.asarray(values, dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise ShapeError(f"{arr.size} values for shape {shape}")
            data = arr.reshape(shape)
        return Value(self, "input", (), None, data, shape, bool(requires_grad))

    def constant(self, values) -> Value:
        arr = np.asarray(values, dtype=np.float64)
        return self.make_input(arr.shape, arr, requires_grad=False)

    def param(self, array) -> Value:
        """Wrap an existing array (no copy) as a differentiable leaf."""
        return Value(self, "input", (), None, array, array.shape, True)

    def normal(self, shape) -> Value:
        return self.constant(self.rng.standard_normal(shape))

    def set_input(self, leaf: Value, values):
        if not leaf.is_leaf:
            raise ValueError("only leaves can be assigned")
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != int(np.prod(leaf.shape)):
            raise ShapeError(f"{arr.size} values for shape {leaf.shape}")
        leaf.data = arr.reshape(leaf.shape)
        self.version += 1

    def apply(self, kind: str, parents: Sequence[Value], attrs: dict | None = None) -> Value:
        fw = FORWARD[kind]
        for p in parents:
            if p.graph is not self:
                raise ValueError("cannot mix values from different graphs")
        datas = [p.data for p in parents]
        if any(d is None for d in datas):
            # lazy node: infer the shape on dummy data, evaluate later
            data = None
            shape = fw(attrs, *[np.ones(p.shape) for p in parents]).shape
        else:
            data = fw(attrs, *datas)
            shape = data.shape
        rg = kind not in NONDIFF and any(p.requires_grad for p in parents)
        return Value(self, kind, tuple(parents), attrs, data, shape, rg)

    def eval(self, value: Value) -> np.ndarray:
        if value.data is not None and (value.is_leaf or value._ver == self.version):
            return value.data
        stack, seen = [value], set()
        while stack:
            v = stack.pop()
            if v.id in seen:
                continue
            seen.add(v.id)
            stack.extend(v.parents)
        for i in sorted(seen):
            v = self.nodes[i]
            if v.is_leaf:
                if v.data is None:
                    raise UninitializedLeafError(f"leaf {v.id} has no data")
                continue
            if v.data is None or v._ver != self.version:
                v.data = FORWARD[v.kind](v.attrs, *[p.data for p in v.parents])
                v._ver = self.version
        return value.data


# ---------------------------------------------------------------------------
# user-facing primitive constructors
# ---------------------------------------------------------------------------

def primitive(kind: str, *parents: Value, **attrs) -> Value:
    if kind not in FORWARD:
        raise KeyError(f"unknown primitive {kind!r}")
    return parents[0].graph.apply(kind, parents, attrs or None)


def _unary(kind):
    def op(x: Value) -> Value:
        return x.graph.apply(kind, (x,))
    op.__name__ = kind
    return op


neg = _unary("neg")
tanh = _unary("tanh")
sigmoid = _unary("sigmoid")
swish = _unary("swish")
relu = _unary("relu")
exp = _unary("exp")
log = _unary("log")
square = _unary("square")
sqrt = _unary("sqrt")
absolute = _unary("abs")
sign = _unary("sign")
sin = _unary("sin")
cos = _unary("cos")
huber = _unary("huber")
transpose = _unary("transpose")


def add(a, b):
    return a.graph.apply("add", (a, b))


def sub(a, b):
    return a.graph.apply("sub", (a, b))


def mul(a, b):
    return a.graph.apply("mul", (a, b))


def div(a, b):
    return a.graph.apply("div", (a, b))


def minimum(a, b):
    return a.graph.apply("min", (a, b))


def atan2(y, x):
    return y.graph.apply("atan2", (y, x))


def scalar_mul(x, c):
    return x.graph.apply("scalar_mul", (x,), {"c": float(c)})


def add_scalar(x, c):
    return x.graph.apply("add_scalar", (x,), {"c": float(c)})


def matmul(a, b):
    return a.graph.apply("matmul", (a, b))


def reshape(x, shape):
    return x.graph.apply("reshape", (x,), {"shape": tuple(shape)})


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return x.graph.apply("sum", (x,), {"axis": axis})


def mean(x, axis=None):
    return x.graph.apply("mean", (x,), {"axis": axis})


def expand(x, shape, axis=None):
    return x.graph.apply("expand", (x,), {"shape": tuple(shape), "axis": axis})


def bias_add(x, b):
    return x.graph.apply("bias_add", (x, b))


def concat(xs):
    return xs[0].graph.apply("concat", tuple(xs))


def slice_last(x, start, stop):
    return x.graph.apply("slice", (x,), {"start": int(start), "stop": int(stop)})


def clip(x, lo, hi):
    return x.graph.apply("clip", (x,), {"lo": float(lo), "hi": float(hi)})


def l1_norm(x, axis=None):
    return x.graph.apply("l1_norm", (x,), {"axis": axis})


def l2_norm_smoothed(x, axis=None):
    return x.graph.apply("l2_norm_smoothed", (x,), {"axis": axis})


def gaussian_reparam(mean_, log_std, noise):
    return mean_.graph.apply("gaussian_reparam", (mean_, log_std, noise))


# ---------------------------------------------------------------------------
# ops namespaces used by the backward rules
# ---------------------------------------------------------------------------

class _RawOps:
    """numpy implementation of the ops the backward rules need."""

    @staticmethod
    def apply(kind, parents, attrs=None):
        return FORWARD[kind](attrs, *parents)

    add = staticmethod(lambda a, b: FORWARD["add"](None, a, b))
    sub = staticmethod(lambda a, b: FORWARD["sub"](None, a, b))
    mul = staticmethod(lambda a, b: FORWARD["mul"](None, a, b))
    div = staticmethod(lambda a, b: FORWARD["div"](None, a, b))
    neg = staticmethod(lambda x: -x)
    scalar_mul = staticmethod(lambda x, c: x * c)
    add_scalar = staticmethod(lambda x, c: x + c)
    matmul = staticmethod(lambda a, b: a @ b)
    transpose = staticmethod(lambda x: x.T)
    reshape = staticmethod(lambda x, shape: x.reshape(shape))
    sum = staticmethod(lambda x, axis=None: np.asarray(np.sum(x, axis=axis), dtype=np.float64))
    expand = staticmethod(lambda x, shape, axis=None: _fw_expand({"shape": shape, "axis": axis}, x))
    slice = staticmethod(lambda x, start, stop: x[..., start:stop])
    embed = staticmethod(lambda x, width, start: _fw_embed({"width": width, "start": start}, x))
    square = staticmethod(lambda x: x * x)
    exp = staticmethod(np.exp)
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    sign = staticmethod(np.sign)
    positive = staticmethod(lambda x: (x > 0.0).astype(np.float64))
    less_equal = staticmethod(lambda a, b: FORWARD["less_equal"](None, a, b))
    in_range = staticmethod(lambda x, lo, hi: ((x >= lo) & (x <= hi)).astype(np.float64))
    clip = staticmethod(np.clip)
    swish_grad = staticmethod(np_swish_grad)
    swish_grad2 = staticmethod(np_swish_grad2)


class _GraphOps:
    """Same surface as :class:`_RawOps` but every op appends a node."""

    def __init__(self, graph: Graph):
        self.g = graph

    def add(self, a, b):
        return self.g.apply("add", (a, b))

    def sub(self, a, b):
        return self.g.apply("sub", (a, b))

    def mul(self, a, b):
        return self.g.apply("mul", (a, b))

    def div(self, a, b):
        return self.g.apply("div", (a, b))

    def neg(self, x):
        return self.g.apply("neg", (x,))

    def scalar_mul(self, x, c):
        return self.g.apply("scalar_mul", (x,), {"c": c})

    def add_scalar(self, x, c):
        return self.g.apply("add_scalar", (x,), {"c": c})

    def matmul(self, a, b):
        return self.g.apply("matmul", (a, b))

    def transpose(self, x):
        return self.g.apply("transpose", (x,))

    def reshape(self, x, shape):
        return self.g.apply("reshape", (x,), {"shape": tuple(shape)})

    def sum(self, x, axis=None):
        return self.g.apply("sum", (x,), {"axis": axis})

    def expand(self, x, shape, axis=None):
        return self.g.apply("expand", (x,), {"shape": tuple(shape), "axis": axis})

    def slice(self, x, start, stop):
        return self.g.apply("slice", (x,), {"start": start, "stop": stop})

    def embed(self, x, width, start):
        return self.g.apply("embed", (x,), {"width": width, "start": start})

    def square(self, x):
        return self.g.apply("square", (x,))

    def exp(self, x):
        return self.g.apply("exp", (x,))

    def sin(self, x):
        return self.g.apply("sin", (x,))

    def cos(self, x):
        return self.g.apply("cos", (x,))

    def sign(self, x):
        return self.g.apply("sign", (x,))

    def positive(self, x):
        return self.g.apply("positive", (x,))

    def less_equal(self, a, b):
        return self.g.apply("less_equal", (a, b))

    def in_range(self, x, lo, hi):
        return self.g.apply("in_range", (x,), {"lo": lo, "hi": hi})

    def clip(self, x, lo, hi):
        return self.g.apply("clip", (x,), {"lo": lo, "hi": hi})

    def swish_grad(self, x):
        return self.g.apply("swish_grad", (x,))

    def swish_grad2(self, x):
        return self.g.apply("swish_grad2", (x,))


RAW = _RawOps()


def _shape(x):
    return x.shape


def _reduce_to(F, g, shape):
    """Sum a gradient back onto a scalar operand that was broadcast."""
    if tuple(_shape(g)) == tuple(shape):
        return g
    return F.reshape(F.sum(g), shape)


# ---------------------------------------------------------------------------
# backward rules: rule(F, g, out, parents, attrs, needs) -> per-parent grads
# ---------------------------------------------------------------------------

def _vjp_add(F, g, out, ps, at, needs):
    a, b = ps
    return (_reduce_to(F, g, a.shape) if needs[0] else None,
            _reduce_to(F, g, b.shape) if needs[1] else None)


def _vjp_sub(F, g, out, ps, at, needs):
    a, b = ps
    return (_reduce_to(F, g, a.shape) if needs[0] else None,
            _reduce_to(F, F.neg(g), b.shape) if needs[1] else None)


def _vjp_mul(F, g, out, ps, at, needs):
    a, b = ps
    return (_reduce_to(F, F.mul(g, b), a.shape) if needs[0] else None,
            _reduce_to(F, F.mul(g, a), b.shape) if needs[1] else None)


def _vjp_div(F, g, out, ps, at, needs):
    a, b = ps
    ga = _reduce_to(F, F.div(g, b), a.shape) if needs[0] else None
    gb = _reduce_to(F, F.neg(F.div(F.mul(g, out), b)), b.shape) if needs[1] else None
    return ga, gb


def _vjp_min(F, g, out, ps, at, needs):
    a, b = ps
    ga_full = F.mul(g, F.less_equal(a, b))
    ga = _reduce_to(F, ga_full, a.shape) if needs[0] else None
    gb = _reduce_to(F, F.sub(g, ga_full), b.shape) if needs[1] else None
    return ga, gb


def _vjp_atan2(F, g, out, ps, at, needs):
    y, x = ps
    den = F.add(F.square(x), F.square(y))
    gy = _reduce_to(F, F.div(F.mul(g, x), den), y.shape) if needs[0] else None
    gx = _reduce_to(F, F.neg(F.div(F.mul(g, y), den)), x.shape) if needs[1] else None
    return gy, gx


def _vjp_matmul(F, g, out, ps, at, needs):
    a, b = ps
    ga = gb = None
    if len(a.shape) == 2 and len(b.shape) == 2:
        if needs[0]:
            ga = F.matmul(g, F.transpose(b))
        if needs[1]:
            gb = F.matmul(F.transpose(a), g)
    elif len(a.shape) == 2:  # matrix @ vector
        if needs[0]:
            ga = F.matmul(F.reshape(g, (a.shape[0], 1)), F.reshape(b, (1, b.shape[0])))
        if needs[1]:
            gb = F.matmul(F.transpose(a), g)
    else:  # vector @ matrix
        if needs[0]:
            ga = F.matmul(b, g)
        if needs[1]:
            gb = F.matmul(F.reshape(a, (a.shape[0], 1)), F.reshape(g, (1, g.shape[0])))
    return ga, gb


def _vjp_sum(F, g, out, ps, at, needs):
    (x,) = ps
    if at["axis"] is None:
        return (F.expand(F.reshape(g, ()), x.shape, None),)
    return (F.expand(g, x.shape, at["axis"]),)


def _vjp_mean(F, g, out, ps, at, needs):
    (x,) = ps
    axis = at["axis"]
    n = int(np.prod(x.shape)) if axis is None else x.shape[axis]
    if axis is None:
        return (F.scalar_mul(F.expand(F.reshape(g, ()), x.shape, None), 1.0 / n),)
    return (F.scalar_mul(F.expand(g, x.shape, axis), 1.0 / n),)


def _vjp_expand(F, g, out, ps, at, needs):
    (x,) = ps
    if at["axis"] is None:
        return (F.reshape(F.sum(g), x.shape),)
    return (F.sum(g, at["axis"]),)


def _vjp_bias_add(F, g, out, ps, at, needs):
    return (g if needs[0] else None, F.sum(g, 0) if needs[1] else None)


def _vjp_concat(F, g, out, ps, at, needs):
    grads, start = [], 0
    for p, need in zip(ps, needs):
        stop = start + p.shape[-1]
        grads.append(F.slice(g, start, stop) if need else None)
        start = stop
    return tuple(grads)


def _vjp_l2(F, g, out, ps, at, needs):
    (x,) = ps
    axis = at["axis"]
    scale = F.div(g, out)
    if axis is None:
        return (F.mul(x, F.expand(F.reshape(scale, ()), x.shape, None)),)
    return (F.mul(x, F.expand(scale, x.shape, axis)),)


def _vjp_l1(F, g, out, ps, at, needs):
    (x,) = ps
    axis = at["axis"]
    if axis is None:
        return (F.mul(F.sign(x), F.expand(F.reshape(g, ()), x.shape, None)),)
    return (F.mul(F.sign(x), F.expand(g, x.shape, axis)),)


def _vjp_reparam(F, g, out, ps, at, needs):
    m, ls, n = ps
    std = F.exp(ls) if (needs[1] or needs[2]) else None
    return (g if needs[0] else None,
            F.mul(F.mul(g, std), n) if needs[1] else None,
            F.mul(g, std) if needs[2] else None)


def _vjp_swish_grad2(F, g, out, ps, at, needs):
    raise HigherOrderError("third-order derivatives of swish are not supported")


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "min": _vjp_min,
    "atan2": _vjp_atan2,
    "neg": lambda F, g, out, ps, at, needs: (F.neg(g),),
    "scalar_mul": lambda F, g, out, ps, at, needs: (F.scalar_mul(g, at["c"]),),
    "add_scalar": lambda F, g, out, ps, at, needs: (g,),
    "matmul": _vjp_matmul,
    "transpose": lambda F, g, out, ps, at, needs: (F.transpose(g),),
    "reshape": lambda F, g, out, ps, at, needs: (F.reshape(g, ps[0].shape),),
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "expand": _vjp_expand,
    "bias_add": _vjp_bias_add,
    "concat": _vjp_concat,
    "slice": lambda F, g, out, ps, at, needs: (F.embed(g, ps[0].shape[-1], at["start"]),),
    "embed": lambda F, g, out, ps, at, needs: (F.slice(g, at["start"], at["start"] + ps[0].shape[-1]),),
    "tanh": lambda F, g, out, ps, at, needs: (F.mul(g, F.add_scalar(F.neg(F.square(out)), 1.0)),),
    "sigmoid": lambda F, g, out, ps, at, needs: (F.mul(g, F.mul(out, F.add_scalar(F.neg(out), 1.0))),),
    "swish": lambda F, g, out, ps, at, needs: (F.mul(g, F.swish_grad(ps[0])),),
    "swish_grad": lambda F, g, out, ps, at, needs: (F.mul(g, F.swish_grad2(ps[0])),),
    "swish_grad2": _vjp_swish_grad2,
    "relu": lambda F, g, out, ps, at, needs: (F.mul(g, F.positive(ps[0])),),
    "exp": lambda F, g, out, ps, at, needs: (F.mul(g, out),),
    "log": lambda F, g, out, ps, at, needs: (F.div(g, ps[0]),),
    "square": lambda F, g, out, ps, at, needs: (F.mul(g, F.scalar_mul(ps[0], 2.0)),),
    "sqrt": lambda F, g, out, ps, at, needs: (F.div(F.scalar_mul(g, 0.5), out),),
    "abs": lambda F, g, out, ps, at, needs: (F.mul(g, F.sign(ps[0])),),
    "sin": lambda F, g, out, ps, at, needs: (F.mul(g, F.cos(ps[0])),),
    "cos": lambda F, g, out, ps, at, needs: (F.neg(F.mul(g, F.sin(ps[0]))),),
    "huber": lambda F, g, out, ps, at, needs: (F.mul(g, F.clip(ps[0], -HUBER_DELTA, HUBER_DELTA)),),
    "clip": lambda F, g, out, ps, at, needs: (F.mul(g, F.in_range(ps[0], at["lo"], at["hi"])),),
    "l1_norm": _vjp_l1,
    "l2_norm_smoothed": _vjp_l2,
    "gaussian_reparam": _vjp_reparam,
}


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _backward(output: Value, inputs: Sequence[Value], create_graph: bool) -> dict:
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    graph = output.graph
    graph.eval(output)
    nodes = graph.nodes
    input_ids = {v.id for v in inputs}
    lo = min(input_ids)
    hi = output.id
    # forward sweep: which nodes depend on any input
    relevant = set(input_ids)
    for i in range(lo + 1, hi + 1):
        v = nodes[i]
        if v.kind in NONDIFF or v.is_leaf:
            continue
        for p in v.parents:
            if p.id in relevant:
                relevant.add(i)
                break
    if hi not in relevant:
        return {}

    if create_graph:
        F = _GraphOps(graph)
        seed = graph.make_input(output.shape, np.ones(output.shape))
    else:
        F = RAW
        seed = np.ones(output.shape)
    grads = {hi: seed}
    found = {}
    for i in range(hi, lo - 1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in input_ids:
            found[i] = g
        v = nodes[i]
        if v.is_leaf:
            continue
        needs = tuple(p.id in relevant for p in v.parents)
        if create_graph:
            contributions = VJP[v.kind](F, g, v, v.parents, v.attrs, needs)
        else:
            contributions = VJP[v.kind](F, g, v.data, [p.data for p in v.parents], v.attrs, needs)
        for p, need, c in zip(v.parents, needs, contributions):
            if not need or c is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = c if prev is None else F.add(prev, c)
    return found


def grad(output: Value, inputs: Sequence[Value], create_graph: bool = False) -> list[Value]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned values are ordinary graph nodes and
    may be differentiated again.  Otherwise they are constant leaves.
    Inputs that ``output`` does not depend on get an exact zero.
    """
    graph = output.graph
    grads = _backward(output, inputs, create_graph)
    result = []
    for v in inputs:
        g = grads.get(v.id)
        if g is None:
            result.append(graph.make_input(v.shape, np.zeros(v.shape)))
        elif create_graph:
            result.append(g)
        else:
            result.append(graph.make_input(v.shape, np.array(g, dtype=np.float64).reshape(v.shape)))
    return result


def grad_arrays(output: Value, inputs: Sequence[Value]) -> list[np.ndarray]:
    """First-order gradients as plain arrays (no nodes are created)."""
    grads = _backward(output, inputs, create_graph=False)
    out = []
    for v in inputs:
        g = grads.get(v.id)
        out.append(np.zeros(v.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(v.shape))
    return out


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

Builder = Callable[[Graph, list], Value]


def _as_point(point):
    if isinstance(point, np.ndarray) or np.isscalar(point):
        return [np.atleast_1d(np.asarray(point, dtype=np.float64))]
    return [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in point]


def _evaluate(builder: Builder, arrays, seed):
    graph = Graph(seed)
    leaves = [graph.make_input(a.shape, a, requires_grad=True) for a in arrays]
    out = builder(graph, leaves)
    return float(graph.eval(out).reshape(()))


def numeric_gradient(builder: Builder, point, eps: float = 1e-6, seed: int = 0) -> list[np.ndarray]:
    """Central-difference gradient of the scalar built by ``builder``."""
    arrays = _as_point(point)
    result = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            g[idx] = (_evaluate(builder, plus, seed) - _evaluate(builder, minus, seed)) / (2.0 * eps)
        result.append(g)
    return result


def finite_difference_check(builder: Builder, point, eps: float = 1e-6, seed: int = 0) -> float:
    """Max over coordinates of ``|ad - fd| / max(1, |fd|)``.

    ``builder(graph, leaves)`` must return a scalar value and be
    deterministic for a fixed graph seed.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    arrays = _as_point(point)
    graph = Graph(seed)
    leaves = [graph.make_input(a.shape, a, requires_grad=True) for a in arrays]
    ad = grad_arrays(builder(graph, leaves), leaves)
    fd = numeric_gradient(builder, arrays, eps, seed)
    worst = 0.0
    for a, f in zip(ad, fd):
        err = np.abs(a - f) / np.maximum(1.0, np.abs(f))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def directional_grad_builder(builder: Builder, directions) -> Builder:
    """Builder for ``sum_k <w_k, grad_k f>``; differentiating it gives a Hessian-vector product."""
    dirs = [np.asarray(d, dtype=np.float64) for d in directions]

    def build(graph, leaves):
        out = builder(graph, leaves)
        grads = grad(out, leaves, create_graph=True)
        total = None
        for gk, wk in zip(grads, dirs):
            term = sum(mul(gk, graph.constant(wk.reshape(gk.shape))))
            total = term if total is None else add(total, term)
        return total

    return build


@dataclass(frozen=True)
class GradCheck:
    first_order: float
    second_order: float


def check_first_and_second_order(builder: Builder, point, rng: np.random.Generator,
                                 eps: float = 1e-6, seed: int = 0) -> GradCheck:
    arrays = _as_point(point)
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    first = finite_difference_check(builder, arrays, eps, seed)
    second = finite_difference_check(directional_grad_builder(builder, dirs), arrays, eps, seed)
    return GradCheck(first, second)
