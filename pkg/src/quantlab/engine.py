"""Dense tensor arithmetic with reverse-mode autodiff whose backward pass is
itself a graph.

Every primitive registers a derivative rule that emits new graph nodes built
from the same primitives, so the output of ``backward`` can be differentiated
again (``grad_of_grad``).  This closure property is what the gradient-matching
distillation objective and the gradient-norm training penalty rely on.

Values are computed eagerly at node construction; ``evaluate`` re-runs the
recorded graph to check bit-for-bit reproducibility.  Precision follows the
leaves: float64 graphs for gradient checks, float32 for training loops.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for an op; message names the op_kind."""


class GraphError(ValueError):
    """Graph contract violation (non-scalar backward root, bad wrt set, ...)."""


class UnsupportedOp(RuntimeError):
    """An op on a differentiation path has no registered derivative rule."""


class GradientWarning(UserWarning):
    """Raised when a requested gradient target is unreachable from the root."""


_uid_counter = 0


def _next_uid() -> int:
    global _uid_counter
    _uid_counter += 1
    return _uid_counter


class GraphValue:
    """A node in a differentiable computation graph.

    Leaves hold data only (``op is None``); interior nodes record the op kind,
    input nodes and op-specific attrs.  ``requires_grad=False`` nodes never
    appear as differentiation targets.
    """

    __slots__ = ("data", "op", "inputs", "attrs", "requires_grad", "uid")

    def __init__(self, data, op=None, inputs=(), attrs=None, requires_grad=False):
        self.data = np.asarray(data)
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.requires_grad = bool(requires_grad)
        self.uid = _next_uid()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        kind = self.op or ("param" if self.requires_grad else "const")
        return f"GraphValue({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def leaf(data, requires_grad: bool = True) -> GraphValue:
    return GraphValue(np.asarray(data), requires_grad=requires_grad)


def constant(data, dtype=None) -> GraphValue:
    arr = np.asarray(data, dtype=dtype)
    return GraphValue(arr, requires_grad=False)


def detach(v: GraphValue) -> GraphValue:
    """Constant leaf carrying a copy of v's current value."""
    return GraphValue(v.data.copy(), requires_grad=False)


# --- primitive registry -----------------------------------------------------
#
# forward: (tuple of arrays, attrs) -> array
# vjp:     (input nodes, output node, upstream grad node, attrs)
#              -> tuple of grad nodes (None for non-differentiable inputs)

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _register(name: str, forward: Callable, vjp: Callable) -> None:
    _FORWARD[name] = forward
    _VJP[name] = vjp


def _node(op: str, inputs: Sequence[GraphValue], attrs=None) -> GraphValue:
    attrs = attrs or {}
    arrays = tuple(v.data for v in inputs)
    try:
        out = _FORWARD[op](arrays, attrs)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: {exc}") from exc
    rg = any(v.requires_grad for v in inputs)
    return GraphValue(out, op=op, inputs=inputs, attrs=attrs, requires_grad=rg)


def _unbroadcast(g: GraphValue, shape: tuple) -> GraphValue:
    """Reduce a broadcast gradient back to ``shape`` using sum primitives."""
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# --- elementwise arithmetic ---

_register(
    "add",
    lambda a, _: a[0] + a[1],
    lambda inp, out, g, attrs: (_unbroadcast(g, inp[0].shape), _unbroadcast(g, inp[1].shape)),
)

_register(
    "sub",
    lambda a, _: a[0] - a[1],
    lambda inp, out, g, attrs: (
        _unbroadcast(g, inp[0].shape),
        _unbroadcast(scale(g, -1.0), inp[1].shape),
    ),
)

_register(
    "mul",
    lambda a, _: a[0] * a[1],
    lambda inp, out, g, attrs: (
        _unbroadcast(mul(g, inp[1]), inp[0].shape),
        _unbroadcast(mul(g, inp[0]), inp[1].shape),
    ),
)

_register(
    "scale",
    lambda a, attrs: a[0] * attrs["c"],
    lambda inp, out, g, attrs: (scale(g, attrs["c"]),),
)

_register(
    "exp",
    lambda a, _: np.exp(a[0]),
    lambda inp, out, g, attrs: (mul(g, out),),
)

_register(
    "log",
    lambda a, _: np.log(a[0]),
    lambda inp, out, g, attrs: (mul(g, power(inp[0], -1.0)),),
)


def _power_fwd(a, attrs):
    return np.power(a[0], attrs["p"])


def _power_vjp(inp, out, g, attrs):
    p = attrs["p"]
    return (scale(mul(g, power(inp[0], p - 1.0)), p),)


_register("power", _power_fwd, _power_vjp)


# --- linear algebra / structure ---


def _matmul_fwd(a, _):
    x, y = a
    if x.ndim < 2 or y.ndim < 2:
        raise ValueError(f"needs ndim >= 2 operands, got {x.shape} @ {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ValueError(f"inner dimensions differ: {x.shape} @ {y.shape}")
    return x @ y


def _matmul_vjp(inp, out, g, attrs):
    a, b = inp
    ga = _unbroadcast(matmul(g, transpose(b)), a.shape)
    gb = _unbroadcast(matmul(transpose(a), g), b.shape)
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_vjp)


def _transpose_fwd(a, attrs):
    axes = attrs["axes"]
    return np.transpose(a[0], axes)


def _transpose_vjp(inp, out, g, attrs):
    axes = attrs["axes"]
    inv = tuple(int(i) for i in np.argsort(axes))
    return (transpose(g, inv),)


_register("transpose", _transpose_fwd, _transpose_vjp)

_register(
    "reshape",
    lambda a, attrs: a[0].reshape(attrs["shape"]),
    lambda inp, out, g, attrs: (reshape(g, inp[0].shape),),
)


def _concat_vjp(inp, out, g, attrs):
    axis = attrs["axis"]
    grads = []
    start = 0
    for v in inp:
        stop = start + v.shape[axis]
        grads.append(slice_axis(g, axis, start, stop))
        start = stop
    return tuple(grads)


_register(
    "concat",
    lambda a, attrs: np.concatenate(a, axis=attrs["axis"]),
    _concat_vjp,
)


def _slice_fwd(a, attrs):
    idx = [slice(None)] * a[0].ndim
    idx[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    return a[0][tuple(idx)]


def _slice_vjp(inp, out, g, attrs):
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    src = inp[0]
    parts = []
    if start > 0:
        shp = list(src.shape)
        shp[axis] = start
        parts.append(constant(np.zeros(shp, dtype=src.dtype.type)))
    parts.append(g)
    if stop < src.shape[axis]:
        shp = list(src.shape)
        shp[axis] = src.shape[axis] - stop
        parts.append(constant(np.zeros(shp, dtype=src.dtype.type)))
    if len(parts) == 1:
        return (g,)
    return (concat(parts, axis),)


_register("slice", _slice_fwd, _slice_vjp)


def _sum_fwd(a, attrs):
    return np.sum(a[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _sum_vjp(inp, out, g, attrs):
    axis, keepdims = attrs["axis"], attrs["keepdims"]
    src_shape = inp[0].shape
    if axis is None:
        kd_shape = (1,) * len(src_shape)
    else:
        kd_shape = tuple(1 if i in axis else n for i, n in enumerate(src_shape))
    if not keepdims:
        g = reshape(g, kd_shape)
    return (broadcast_to(g, src_shape),)


_register("sum", _sum_fwd, _sum_vjp)

_register(
    "broadcast-to",
    lambda a, attrs: np.ascontiguousarray(np.broadcast_to(a[0], attrs["shape"])),
    lambda inp, out, g, attrs: (_unbroadcast(g, inp[0].shape),),
)


def _embedding_fwd(a, attrs):
    return a[0][attrs["ids"]]


def _embedding_vjp(inp, out, g, attrs):
    return (index_add(g, attrs["ids"], inp[0].shape),)


_register("embedding-lookup", _embedding_fwd, _embedding_vjp)


def _index_add_fwd(a, attrs):
    ids = attrs["ids"]
    out_shape = attrs["out_shape"]
    g = a[0]
    acc = np.zeros(out_shape, dtype=g.dtype)
    np.add.at(acc, ids.reshape(-1), g.reshape(-1, out_shape[-1]))
    return acc


def _index_add_vjp(inp, out, g, attrs):
    return (embedding(g, attrs["ids"]),)


_register("index-add", _index_add_fwd, _index_add_vjp)


# --- fused nonlinearities (log-sum-exp stabilized) ---
#
# These are primitives for speed, but their derivative rules still emit
# primitive nodes, so double backprop flows through them.


def _softmax_fwd(a, _):
    x = a[0]
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(inp, out, g, attrs):
    inner = reduce_sum(mul(g, out), axis=-1, keepdims=True)
    return (mul(out, sub(g, inner)),)


_register("softmax", _softmax_fwd, _softmax_vjp)


def _sigmoid_fwd(a, _):
    return 1.0 / (1.0 + np.exp(-a[0]))


def _sigmoid_vjp(inp, out, g, attrs):
    one = constant(np.ones((), dtype=out.data.dtype))
    return (mul(g, mul(out, sub(one, out))),)


_register("sigmoid", _sigmoid_fwd, _sigmoid_vjp)


def _cross_entropy_fwd(a, attrs):
    logits = a[0]
    ids = attrs["ids"]
    m = np.max(logits, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(logits - m), axis=-1))
    picked = np.take_along_axis(logits, ids[..., None], axis=-1)[..., 0]
    return np.asarray(np.sum(lse - picked) / ids.size, dtype=logits.dtype)


def _cross_entropy_vjp(inp, out, g, attrs):
    ids = attrs["ids"]
    logits = inp[0]
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    diff = sub(softmax(logits), constant(onehot))
    return (mul(scale(diff, 1.0 / ids.size), g),)


_register("cross-entropy", _cross_entropy_fwd, _cross_entropy_vjp)


# --- straight-through quantization ---


def _stq_fwd(a, attrs):
    x = a[0]
    mode = attrs["mode"]
    if mode == "round":
        return np.rint(x)
    if mode == "round-clamp":
        return np.clip(np.rint(x), attrs["lo"], attrs["hi"])
    if mode == "ternary":
        s = float(np.mean(np.abs(x)))
        if s == 0.0:
            s = 1e-8
        return np.clip(np.rint(x / s), -1.0, 1.0) * s
    raise ValueError(f"unknown straight-through mode {mode!r}")


_register(
    "straight-through-quantize",
    _stq_fwd,
    lambda inp, out, g, attrs: (g,),  # identity rule, by definition
)


# --- public graph constructors ----------------------------------------------


def _coerce(v) -> GraphValue:
    if isinstance(v, GraphValue):
        return v
    return constant(v)


def add(a, b) -> GraphValue:
    return _node("add", (_coerce(a), _coerce(b)))


def sub(a, b) -> GraphValue:
    return _node("sub", (_coerce(a), _coerce(b)))


def mul(a, b) -> GraphValue:
    return _node("mul", (_coerce(a), _coerce(b)))


def scale(a, c: float) -> GraphValue:
    return _node("scale", (_coerce(a),), {"c": float(c)})


def neg(a) -> GraphValue:
    return scale(a, -1.0)


def exp(a) -> GraphValue:
    return _node("exp", (_coerce(a),))


def log(a) -> GraphValue:
    return _node("log", (_coerce(a),))


def power(a, p: float) -> GraphValue:
    return _node("power", (_coerce(a),), {"p": float(p)})


def matmul(a, b) -> GraphValue:
    return _node("matmul", (_coerce(a), _coerce(b)))


def transpose(a, axes=None) -> GraphValue:
    a = _coerce(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return _node("transpose", (a,), {"axes": tuple(int(i) for i in axes)})


def reshape(a, shape) -> GraphValue:
    return _node("reshape", (_coerce(a),), {"shape": tuple(int(n) for n in shape)})


def concat(parts: Sequence[GraphValue], axis: int) -> GraphValue:
    return _node("concat", tuple(_coerce(p) for p in parts), {"axis": int(axis)})


def slice_axis(a, axis: int, start: int, stop: int) -> GraphValue:
    return _node("slice", (_coerce(a),), {"axis": int(axis), "start": int(start), "stop": int(stop)})


def reduce_sum(a, axis=None, keepdims: bool = False) -> GraphValue:
    if axis is not None:
        if isinstance(axis, int):
            axis = (axis,)
        a_nd = _coerce(a).data.ndim
        axis = tuple(sorted(ax % a_nd for ax in axis))
    return _node("sum", (_coerce(a),), {"axis": axis, "keepdims": bool(keepdims)})


def broadcast_to(a, shape) -> GraphValue:
    return _node("broadcast-to", (_coerce(a),), {"shape": tuple(int(n) for n in shape)})


def embedding(table, ids: np.ndarray) -> GraphValue:
    ids = np.asarray(ids, dtype=np.int64)
    return _node("embedding-lookup", (_coerce(table),), {"ids": ids})


def index_add(g, ids: np.ndarray, out_shape) -> GraphValue:
    ids = np.asarray(ids, dtype=np.int64)
    return _node("index-add", (_coerce(g),), {"ids": ids, "out_shape": tuple(out_shape)})


def ste_quantize(x, mode: str = "round", lo: int | None = None, hi: int | None = None) -> GraphValue:
    attrs = {"mode": mode}
    if mode == "round-clamp":
        attrs["lo"] = float(lo)
        attrs["hi"] = float(hi)
    return _node("straight-through-quantize", (_coerce(x),), attrs)


# --- composites (primitive-closed, so second derivatives come for free) ---


def reduce_mean(a, axis=None, keepdims: bool = False) -> GraphValue:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        axs = (axis,) if isinstance(axis, int) else axis
        count = 1
        for ax in axs:
            count *= a.shape[ax % a.data.ndim]
    return scale(reduce_sum(a, axis, keepdims), 1.0 / count)


def softmax(a) -> GraphValue:
    """Softmax over the last axis (log-sum-exp stabilized)."""
    return _node("softmax", (_coerce(a),))


def log_softmax(a) -> GraphValue:
    a = _coerce(a)
    m = constant(np.max(a.data, axis=-1, keepdims=True))
    shifted = sub(a, m)
    lse = add(m, log(reduce_sum(exp(shifted), axis=-1, keepdims=True)))
    return sub(a, lse)


def cross_entropy(logits, target_ids: np.ndarray) -> GraphValue:
    """Mean negative log-likelihood of integer targets over all positions.

    ``target_ids`` has the shape of ``logits`` minus the vocabulary axis.
    """
    ids = np.asarray(target_ids, dtype=np.int64)
    return _node("cross-entropy", (_coerce(logits),), {"ids": ids})


def sigmoid(x) -> GraphValue:
    return _node("sigmoid", (_coerce(x),))


def silu(x) -> GraphValue:
    x = _coerce(x)
    return mul(x, sigmoid(x))


def rms_norm(x, gain=None, eps: float = 1e-6) -> GraphValue:
    x = _coerce(x)
    ms = reduce_mean(mul(x, x), axis=-1, keepdims=True)
    r = power(add(ms, constant(np.asarray(eps, dtype=x.data.dtype))), -0.5)
    y = mul(x, r)
    if gain is not None:
        y = mul(y, gain)
    return y


def layer_norm(x, gain=None, eps: float = 1e-6) -> GraphValue:
    x = _coerce(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    y = mul(xc, power(add(var, constant(np.asarray(eps, dtype=x.data.dtype))), -0.5))
    if gain is not None:
        y = mul(y, gain)
    return y


def frobenius_norm_sq(x) -> GraphValue:
    x = _coerce(x)
    return reduce_sum(mul(x, x))


def cosine_similarity(a, b) -> GraphValue:
    a, b = _coerce(a), _coerce(b)
    s_ab = reduce_sum(mul(a, b))
    s_aa = frobenius_norm_sq(a)
    s_bb = frobenius_norm_sq(b)
    return mul(s_ab, power(mul(s_aa, s_bb), -0.5))


def identity(x) -> GraphValue:
    """Pass-through node; isolates one consumer edge for adjoint capture."""
    return scale(x, 1.0)


# --- evaluation and differentiation ------------------------------------------


def _toposort(root: GraphValue) -> list[GraphValue]:
    order: list[GraphValue] = []
    seen: set[int] = set()
    stack: list[tuple[GraphValue, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for child in reversed(node.inputs):
            if child.uid not in seen:
                stack.append((child, False))
    return order  # inputs before consumers


def evaluate(root: GraphValue) -> np.ndarray:
    """Recompute the graph below ``root`` in deterministic topological order.

    Repeated calls on an unchanged graph return bit-identical arrays.
    """
    order = _toposort(root)
    values: dict[int, np.ndarray] = {}
    for node in order:
        if node.op is None:
            values[node.uid] = node.data
        else:
            arrays = tuple(values[v.uid] for v in node.inputs)
            try:
                values[node.uid] = _FORWARD[node.op](arrays, node.attrs)
            except ValueError as exc:
                raise ShapeMismatch(f"{node.op}: {exc}") from exc
    return values[root.uid]


def backward(root: GraphValue, wrt: Iterable[GraphValue]) -> dict[GraphValue, GraphValue]:
    """Reverse-mode gradients of a scalar root.

    Returned gradients are graph values built from registered primitives and
    can serve as roots of a further backward pass.  Unreachable targets get a
    zero gradient and a ``GradientWarning``.
    """
    wrt = list(wrt)
    if root.data.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    for v in wrt:
        if not v.requires_grad:
            raise GraphError("wrt contains a GraphValue with requires_grad=False")

    order = _toposort(root)
    wrt_ids = {v.uid for v in wrt}

    # a node matters iff some wrt node is reachable from it via input edges
    relevant: set[int] = set()
    for node in order:  # inputs precede consumers
        if node.uid in wrt_ids or any(i.uid in relevant for i in node.inputs):
            relevant.add(node.uid)

    adjoint: dict[int, GraphValue] = {}
    if root.uid in relevant:
        adjoint[root.uid] = constant(np.ones(root.shape, dtype=root.data.dtype))

    for node in reversed(order):
        g = adjoint.get(node.uid)
        if g is None or node.op is None:
            continue
        rule = _VJP.get(node.op)
        if rule is None:
            raise UnsupportedOp(f"no derivative rule registered for op {node.op!r}")
        grads = rule(node.inputs, node, g, node.attrs)
        for child, cg in zip(node.inputs, grads):
            if cg is None or child.uid not in relevant:
                continue
            prev = adjoint.get(child.uid)
            adjoint[child.uid] = cg if prev is None else add(prev, cg)

    out: dict[GraphValue, GraphValue] = {}
    for v in wrt:
        g = adjoint.get(v.uid)
        if g is None:
            warnings.warn(
                f"gradient target {v!r} unreachable from root; returning zeros",
                GradientWarning,
                stacklevel=2,
            )
            g = constant(np.zeros(v.shape, dtype=v.data.dtype))
            g.attrs["unreachable"] = True
        out[v] = g
    return out


def grad_of_grad(
    root: GraphValue,
    inner: GraphValue,
    outer_params: Iterable[GraphValue],
) -> dict[GraphValue, GraphValue]:
    """d(||grad of root wrt inner||^2)/d(theta) for each theta in outer_params."""
    g = backward(root, [inner])[inner]
    norm_sq = frobenius_norm_sq(g)
    return backward(norm_sq, outer_params)


def finite_diff(f: Callable[[np.ndarray], float], point: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate; test oracle only."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(point)
        flat[i] = orig - step
        fm = f(point)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
