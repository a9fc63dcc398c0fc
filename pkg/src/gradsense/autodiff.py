"""Reverse-mode automatic differentiation over a persistent expression graph.

Every backward rule is written with the same differentiable ops as the forward
pass. With ``create_graph=True`` the gradients are ordinary graph nodes and can
be differentiated again, which is what gradient matching needs (the gradient of
``||grad_theta L(x) - g*||^2`` with respect to ``x``). With
``create_graph=False`` the rules run with recording disabled and the results
are detached constants.

Values are float64 numpy arrays computed eagerly at construction;
:func:`evaluate` recomputes a graph from the current leaf data.
"""
import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from gradsense import kernels

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Variable",
    "constant",
    "as_node",
    "no_grad",
    "evaluate",
    "differentiate",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "power",
    "exp",
    "sigmoid",
    "relu",
    "log_softmax",
    "softmax",
    "sum",
    "sum_to",
    "broadcast_to",
    "reshape",
    "transpose",
    "matmul",
    "getitem",
    "scatter",
    "concat",
    "im2col",
    "col2im",
    "conv2d",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by '{op}' node")


_index = itertools.count()
_local = threading.local()


def _recording():
    return getattr(_local, "recording", True)


@contextmanager
def _set_recording(flag):
    prev = _recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    """Context manager: ops build constants with no graph edges."""
    return _set_recording(False)


class Node:
    __slots__ = ("op", "inputs", "value", "requires_grad", "index", "_forward", "_backward")

    # make ``ndarray <op> Node`` defer to the reflected Node operator
    __array_ufunc__ = None

    def __init__(self, op, value, inputs=(), forward=None, backward=None, requires_grad=False):
        self.op = op
        self.value = value
        self.inputs = tuple(inputs)
        self._forward = forward
        self._backward = backward
        self.requires_grad = requires_grad
        self.index = next(_index)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value.item()

    def numpy(self):
        return np.array(self.value, copy=True)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Node division is only supported by a scalar")
        return scale(self, 1.0 / other)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Variable(Node):
    """Leaf with mutable ``data`` and an accumulated ``grad`` of equal shape."""

    __slots__ = ("grad",)

    def __init__(self, data, requires_grad=True):
        value = np.array(data, dtype=np.float64, copy=True)
        super().__init__("leaf", value, requires_grad=requires_grad)
        self.grad = np.zeros_like(value)

    @property
    def node(self):
        return self

    @property
    def data(self):
        return self.value

    @data.setter
    def data(self, new):
        new = np.asarray(new, dtype=np.float64)
        if new.shape != self.value.shape:
            raise ShapeError(f"cannot assign shape {new.shape} to variable of shape {self.value.shape}")
        self.value = np.array(new, copy=True)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Variable(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value):
    return Node("const", np.asarray(value, dtype=np.float64))


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _make(op, inputs, forward, backward):
    try:
        value = forward(*[i.value for i in inputs])
    except ValueError as exc:
        shapes = ", ".join(str(i.shape) for i in inputs)
        raise ShapeError(f"{op}: incompatible input shapes ({shapes}): {exc}") from None
    value = np.asarray(value, dtype=np.float64)
    if not _recording():
        return Node(op, value)
    return Node(op, value, inputs, forward, backward, any(i.requires_grad for i in inputs))


# ---------------------------------------------------------------------------
# elementwise


def _reduce_to(v, shape):
    shape = tuple(shape)
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and v.shape[i + lead] != 1
    )
    return v.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(x, shape):
    """Sum broadcast dimensions of ``x`` away so the result has ``shape``."""
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def bw(node, g, needs):
        return (broadcast_to(g, x.shape),)

    return _make("sum_to", (x,), lambda v: _reduce_to(v, shape), bw)


def broadcast_to(x, shape):
    x = as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def bw(node, g, needs):
        return (sum_to(g, x.shape),)

    return _make("broadcast_to", (x,), lambda v: np.broadcast_to(v, shape), bw)


def add(a, b):
    a, b = as_node(a), as_node(b)

    def bw(node, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make("add", (a, b), np.add, bw)


def sub(a, b):
    a, b = as_node(a), as_node(b)

    def bw(node, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(scale(g, -1.0), b.shape) if needs[1] else None,
        )

    return _make("subtract", (a, b), np.subtract, bw)


def mul(a, b):
    a, b = as_node(a), as_node(b)

    def bw(node, g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make("mul", (a, b), np.multiply, bw)


def scale(x, c):
    """Multiply by a Python scalar constant."""
    x = as_node(x)
    c = float(c)

    def bw(node, g, needs):
        return (scale(g, c),)

    return _make("scale", (x,), lambda v: v * c, bw)


def power(x, p):
    """Elementwise ``x ** p`` for a scalar exponent."""
    x = as_node(x)
    p = float(p)
    if p == 1.0:
        return x

    def bw(node, g, needs):
        return (mul(g, scale(power(x, p - 1.0), p)),)

    return _make("scalar-power", (x,), lambda v: np.power(v, p), bw)


def exp(x):
    x = as_node(x)

    def bw(node, g, needs):
        return (mul(g, node),)

    return _make("exp", (x,), np.exp, bw)


def sigmoid(x):
    x = as_node(x)

    def bw(node, g, needs):
        return (mul(g, mul(node, sub(1.0, node))),)

    return _make("sigmoid", (x,), expit, bw)


def relu(x):
    x = as_node(x)

    def bw(node, g, needs):
        return (mul(g, constant((x.value > 0).astype(np.float64))),)

    return _make("relu", (x,), lambda v: np.maximum(v, 0.0), bw)


def _log_softmax(v):
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x):
    """Log-softmax over the last axis."""
    x = as_node(x)

    def bw(node, g, needs):
        return (sub(g, mul(exp(node), sum(g, axis=-1, keepdims=True))),)

    return _make("softmax-log", (x,), _log_softmax, bw)


def softmax(x):
    return exp(log_softmax(x))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):
    x = as_node(x)
    axes = _normalize_axis(axis, x.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def bw(node, g, needs):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, x.shape),)

    return _make("sum", (x,), lambda v: v.sum(axis=axes, keepdims=keepdims), bw)


def reshape(x, shape):
    x = as_node(x)
    shape = tuple(shape)

    def bw(node, g, needs):
        return (reshape(g, x.shape),)

    return _make("reshape", (x,), lambda v: v.reshape(shape), bw)


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    x = as_node(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(node, g, needs):
        return (transpose(g, inverse),)

    return _make("transpose", (x,), lambda v: v.transpose(axes), bw)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")

    def bw(node, g, needs):
        return (
            sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None,
            sum_to(matmul(transpose(a), g), b.shape) if needs[1] else None,
        )

    return _make("matmul", (a, b), np.matmul, bw)


def _check_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if isinstance(p, (list, np.ndarray)):
            arr = np.asarray(p)
            if arr.dtype == bool:
                continue
            if len(np.unique(arr)) != arr.size:
                raise ShapeError("getitem: repeated indices are not supported")
    return tuple(np.asarray(p) if isinstance(p, list) else p for p in parts)


def getitem(x, index):
    """Static indexing: basic slices, integers or duplicate-free index arrays."""
    x = as_node(x)
    index = _check_index(index)

    def bw(node, g, needs):
        return (scatter(g, index, x.shape),)

    return _make("getitem", (x,), lambda v: v[index], bw)


def scatter(x, index, shape):
    """Place ``x`` at ``index`` inside zeros of ``shape``; adjoint of getitem."""
    x = as_node(x)
    index = _check_index(index)
    shape = tuple(shape)

    def fw(v):
        out = np.zeros(shape, dtype=np.float64)
        out[index] = v
        return out

    def bw(node, g, needs):
        return (getitem(g, index),)

    return _make("scatter", (x,), fw, bw)


def concat(xs, axis=0):
    xs = [as_node(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(node, g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _make("concat", tuple(xs), lambda *vs: np.concatenate(vs, axis=ax), bw)


# ---------------------------------------------------------------------------
# convolution


def im2col(x, k, stride):
    x = as_node(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"im2col: kernel {k} larger than input {h}x{w}")

    def bw(node, g, needs):
        return (col2im(g, (c, h, w), k, stride),)

    return _make("im2col", (x,), lambda v: kernels.im2col(v, k, stride), bw)


def col2im(cols, image_shape, k, stride):
    cols = as_node(cols)
    c, h, w = image_shape

    def bw(node, g, needs):
        return (im2col(g, k, stride),)

    return _make("col2im", (cols,), lambda v: kernels.col2im(v, c, h, w, k, stride), bw)


def conv2d(x, weight, bias=None, stride=1):
    """Valid (unpadded) strided cross-correlation.

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, k, k)``; lowered to
    im2col followed by a broadcast matmul.
    """
    x, weight = as_node(x), as_node(weight)
    o, c, k, k2 = weight.shape
    if k != k2 or x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, _, h, w = x.shape
    oh, ow = kernels.out_size(h, k, stride), kernels.out_size(w, k, stride)
    cols = im2col(x, k, stride)
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    out = reshape(out, (n, o, oh, ow))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo(output):
    seen = {}
    stack = [output]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen[id(n)] = n
        stack.extend(n.inputs)
    # creation index is a valid topological order: inputs always exist first
    return sorted(seen.values(), key=lambda n: n.index)


def evaluate(output):
    """Recompute the graph rooted at ``output`` from current leaf values."""
    for n in _topo(output):
        if n.inputs and n._forward is not None:
            try:
                n.value = np.asarray(n._forward(*[i.value for i in n.inputs]), dtype=np.float64)
            except ValueError as exc:
                raise ShapeError(f"{n.op}: {exc}") from None
        if not np.all(np.isfinite(n.value)):
            raise NonFiniteError(n.op)
    return output.value


def differentiate(output, wrt, create_graph=False):
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    Variables unreachable from ``output`` get zero gradients.
    """
    if not isinstance(output, Node):
        raise TypeError("differentiate expects a Node")
    if output.size != 1:
        raise ShapeError(f"differentiate: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(v) for v in wrt}
    order = _topo(output)

    # only propagate along paths that reach a requested variable
    relevant = set()
    for n in order:
        if n.requires_grad and (id(n) in targets or any(id(i) in relevant for i in n.inputs)):
            relevant.add(id(n))

    grads = {}
    with _set_recording(create_graph):
        if id(output) in relevant:
            grads[id(output)] = constant(np.ones_like(output.value))
        for n in reversed(order):
            g = grads.get(id(n))
            if g is None or not n.inputs or n._backward is None:
                continue
            needs = tuple(id(i) in relevant for i in n.inputs)
            if not any(needs):
                continue
            for inp, contrib in zip(n.inputs, n._backward(n, g, needs)):
                if contrib is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = contrib if prev is None else add(prev, contrib)

    result = []
    for v in wrt:
        g = grads.get(id(v))
        if g is None:
            g = constant(np.zeros_like(v.value))
        elif not create_graph and g.inputs:
            g = constant(g.value)
        result.append(g)
    return result


def backward(output, variables):
    """Accumulate d(output)/d(variable) into each ``variable.grad``."""
    variables = list(variables)
    for v, g in zip(variables, differentiate(output, variables)):
        v.grad = v.grad + g.value
