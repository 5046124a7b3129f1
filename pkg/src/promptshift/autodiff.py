"""Dense-tensor reverse-mode automatic differentiation on a dynamic tape.

Everything is 64-bit floats. Operations are applied through :func:`apply`
(or the thin named wrappers below); while a :class:`Graph` is active, any
operation touching a differentiable value is recorded on the tape, and
:func:`backward` replays the tape in reverse to accumulate gradients into
the participating leaves.

The supported primitive kinds:

    matmul, add, mul, scale, concat_rows, slice_rows, relu, softmax_rows,
    layer_norm_rows, mean, sum, square, sqrt, l2_normalize_rows,
    frobenius_norm, log, neg, transpose

``add`` and ``mul`` accept equal shapes, a scalar operand, or a 1-row
vector broadcast against a matrix of matching width. No other
broadcasting exists.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeMismatch(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, kind: str, shapes, detail: str = ""):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kind}: incompatible shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphConsumed(RuntimeError):
    """Raised when backward is invoked twice on the same graph."""


class Tensor:
    """A dense float64 array with an optional gradient accumulator.

    ``requires_grad`` marks leaves that collect gradients during backward
    passes; their ``grad`` starts at exact zero and is only touched by
    backward passes or :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("kind", "inputs", "attrs", "output", "_bwd")

    def __init__(self, kind, inputs, attrs, output, bwd):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.output = output
        self._bwd = bwd


_GRAPH_STACK: list["Graph | None"] = []


def _active_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Ordered tape of recorded primitive operations.

    Use as a context manager; ops executed inside record themselves when
    any input participates in differentiation. The tape can be replayed
    (bitwise) and walked backward exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _GRAPH_STACK.pop()
        return False

    @property
    def output(self) -> Tensor | None:
        return self.nodes[-1].output if self.nodes else None

    def backward(self, seed: "Tensor | np.ndarray | None" = None) -> None:
        """Accumulate d(final output)/d(leaf) * seed into every leaf grad.

        Saved intermediate state is released afterwards; a second call
        raises :class:`GraphConsumed`.
        """
        if self._consumed:
            raise GraphConsumed("backward already ran on this graph")
        if not self.nodes:
            raise RuntimeError("backward on an empty graph")
        out = self.nodes[-1].output
        if seed is None:
            if out.data.ndim != 0:
                raise ShapeMismatch(
                    "backward", [out.shape], "seed required for non-scalar output"
                )
            seed_arr = np.ones_like(out.data)
        else:
            seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != out.data.shape:
                raise ShapeMismatch("backward", [seed_arr.shape, out.data.shape], "seed shape")

        grads: dict[int, np.ndarray] = {id(out): np.array(seed_arr, copy=True)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                node._bwd = None
                continue
            for tensor, gin in node._bwd(g):
                if tensor.requires_grad:
                    tensor.grad += gin
                elif tensor._recorded:
                    key = id(tensor)
                    if key in grads:
                        grads[key] += gin
                    else:
                        grads[key] = gin
            node._bwd = None
        self._consumed = True

    def replay(self) -> None:
        """Re-run every recorded forward step and check outputs bitwise."""
        for node in self.nodes:
            redo, _ = _OPS[node.kind](node.inputs, node.attrs)
            if not np.array_equal(redo, node.output.data):
                raise AssertionError(f"replay mismatch on {node.kind}")


def backward(graph: Graph, seed=None) -> None:
    graph.backward(seed)


class _suspend_recording:
    def __enter__(self):
        _GRAPH_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a primitive operation, recording it on the active graph."""
    op = _OPS.get(kind)
    if op is None:
        raise ValueError(f"unknown op kind {kind!r}")
    tensors = tuple(_as_tensor(t) for t in inputs)
    out_data, bwd = op(tensors, attrs)
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(t.requires_grad or t._recorded for t in tensors):
        out._recorded = True
        graph.nodes.append(_Node(kind, tensors, dict(attrs), out, bwd))
    return out


# ---------------------------------------------------------------------------
# primitive implementations: each returns (output array, backward closure);
# the closure maps an upstream gradient to [(input tensor, gradient), ...].


def _expect(cond: bool, kind: str, shapes, detail: str = "") -> None:
    if not cond:
        raise ShapeMismatch(kind, shapes, detail)


def _arity(kind, inputs, n):
    if len(inputs) != n:
        raise ShapeMismatch(kind, [t.shape for t in inputs], f"expected {n} inputs")


def _broadcast_pair(kind, a, b):
    """Validate the allowed add/mul shape pairs and return the output shape."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return sa
    if a.data.ndim == 0:
        return sb
    if b.data.ndim == 0:
        return sa
    if len(sa) == 2 and len(sb) == 2 and sb == (1, sa[1]):
        return sa
    if len(sa) == 2 and len(sb) == 2 and sa == (1, sb[1]):
        return sb
    raise ShapeMismatch(kind, [sa, sb], "equal, scalar, or 1-row broadcast only")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0, keepdims=True)


def _op_matmul(inputs, attrs):
    _arity("matmul", inputs, 2)
    a, b = inputs
    _expect(
        a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
        "matmul",
        [a.shape, b.shape],
    )
    out = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return out, bwd


def _op_add(inputs, attrs):
    _arity("add", inputs, 2)
    a, b = inputs
    _broadcast_pair("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return ((a, _reduce_to(g, a.data.shape)), (b, _reduce_to(g, b.data.shape)))

    return out, bwd


def _op_mul(inputs, attrs):
    _arity("mul", inputs, 2)
    a, b = inputs
    _broadcast_pair("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return (
            (a, _reduce_to(g * b.data, a.data.shape)),
            (b, _reduce_to(g * a.data, b.data.shape)),
        )

    return out, bwd


def _op_scale(inputs, attrs):
    _arity("scale", inputs, 1)
    (a,) = inputs
    factor = float(attrs["factor"])
    out = a.data * factor

    def bwd(g):
        return ((a, g * factor),)

    return out, bwd


def _op_concat_rows(inputs, attrs):
    if not inputs:
        raise ShapeMismatch("concat_rows", [], "needs at least one input")
    width = inputs[0].shape[-1] if inputs[0].data.ndim == 2 else None
    for t in inputs:
        _expect(t.data.ndim == 2 and t.shape[1] == width, "concat_rows", [t.shape for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=0)
    counts = [t.shape[0] for t in inputs]

    def bwd(g):
        grads = []
        row = 0
        for t, n in zip(inputs, counts):
            grads.append((t, g[row : row + n]))
            row += n
        return grads

    return out, bwd


def _op_slice_rows(inputs, attrs):
    _arity("slice_rows", inputs, 1)
    (a,) = inputs
    start, stop = int(attrs["start"]), int(attrs["stop"])
    _expect(a.data.ndim == 2, "slice_rows", [a.shape])
    _expect(0 <= start < stop <= a.shape[0], "slice_rows", [a.shape], f"rows [{start}:{stop}]")
    out = a.data[start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return ((a, full),)

    return out, bwd


def _op_relu(inputs, attrs):
    _arity("relu", inputs, 1)
    (a,) = inputs
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return ((a, g * (a.data > 0.0)),)

    return out, bwd


def _op_softmax_rows(inputs, attrs):
    _arity("softmax_rows", inputs, 1)
    (a,) = inputs
    _expect(a.data.ndim == 2 and a.shape[1] > 0, "softmax_rows", [a.shape], "empty rows")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((a, out * (g - dot)),)

    return out, bwd


def _op_layer_norm_rows(inputs, attrs):
    _arity("layer_norm_rows", inputs, 1)
    (a,) = inputs
    _expect(a.data.ndim == 2 and a.shape[1] > 0, "layer_norm_rows", [a.shape], "empty rows")
    eps = float(attrs.get("eps", LAYER_NORM_EPS))
    mu = a.data.mean(axis=1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return ((a, inv * (g - gm - xhat * gx)),)

    return xhat, bwd


def _op_mean(inputs, attrs):
    _arity("mean", inputs, 1)
    (a,) = inputs
    n = a.data.size
    _expect(n > 0, "mean", [a.shape], "empty tensor")
    out = np.asarray(a.data.mean())

    def bwd(g):
        return ((a, np.full_like(a.data, float(g) / n)),)

    return out, bwd


def _op_sum(inputs, attrs):
    _arity("sum", inputs, 1)
    (a,) = inputs
    out = np.asarray(a.data.sum())

    def bwd(g):
        return ((a, np.full_like(a.data, float(g))),)

    return out, bwd


def _op_square(inputs, attrs):
    _arity("square", inputs, 1)
    (a,) = inputs
    out = a.data * a.data

    def bwd(g):
        return ((a, g * 2.0 * a.data),)

    return out, bwd


def _op_sqrt(inputs, attrs):
    _arity("sqrt", inputs, 1)
    (a,) = inputs
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bwd(g):
        return ((a, g * 0.5 / np.sqrt(a.data)),)

    return out, bwd


def _op_l2_normalize_rows(inputs, attrs):
    _arity("l2_normalize_rows", inputs, 1)
    (a,) = inputs
    _expect(a.data.ndim == 2 and a.shape[1] > 0, "l2_normalize_rows", [a.shape], "empty rows")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize_rows: zero-norm row")
    inv = 1.0 / norms
    out = a.data * inv

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((a, inv * (g - out * dot)),)

    return out, bwd


def _op_frobenius_norm(inputs, attrs):
    _arity("frobenius_norm", inputs, 1)
    (a,) = inputs
    out = np.asarray(np.sqrt((a.data * a.data).sum()))

    def bwd(g):
        n = float(out)
        if n == 0.0:
            return ((a, np.zeros_like(a.data)),)
        return ((a, (float(g) / n) * a.data),)

    return out, bwd


def _op_log(inputs, attrs):
    _arity("log", inputs, 1)
    (a,) = inputs
    _expect(a.data.size > 0, "log", [a.shape], "empty tensor")
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    out = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return out, bwd


def _op_neg(inputs, attrs):
    _arity("neg", inputs, 1)
    (a,) = inputs
    out = -a.data

    def bwd(g):
        return ((a, -g),)

    return out, bwd


def _op_transpose(inputs, attrs):
    _arity("transpose", inputs, 1)
    (a,) = inputs
    _expect(a.data.ndim == 2, "transpose", [a.shape])
    out = a.data.T.copy()

    def bwd(g):
        return ((a, g.T),)

    return out, bwd


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "mul": _op_mul,
    "scale": _op_scale,
    "concat_rows": _op_concat_rows,
    "slice_rows": _op_slice_rows,
    "relu": _op_relu,
    "softmax_rows": _op_softmax_rows,
    "layer_norm_rows": _op_layer_norm_rows,
    "mean": _op_mean,
    "sum": _op_sum,
    "square": _op_square,
    "sqrt": _op_sqrt,
    "l2_normalize_rows": _op_l2_normalize_rows,
    "frobenius_norm": _op_frobenius_norm,
    "log": _op_log,
    "neg": _op_neg,
    "transpose": _op_transpose,
}

OP_KINDS = tuple(sorted(_OPS))


# named wrappers ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    return apply("matmul", [a, b])


def add(a, b) -> Tensor:
    return apply("add", [a, b])


def mul(a, b) -> Tensor:
    return apply("mul", [a, b])


def scale(a, factor: float) -> Tensor:
    return apply("scale", [a], factor=factor)


def concat_rows(tensors) -> Tensor:
    return apply("concat_rows", list(tensors))


def slice_rows(a, start: int, stop: int) -> Tensor:
    return apply("slice_rows", [a], start=start, stop=stop)


def relu(a) -> Tensor:
    return apply("relu", [a])


def softmax_rows(a) -> Tensor:
    return apply("softmax_rows", [a])


def layer_norm_rows(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    return apply("layer_norm_rows", [a], eps=eps)


def mean_all(a) -> Tensor:
    return apply("mean", [a])


def sum_all(a) -> Tensor:
    return apply("sum", [a])


def square(a) -> Tensor:
    return apply("square", [a])


def sqrt(a) -> Tensor:
    return apply("sqrt", [a])


def l2_normalize_rows(a) -> Tensor:
    return apply("l2_normalize_rows", [a])


def frobenius_norm(a) -> Tensor:
    return apply("frobenius_norm", [a])


def log(a) -> Tensor:
    return apply("log", [a])


def neg(a) -> Tensor:
    return apply("neg", [a])


def transpose(a) -> Tensor:
    return apply("transpose", [a])


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def finite_diff_grad(loss_fn, param: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a deterministic scalar loss.

    ``loss_fn`` is called as ``loss_fn(param)`` with recording suspended,
    so tapes active in the caller are untouched.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = param.data.reshape(-1)
    grad = np.zeros_like(param.data)
    gflat = grad.reshape(-1)
    with _suspend_recording():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _scalar_value(loss_fn(param))
            flat[i] = orig - eps
            f_minus = _scalar_value(loss_fn(param))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


def _scalar_value(out) -> float:
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    if data.size != 1:
        raise ValueError(f"loss function must be scalar-valued, got shape {data.shape}")
    return float(data.reshape(()))
