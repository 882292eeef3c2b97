"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Tensor`.  Each op
creates a new tensor that remembers its parents and a closure mapping the
output gradient to one gradient per parent.  :func:`backward` linearises the
graph into a :class:`Tape` (a topological order) and visits every node once,
in reverse.

Broadcasting is deliberately not supported, apart from scalar * tensor and the
explicit :func:`add_rowvec` used by affine layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    """Wrap an op result.  ``backward_fn(g)`` returns one gradient per parent."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return make_node(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return make_node(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row; the only row-broadcast in the engine."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: cannot add bias {b.shape} to rows of {x.shape}")
    return make_node(x.data + b.data, (x, b), "add_rowvec", lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored out_features x in_features."""
    return add_rowvec(matmul(x, transpose(weight)), bias)


# ---------------------------------------------------------------------------
# pointwise


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return make_node(a.data * s, (a,), "scale", lambda g: (g * s,))


def add(a, b) -> Tensor:
    if _is_scalar(a) and not _is_scalar(b):
        a, b = b, a
    if _is_scalar(b):
        a = _as_tensor(a)
        return make_node(a.data + float(b), (a,), "add_scalar", lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        return add(scale(b, -1.0), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.size == 1 and b.size != 1:
        return _scalar_tensor_mul(a, b)
    if b.size == 1 and a.size != 1:
        return _scalar_tensor_mul(b, a)
    _same_shape("mul", a, b)
    return make_node(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def _scalar_tensor_mul(s: Tensor, x: Tensor) -> Tensor:
    sv = s.data.reshape(-1)[0]
    return make_node(
        x.data * sv,
        (s, x),
        "mul_scalar",
        lambda g: (np.full(s.shape, np.sum(g * x.data)), g * sv),
    )


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return make_node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_np(x.data)
    return make_node(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return make_node(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "abs": absolute, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch a pointwise op by name: add, sub, mul, tanh, sigmoid, relu, abs, square."""
    if kind in _UNARY:
        if len(operands) != 1:
            raise TypeError(f"{kind} takes one operand, got {len(operands)}")
        return _UNARY[kind](operands[0])
    if kind in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{kind} takes two operands, got {len(operands)}")
        return _BINARY[kind](*operands)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return make_node(np.array(x.data.sum()), (x,), "sum", lambda g: (np.full(x.shape, g),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    return make_node(np.array(x.data.sum() / n), (x,), "mean", lambda g: (np.full(x.shape, g / n),))


def sum_rows(x: Tensor) -> Tensor:
    """Row sums of a B x d matrix, returned as shape (B,)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows: expected a matrix, got {x.shape}")
    return make_node(x.data.sum(axis=1), (x,), "sum_rows", lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),))


# ---------------------------------------------------------------------------
# shaped ops used by the fusion module and the losses


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected B x d, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    active = norms >= eps
    denom = np.where(active, norms, eps)
    y = x.data / denom

    def back(g):
        # active rows: (g - y <g, y>) / ||x||; clamped rows are a fixed scaling
        proj = np.sum(g * y, axis=1, keepdims=True)
        return (np.where(active, (g - y * proj) / denom, g / eps),)

    return make_node(y, (x,), "l2_normalize", back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("concat_channels", a, b)
    if a.data.ndim != 2:
        raise ShapeError(f"concat_channels: expected B x d inputs, got {a.shape}")
    return make_node(
        np.stack([a.data, b.data], axis=1),
        (a, b),
        "concat_channels",
        lambda g: (g[:, 0, :], g[:, 1, :]),
    )


def split_channels(x: Tensor) -> tuple[Tensor, Tensor]:
    x = _as_tensor(x)
    if x.data.ndim != 3 or x.shape[1] != 2:
        raise ShapeError(f"split_channels: expected B x 2 x d, got {x.shape}")

    def channel(i):
        def back(g):
            full = np.zeros(x.shape)
            full[:, i, :] = g
            return (full,)

        return make_node(x.data[:, i, :].copy(), (x,), f"channel{i}", back)

    return channel(0), channel(1)


def conv1d_mix(x: Tensor, kernel: Tensor, bias=0.0) -> Tensor:
    """Two-in, one-out 1-D convolution along the length axis with same padding.

    ``out[b, i] = bias + sum_c sum_j kernel[c, j] * xpad[b, c, i + j]`` where
    ``xpad`` carries ``(k - 1) / 2`` zeros on each side (cross-correlation, as
    deep learning frameworks define it).  ``bias`` is a float or a one-element
    tensor.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or x.shape[1] != 2:
        raise ShapeError(f"conv1d_mix: expected B x 2 x d input, got {x.shape}")
    if kernel.data.ndim != 2 or kernel.shape[0] != 2:
        raise ShapeError(f"conv1d_mix: expected 2 x k kernel, got {kernel.shape}")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ValueError(f"conv1d_mix: kernel width must be odd, got {k}")
    bias = _as_tensor(bias)
    if bias.size != 1:
        raise ShapeError(f"conv1d_mix: bias must hold one value, got shape {bias.shape}")

    d = x.shape[2]
    pad = (k - 1) // 2
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # windows[b, c, i, j] = xpad[b, c, i + j]
    windows = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=2)
    out = np.einsum("bcij,cj->bi", windows, kernel.data) + bias.data.reshape(-1)[0]

    def back(g):
        gpad = np.zeros_like(xpad)
        for j in range(k):
            gpad[:, :, j : j + d] += g[:, None, :] * kernel.data[None, :, j, None]
        return (
            gpad[:, :, pad : pad + d],
            np.einsum("bcij,bi->cj", windows, g),
            np.full(bias.shape, g.sum()),
        )

    return make_node(out, (x, kernel, bias), "conv1d_mix", back)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax through the max-shifted log-sum-exp."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected B x C, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(y)
    return make_node(y, (x,), "log_softmax", lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """``out[i] = x[i, index[i]]``."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: need one index per row of {x.shape}, got {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise IndexError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros(x.shape)
        full[rows, idx] = g
        return (full,)

    return make_node(x.data[rows, idx], (x,), "pick", back)


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Topologically ordered record of the ops that produced a root."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: Tape | None = None, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaf gradients add onto whatever is already stored; zero them between
    optimisation steps.  Tensors listed in ``params`` that the root does not
    depend on get an explicit zero gradient.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.shape)
    if not root.requires_grad:
        return
    tape = tape if tape is not None else Tape.from_root(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to every entry of ``p``."""
    out = np.zeros(p.shape)
    flat = p.data.reshape(-1)
    oflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        oflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` is re-evaluated after every perturbation, so it must read the
    parameters' ``.data`` afresh and be deterministic.  Parameter grads are
    left cleared on return.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
        if not np.all(np.isfinite(p.data)):
            return GradCheckReport(math.inf, False, "non-finite parameter")
    root = f()
    if not np.all(np.isfinite(root.data)):
        return GradCheckReport(math.inf, False, "non-finite function value")
    backward(root)
    analytic = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    for p in params:
        p.zero_grad()
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = numeric_grad(f, p, h)
        if not np.all(np.isfinite(numeric)):
            return GradCheckReport(math.inf, False, "non-finite value under perturbation")
        if p.size:
            worst = max(worst, float(relative_error(a, numeric, floor).max()))
    return GradCheckReport(worst, worst < tol)
