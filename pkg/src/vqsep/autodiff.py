"""Small reverse-mode autodiff over numpy arrays.

Only the operations the VQ-VAE needs are provided: 1-D convolution and its
transpose, a handful of pointwise ops, row gathering for the codebook, mean
squared error and a stop-gradient.  Graphs are built on the fly (define-by-run)
and discarded after each ``backward``.

Convolutions accept either ``[C, T]`` or batched ``[B, C, T]`` inputs.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "ShapeError",
    "GeometryError",
    "GradientError",
    "tensor",
    "parameter",
    "get_dtype",
    "precision",
    "no_grad",
    "conv1d",
    "conv1d_transpose",
    "conv1d_output_length",
    "conv1d_transpose_output_length",
    "pointwise",
    "relu",
    "add",
    "subtract",
    "scale",
    "multiply",
    "gather_rows",
    "mse",
    "detach",
    "straight_through",
    "topological_order",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "clip_grad_norm",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GeometryError(ValueError):
    """Convolution geometry would produce an empty output."""


class GradientError(RuntimeError):
    """Raised for misuse of backward or the optimizer."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64).

    float64 exists for gradient checking; everything else runs in float32.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    old = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor in the current precision."""
    arr = np.array(data, dtype=_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, False, (), None, op)


# ---------------------------------------------------------------------------
# convolution


def conv1d_output_length(length: int, kernel_size: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - dilation * (kernel_size - 1) - 1) // stride + 1


def conv1d_transpose_output_length(length: int, kernel_size: int, stride: int = 1, padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel_size


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    # xp: [B, C, Tp] (already padded) -> [B, C*K, T_out]
    b, c, _ = xp.shape
    xp = np.ascontiguousarray(xp)
    sb, sc, st = xp.strides
    view = as_strided(xp, shape=(b, c, k, t_out), strides=(sb, sc, st * dilation, st * stride), writeable=False)
    return view.reshape(b, c * k, t_out)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, dilation: int, t_padded: int) -> np.ndarray:
    # adjoint of _im2col: [B, C*K, T_out] -> [B, C, Tp]
    b, _, t_out = cols.shape
    cols = cols.reshape(b, c, k, t_out)
    out = np.zeros((b, c, t_padded), dtype=cols.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        start = j * dilation
        out[:, :, start : start + span : stride] += cols[:, :, j, :]
    return out


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise ShapeError(f"expected [C, T] or [B, C, T] input, got shape {x.shape}")


def _check_conv_args(stride: int, dilation: int, padding: int) -> None:
    if stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(f"invalid geometry stride={stride} dilation={dilation} padding={padding}")


def _pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    if not left and not right:
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + left + right,), dtype=x.dtype)
    out[..., left : left + x.shape[-1]] = x
    return out


def _conv_raw(xb: np.ndarray, w: np.ndarray, stride: int, dilation: int, padding: int, t_out: int):
    """Batched conv on plain arrays; returns (output, im2col matrix)."""
    c_out, c_in, k = w.shape
    if k == 1 and stride == 1 and padding == 0:
        cols = xb
    else:
        cols = _im2col(_pad_time(xb, padding, padding), k, stride, dilation, t_out)
    return np.matmul(w.reshape(c_out, c_in * k), cols), cols


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 1-D cross-correlation.

    ``out[o, j] = bias[o] + sum_{i,k} x[i, j*stride + k*dilation - padding] * kernel[o, i, k]``
    """
    _check_conv_args(stride, dilation, padding)
    xb, squeeze = _batched(x)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be [C_out, C_in, K], got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    b, c, t = xb.shape
    if c != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {c}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    t_out = conv1d_output_length(t, k, stride, dilation, padding)
    if t_out < 1:
        raise GeometryError(f"input length {t} too short for kernel {k} dilation {dilation} padding {padding}")

    out, cols = _conv_raw(xb, kernel.data, stride, dilation, padding, t_out)
    if bias is not None:
        out += bias.data[None, :, None]
    if squeeze:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g: np.ndarray):
        gb = g[None] if squeeze else g
        grads = []
        if not x.requires_grad:
            grads.append(None)
        elif k == 1 and stride == 1 and padding == 0:
            dx = np.matmul(kernel.data[:, :, 0].T, gb)
            grads.append(dx[0] if squeeze else dx)
        elif stride == 1 and dilation * (k - 1) >= padding:
            # full correlation with the flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(kernel.data[:, :, ::-1].transpose(1, 0, 2))
            dx, _ = _conv_raw(gb, flipped, 1, dilation, dilation * (k - 1) - padding, t)
            grads.append(dx[0] if squeeze else dx)
        else:
            dcols = np.matmul(kernel.data.reshape(c_out, c_in * k).T, gb)
            dxp = _col2im(dcols, c_in, k, stride, dilation, t + 2 * padding)
            dx = dxp[:, :, padding : padding + t] if padding else dxp
            grads.append(dx[0] if squeeze else dx)
        grads.append(np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None)
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _result(out, parents, backward_fn, "conv1d")


def conv1d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution; ``kernel`` is ``[C_in, C_out, K]``.

    This is the adjoint of :func:`conv1d` with the same kernel, stride and
    padding, so a stride-``s`` conv followed by a matching transpose restores
    the length.
    """
    _check_conv_args(stride, 1, padding)
    xb, squeeze = _batched(x)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be [C_in, C_out, K], got {kernel.shape}")
    c_in, c_out, k = kernel.shape
    b, c, t = xb.shape
    if c != c_in:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {c}")
    if k < stride:
        raise GeometryError(f"kernel size {k} smaller than stride {stride} leaves gaps")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    t_out = conv1d_transpose_output_length(t, k, stride, padding)
    if t_out < 1:
        raise GeometryError(f"transposed conv output length {t_out} < 1")

    w2 = kernel.data.reshape(c_in, c_out * k)
    cols = np.matmul(w2.T, xb)
    full = _col2im(cols, c_out, k, stride, 1, (t - 1) * stride + k)
    out = full[:, :, padding : padding + t_out]
    if bias is not None:
        out = out + bias.data[None, :, None]
    elif padding:
        out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g: np.ndarray):
        gb = g[None] if squeeze else g
        gcols = _im2col(_pad_time(gb, padding, padding), k, stride, 1, t)
        grads = []
        if x.requires_grad:
            dx = np.matmul(w2, gcols)
            grads.append(dx[0] if squeeze else dx)
        else:
            grads.append(None)
        grads.append(np.matmul(xb, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.requires_grad else None)
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2)) if bias.requires_grad else None)
        return grads

    return _result(out, parents, backward_fn, "conv1d_transpose")


# ---------------------------------------------------------------------------
# pointwise


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))
    return _result(out, (x,), lambda g: [g * (x.data > 0)], "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: [g, g], "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "subtract")
    return _result(a.data - b.data, (a, b), lambda g: [g, -g], "subtract")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: [g * g.dtype.type(c)], "scale")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "multiply")
    return _result(a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data], "multiply")


_POINTWISE = {
    "relu": relu,
    "add": add,
    "subtract": subtract,
    "scale_by_constant": scale,
    "multiply_elementwise": multiply,
}


def pointwise(kind: str, *operands):
    """Dispatch one of the pointwise kinds by name."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(*operands)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """``table[indices]``; the gradient scatters back into the selected rows."""
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def backward_fn(g: np.ndarray):
        dt = np.zeros_like(table.data)
        np.add.at(dt, indices.reshape(-1), g.reshape(-1, table.shape[-1]))
        return [dt]

    return _result(out, (table,), backward_fn, "gather_rows")


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes (channels-first <-> time-major)."""
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _result(out, (x,), lambda g: [np.swapaxes(g, -1, -2)], "transpose")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of ``(a - b)**2`` over every element, as a shape-(1,) tensor."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    value = np.array([np.mean(np.square(diff, dtype=np.float64))], dtype=diff.dtype)

    def backward_fn(g: np.ndarray):
        gd = diff * diff.dtype.type(2.0 * float(g[0]) / n)
        return [gd, -gd]

    return _result(value, (a, b), backward_fn, "mse")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, False, (), None, "detach")


def straight_through(x: Tensor, q: Tensor) -> Tensor:
    """Forward ``q``, backward as identity to ``x``; the same gradient as ``x + detach(q - x)``.

    Built as one op so the forward value is exactly ``q`` rather than
    ``x + (q - x)`` rounded.
    """
    _same_shape(x, q, "straight_through")
    return _result(q.data, (x,), lambda g: [g], "straight_through")


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.  The graph is released
    afterwards.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node.parents = ()
        node.backward_fn = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One Adam update with bias correction, in place on ``params`` and ``state``."""
    if len(params) != len(grads):
        raise GradientError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise GradientError(f"missing gradient for parameter {i} of shape {p.shape}")
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient/state shape mismatch for parameter {i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # eps is applied to the bias-corrected second moment
        denom = np.sqrt(v) / math.sqrt(c2) + state.eps
        p.data = p.data - (state.lr / c1) * m / denom


def clip_grad_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    grads = list(grads)
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= g.dtype.type(factor)
    return total


class Adam:
    """Thin wrapper binding an :class:`AdamState` to a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
