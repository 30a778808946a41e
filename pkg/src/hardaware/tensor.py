"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors are row-major contiguous float64 arrays. Every differentiable
operation records its parents and a backward closure on the output tensor;
``Tensor.backward`` replays those closures in reverse creation order, which
is a valid topological order because an operation's output is always created
after its inputs. Operations copy rather than alias (no views/strides in
this engine), and there is no general broadcasting: shapes must match
exactly except for the specific bias/scalar cases each op documents.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax

from .errors import ConfigError, OracleError, ShapeError

Array = np.ndarray

_node_ids = itertools.count()
_grad_state = threading.local()

PROB_EPS = 1e-12  # probabilities clamped to [PROB_EPS, 1 - PROB_EPS] before any log


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    """A dense value node. ``grad`` is populated by ``backward``."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[Array], None] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.node_id = next(_node_ids)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Visits reachable nodes in reverse creation order exactly once and
        accumulates gradients into every tensor with ``requires_grad``.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        order = toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node.backward_fn is not None:
                node.backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Convenience arithmetic (tensor-tensor forms require identical shapes).
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)


def toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, in the order backward visits them
    (reverse creation order restricted to the reachable subgraph)."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n.node_id, reverse=True)
    return nodes


def _accumulate(t: Tensor, g: Array) -> None:
    if t.requires_grad:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _make(data: Array, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result; record the graph edge only when gradients can flow."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _make(a.data + b.data, (a, b), None, "add")

    def backward(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    out.backward_fn = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None, "sub")

    def backward(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    out.backward_fn = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None, "mul")

    def backward(g: Array) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out.backward_fn = backward if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = _make(a.data / b.data, (a, b), None, "div")

    def backward(g: Array) -> None:
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    out.backward_fn = backward if out.requires_grad else None
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data * s, (a,), None, "scale")

    def backward(g: Array) -> None:
        _accumulate(a, g * s)

    out.backward_fn = backward if out.requires_grad else None
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data + s, (a,), None, "add_scalar")

    def backward(g: Array) -> None:
        _accumulate(a, g)

    out.backward_fn = backward if out.requires_grad else None
    return out


def mul_const(a: Tensor, c: Array) -> Tensor:
    """Elementwise product with a constant array (no gradient through ``c``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    out = _make(a.data * c, (a,), None, "mul_const")

    def backward(g: Array) -> None:
        _accumulate(a, g * c)

    out.backward_fn = backward if out.requires_grad else None
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a**p`` for a scalar exponent; base assumed >= 0 for fractional p."""
    p = float(p)
    out = _make(np.power(a.data, p), (a,), None, "pow")

    def backward(g: Array) -> None:
        if p < 1.0:
            # subgradient 0 at base 0 instead of the divergent p*a^(p-1)
            local = np.where(a.data > 0.0, p * np.power(np.maximum(a.data, PROB_EPS), p - 1.0), 0.0)
        else:
            local = p * np.power(a.data, p - 1.0)
        _accumulate(a, g * local)

    out.backward_fn = backward if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped to at least PROB_EPS."""
    clamped = np.maximum(a.data, PROB_EPS)
    out = _make(np.log(clamped), (a,), None, "log")

    def backward(g: Array) -> None:
        _accumulate(a, g / clamped)

    out.backward_fn = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    data = np.exp(np.minimum(a.data, 700.0))
    out = _make(data, (a,), None, "exp")

    def backward(g: Array) -> None:
        _accumulate(a, g * data)

    out.backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,), None, "relu")

    def backward(g: Array) -> None:
        _accumulate(a, g * (a.data > 0.0))

    out.backward_fn = backward if out.requires_grad else None
    return out


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    out = _make(np.where(a.data > 0.0, a.data, alpha * a.data), (a,), None, "leaky_relu")

    def backward(g: Array) -> None:
        _accumulate(a, g * np.where(a.data > 0.0, 1.0, alpha))

    out.backward_fn = backward if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)  # branch form, stable for large |x|
    out = _make(s, (a,), None, "sigmoid")

    def backward(g: Array) -> None:
        _accumulate(a, g * s * (1.0 - s))

    out.backward_fn = backward if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = _make(t, (a,), None, "tanh")

    def backward(g: Array) -> None:
        _accumulate(a, g * (1.0 - t * t))

    out.backward_fn = backward if out.requires_grad else None
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) computed as logaddexp(0, x), exact for large |x|."""
    out = _make(np.logaddexp(0.0, a.data), (a,), None, "softplus")

    def backward(g: Array) -> None:
        _accumulate(a, g * expit(a.data))

    out.backward_fn = backward if out.requires_grad else None
    return out


def activation(a: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Dispatch on activation name: relu | leaky_relu | sigmoid | tanh."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor) -> Tensor:
    out = _make(np.array(a.data.sum()), (a,), None, "sum")

    def backward(g: Array) -> None:
        _accumulate(a, np.full_like(a.data, float(g)))

    out.backward_fn = backward if out.requires_grad else None
    return out


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = _make(np.array(a.data.mean()), (a,), None, "mean")

    def backward(g: Array) -> None:
        _accumulate(a, np.full_like(a.data, float(g) / n))

    out.backward_fn = backward if out.requires_grad else None
    return out


def weighted_sum(a: Tensor, w: Array) -> Tensor:
    """Scalar sum(a * w) with ``w`` a constant array of the same shape.

    The workhorse of the weighted losses: weights never receive gradients.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: shapes {a.shape} and {w.shape} differ")
    out = _make(np.array(np.sum(a.data * w)), (a,), None, "weighted_sum")

    def backward(g: Array) -> None:
        _accumulate(a, float(g) * w)

    out.backward_fn = backward if out.requires_grad else None
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    out = _make(data.copy(), (a,), None, "reshape")

    def backward(g: Array) -> None:
        _accumulate(a, g.reshape(a.shape))

    out.backward_fn = backward if out.requires_grad else None
    return out


def flatten(a: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(rest))."""
    if a.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty sequence")
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shape {tuple(other)} incompatible with {tuple(base)} on axis {axis}")
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    out = _make(data, tuple(xs), None, "concat")

    def backward(g: Array) -> None:
        start = 0
        for x, n in zip(xs, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accumulate(x, g[tuple(sl)])
            start += n

    out.backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None, "matmul")

    def backward(g: Array) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    out.backward_fn = backward if out.requires_grad else None
    return out


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: (M, N) + (N,), or (B, C, H, W) + (C,)."""
    if x.ndim == 2 and b.shape == (x.shape[1],):
        data = x.data + b.data
        reduce_axes: tuple[int, ...] = (0,)
        bshape = b.shape
    elif x.ndim == 4 and b.shape == (x.shape[1],):
        data = x.data + b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
        bshape = b.shape
    else:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit input {x.shape}")
    out = _make(data, (x, b), None, "bias_add")

    def backward(g: Array) -> None:
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=reduce_axes).reshape(bshape))

    out.backward_fn = backward if out.requires_grad else None
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return bias_add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# convolutions (cross-correlation convention, im2col-backed)
# ---------------------------------------------------------------------------

def _im2col(xp: Array, h: int, w: int, stride: int) -> tuple[Array, int, int]:
    B, C, Hp, Wp = xp.shape
    win = sliding_window_view(xp, (h, w), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * h * w, OH * OW)
    return np.ascontiguousarray(cols), OH, OW


def _col2im(cols: Array, x_shape: tuple[int, ...], h: int, w: int, stride: int, padding: int) -> Array:
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    OH = (Hp - h) // stride + 1
    OW = (Wp - w) // stride + 1
    xp = np.zeros((B, C, Hp, Wp))
    cols6 = cols.reshape(B, C, h, w, OH, OW)
    for i in range(h):
        for j in range(w):
            xp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += cols6[:, :, i, j]
    if padding:
        return xp[:, :, padding : padding + H, padding : padding + W].copy()
    return xp


def _pad2d(x: Array, p: int) -> Array:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _check_conv_args(x: Tensor, k: Tensor, stride: int, padding: int, op: str) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"{op} expects 4-D input and kernel, got {x.shape} and {k.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"{op}: stride must be >= 1 and padding >= 0")


def _conv_dkernel(x_padded: Array, grad_mat: Array, h: int, w: int, stride: int) -> Array:
    """Kernel gradient of a conv: grad_mat is (B, F, OH*OW) on the output side."""
    cols, _, _ = _im2col(x_padded, h, w, stride)
    return np.matmul(grad_mat, cols.transpose(0, 2, 1)).sum(axis=0)  # (F, C*h*w)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W), k: (F, C, h, w) -> (B, F, OH, OW)."""
    _check_conv_args(x, k, stride, padding, "conv2d")
    B, C, H, W = x.shape
    F, Ck, h, w = k.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck} ({x.shape} vs {k.shape})")
    if h > H + 2 * padding or w > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k.shape} larger than padded input {x.shape} (padding={padding})")
    xp = _pad2d(x.data, padding)
    cols, OH, OW = _im2col(xp, h, w, stride)
    out_mat = np.matmul(k.data.reshape(F, -1), cols)  # (B, F, OH*OW)
    data = out_mat.reshape(B, F, OH, OW)
    if bias is not None:
        if bias.shape != (F,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not fit {F} filters")
        data = data + bias.data[None, :, None, None]
    parents = (x, k) if bias is None else (x, k, bias)
    out = _make(data, parents, None, "conv2d")

    def backward(g: Array) -> None:
        g_mat = g.reshape(B, F, OH * OW)
        if k.requires_grad:
            dk = _conv_dkernel(_pad2d(x.data, padding), g_mat, h, w, stride)
            _accumulate(k, dk.reshape(k.shape))
        if x.requires_grad or x.parents:
            dcols = np.matmul(k.data.reshape(F, -1).T, g_mat)  # (B, C*h*w, OH*OW)
            _accumulate(x, _col2im(dcols, x.shape, h, w, stride, padding))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    out.backward_fn = backward if out.requires_grad else None
    return out


def conv2d_transposed(
    x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d as a forward op.

    x: (B, C_in, H, W), k: (C_in, C_out, h, w) -> (B, C_out, (H-1)*stride - 2*padding + h, ...).
    Satisfies <conv2d(u, k), x> == <u, conv2d_transposed(x, k)>.
    """
    _check_conv_args(x, k, stride, padding, "conv2d_transposed")
    B, Cin, H, W = x.shape
    Ck, Cout, h, w = k.shape
    if Ck != Cin:
        raise ShapeError(
            f"conv2d_transposed: input has {Cin} channels but kernel expects {Ck} ({x.shape} vs {k.shape})"
        )
    out_h = (H - 1) * stride - 2 * padding + h
    out_w = (W - 1) * stride - 2 * padding + w
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_transposed: output {out_h}x{out_w} collapsed for input {x.shape}")
    k_mat = k.data.reshape(Cin, Cout * h * w)
    x_mat = x.data.reshape(B, Cin, H * W)
    cols = np.matmul(k_mat.T, x_mat)  # (B, Cout*h*w, H*W)
    data = _col2im(cols, (B, Cout, out_h, out_w), h, w, stride, padding)
    if bias is not None:
        if bias.shape != (Cout,):
            raise ShapeError(f"conv2d_transposed: bias {bias.shape} does not fit {Cout} channels")
        data = data + bias.data[None, :, None, None]
    parents = (x, k) if bias is None else (x, k, bias)
    out = _make(data, parents, None, "conv2d_transposed")

    def backward(g: Array) -> None:
        gp = _pad2d(g, padding)
        if x.requires_grad or x.parents:
            # adjoint of the adjoint: a plain conv of g with the same kernel
            gcols, OH2, OW2 = _im2col(gp, h, w, stride)
            dx_mat = np.matmul(k_mat, gcols)  # (B, Cin, H*W)
            _accumulate(x, dx_mat.reshape(B, Cin, H, W))
        if k.requires_grad:
            # same bilinear form as conv2d's kernel grad with roles swapped
            dk = _conv_dkernel(gp, x_mat, h, w, stride)  # (Cin, Cout*h*w)
            _accumulate(k, dk.reshape(k.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    out.backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# normalization, pooling, dropout
# ---------------------------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by batch statistics and folds them into the running
    buffers in place (new = (1 - momentum) * old + momentum * batch); eval
    mode uses the running buffers. Backward implements the full
    batch-statistics gradient.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},)")
    if training:
        if B < 2:
            raise ConfigError("batchnorm2d: train mode requires batch size >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _make(data, (x, gamma, beta), None, "batchnorm2d")

    def backward(g: Array) -> None:
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x.parents:
            gs = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
            if training:
                g_mean = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gx_mean = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                _accumulate(x, gs * (g - g_mean - xhat * gx_mean))
            else:
                _accumulate(x, gs * g)

    out.backward_fn = backward if out.requires_grad else None
    return out


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avgpool2d: spatial dims {H}x{W} not divisible by {k}")
    data = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    out = _make(data, (x,), None, "avgpool2d")

    def backward(g: Array) -> None:
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accumulate(x, up)

    out.backward_fn = backward if out.requires_grad else None
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) by averaging the spatial map."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    data = x.data.mean(axis=(2, 3))
    out = _make(data, (x,), None, "global_avgpool")

    def backward(g: Array) -> None:
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    out.backward_fn = backward if out.requires_grad else None
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: train scales kept units by 1/(1-p); eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out = _make(x.data.copy(), (x,), None, "dropout")

        def backward_id(g: Array) -> None:
            _accumulate(x, g)

        out.backward_fn = backward_id if out.requires_grad else None
        return out
    if rng is None:
        raise ConfigError("dropout in train mode requires an explicit rng for determinism")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = _make(x.data * mask, (x,), None, "dropout")

    def backward(g: Array) -> None:
        _accumulate(x, g * mask)

    out.backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# fused log-loss primitives (stable log-sum-exp / softplus forms)
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels: Array) -> Tensor:
    """Per-node -log P(target) for binary labels, from logits.

    Equals softplus(x) - x*y elementwise, which is softplus(-x) for y=1 and
    softplus(x) for y=0; never forms the probability before the log.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: labels {y.shape} do not match logits {logits.shape}")
    data = np.logaddexp(0.0, logits.data) - logits.data * y
    out = _make(data, (logits,), None, "bce_with_logits")

    def backward(g: Array) -> None:
        _accumulate(logits, g * (expit(logits.data) - y))

    out.backward_fn = backward if out.requires_grad else None
    return out


def softmax_cross_entropy(logits: Tensor, targets: Array) -> Tensor:
    """Per-sample -log softmax(logits)[target]; (M, C) logits -> (M,) losses."""
    t = np.asarray(targets)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    logp = log_softmax(logits.data, axis=1)
    rows = np.arange(logits.shape[0])
    data = -logp[rows, t]
    out = _make(data, (logits,), None, "softmax_ce")

    def backward(g: Array) -> None:
        soft = np.exp(logp)
        soft[rows, t] -= 1.0
        _accumulate(logits, soft * g[:, None])

    out.backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# gradient checking oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_dev: float
    tol: float
    worst: str
    checks: int

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_dev={self.max_rel_dev:.3e} (tol={self.tol:.1e}, worst={self.worst}, checks={self.checks})"


def grad_check(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_checks_per_param: int = 25,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the same scalar loss from the current
    parameter data on every call (deterministic under a fixed seed). Large
    parameters are probed at a seeded random subset of elements.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = list(params)
    rng = rng or np.random.default_rng(0)

    loss = build_loss()
    if loss.size != 1:
        raise OracleError(f"grad_check: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise OracleError("grad_check: non-finite loss")
    for _, p in named:
        p.zero_grad()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    max_dev = 0.0
    worst = ""
    checks = 0
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_checks_per_param else rng.choice(n, size=max_checks_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + eps
            with no_grad():
                f_plus = build_loss().item()
            flat[idx] = orig - eps
            with no_grad():
                f_minus = build_loss().item()
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise OracleError(f"grad_check: non-finite loss while probing {name}[{idx}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[idx]
            dev = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            checks += 1
            if dev > max_dev:
                max_dev = dev
                worst = f"{name}[{int(idx)}]"
    return GradCheckReport(passed=max_dev < tol, max_rel_dev=max_dev, tol=tol, worst=worst, checks=checks)
