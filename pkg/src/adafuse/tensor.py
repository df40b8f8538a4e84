"""Dense tensors with reverse-mode automatic differentiation.

Every numeric primitive the models need lives here: matmul, broadcast
elementwise arithmetic, layer norm, softmax/log-softmax, GELU, dropout,
drop-path, reductions, shape ops, overlapping patch extraction and
bilinear upsampling. Executed primitives are recorded on a global
:class:`Tape` in execution order; ``backward`` sweeps that record in
reverse, so gradient accumulation order is fixed by forward order and
runs are bit-stable.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Node:
    """One executed primitive: its inputs, output and gradient rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of primitive operations.

    Reverse iteration visits each node exactly once, which is the
    traversal ``backward`` uses. Clear it between training steps to
    release intermediate buffers.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self._nodes.append(node)

    def clear(self) -> None:
        self._nodes.clear()

    def __len__(self) -> int:
        return len(self._nodes)


_TAPE = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense row-major n-d value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None

    # -- introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _make(out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result; record a node iff gradients can flow."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = Node(tuple(inputs), out, backward_fn)
        out._node = node
        _TAPE.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad ancestor of ``loss``.

    Repeated calls (without zeroing) accumulate one gradient's worth per
    call. The reverse sweep follows tape order, so accumulation order is
    deterministic for a fixed forward order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Mark ancestors so unrelated tape entries are skipped.
    marked: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()._node
        if node is not None and id(node) not in marked:
            marked.add(id(node))
            stack.extend(node.inputs)

    # Per-call contribution buffers; deposited into .grad exactly once.
    contrib: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    def deposit(t: Tensor, g: np.ndarray) -> None:
        t.grad = g if t.grad is None else t.grad + g

    for node in reversed(_TAPE._nodes):
        if id(node) not in marked:
            continue
        g_out = contrib.pop(id(node.output), None)
        if g_out is None:
            continue
        holders.pop(id(node.output), None)
        deposit(node.output, g_out)
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in contrib:
                contrib[key] = contrib[key] + g
            else:
                contrib[key] = g
                holders[key] = t
    for key, g in contrib.items():
        deposit(holders[key], g)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------

def _broadcast_op(a: Tensor, b, fn, da, db, name: str) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        return (_unbroadcast(da(g, a.data, b.data), a.shape),
                _unbroadcast(db(g, a.data, b.data), b.shape))

    return _make(out, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    """Pointwise sum; ``b`` may be a scalar or broadcast bias."""
    return _broadcast_op(a, b, np.add,
                         lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: Tensor, b) -> Tensor:
    return _broadcast_op(a, b, np.subtract,
                         lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: Tensor, b) -> Tensor:
    """Pointwise product; covers scaling by a python scalar."""
    return _broadcast_op(a, b, np.multiply,
                         lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def texp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def tlog(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _make(out, (x,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), "
            f"got gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dbeta = g.sum(axis=lead)
        dgamma = (g * xhat).sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------
# stochastic regularizers
# ---------------------------------------------------------------------

def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero elements w.p. ``p`` and rescale survivors; identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p)
    scale = keep.astype(x.dtype) / (1.0 - p)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def drop_path(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero the whole residual branch per leading-axis element w.p. ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in train mode needs a seeded generator")
    keep = (rng.random(x.shape[0]) >= p).astype(x.dtype) / (1.0 - p)
    scale = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    elif isinstance(axis, int):
        n = x.shape[axis]
    else:
        n = int(np.prod([x.shape[a] for a in axis]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    split_at = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, split_at, axis=axis))

    return _make(out, parts, bwd)


# ---------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------

def extract_patches(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Im2col for overlapping strided patches.

    ``x`` is [B, C, H, W]; output is [B, N, C*kernel*kernel] with
    N = out_h * out_w patches in row-major spatial order.
    """
    if x.ndim != 4:
        raise ShapeError(f"extract_patches expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    out_h = (h + 2 * pad - kernel) // stride + 1
    out_w = (w + 2 * pad - kernel) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"extract_patches: spatial dims {h}x{w} too small for "
            f"kernel={kernel} stride={stride} pad={pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # [B, C, out_h, out_w, k, k]
    out = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * kernel * kernel)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gw = g.reshape(b, out_h, out_w, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        gp = np.zeros_like(xp)
        for ki in range(kernel):
            for kj in range(kernel):
                gp[:, :, ki:ki + out_h * stride:stride,
                   kj:kj + out_w * stride:stride] += gw[..., ki, kj]
        if pad:
            gp = gp[:, :, pad:pad + h, pad:pad + w]
        return (np.ascontiguousarray(gp),)

    return _make(out, (x,), bwd)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for align_corners=False bilinear."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear upsample (align_corners=False) of [..., C, H, W] maps."""
    if x.ndim < 3:
        raise ShapeError(f"upsample_bilinear expects [..., C, H, W], got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample_bilinear cannot downscale {h}x{w} -> {out_h}x{out_w}")
    rows = _interp_matrix(out_h, h, x.dtype)
    cols = _interp_matrix(out_w, w, x.dtype)
    out = np.einsum("ih,...hw,jw->...ij", rows, x.data, cols, optimize=True)

    def bwd(g):
        return (np.einsum("ih,...ij,jw->...hw", rows, g, cols, optimize=True),)

    return _make(out, (x,), bwd)
