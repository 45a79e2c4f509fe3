"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Feature maps are 4-D ``(N, C, H, W)`` arrays; attention internals use 2-D and
batched 3-D matrices, so the engine itself accepts any shape.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


# Collects the smallest |pre-activation| seen by relu while active; used to
# keep finite-difference probes away from the kink at zero.
_kink_monitor: list = []


@contextlib.contextmanager
def kink_margin():
    """Record the closest distance of any ReLU input to zero inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    box = [np.inf]
    _kink_monitor.append(box)
    try:
        yield box
    finally:
        _kink_monitor.remove(box)


class Tensor:
    """An array that optionally records the operations applied to it."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not on the tape")

        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return index(self, idx)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)


def _topological(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward)


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    if _kink_monitor and a.size:
        m = float(np.min(np.abs(a.data)))
        for box in _kink_monitor:
            box[0] = min(box[0], m)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def activation(x: Tensor, kind) -> Tensor:
    """Apply ``kind`` (``"relu"``, ``"silu"`` or ``"none"``)."""
    kind = getattr(kind, "value", kind)
    if kind == "relu":
        return relu(x)
    if kind == "silu":
        return silu(x)
    if kind in ("none", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
    x = logits.data
    loss = np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))
    return _make(loss, (logits,), lambda g: (g * (_sigmoid(x) - target),))


# -- reductions and layout ----------------------------------------------
def sum_all(a: Tensor) -> Tensor:
    out = np.array(a.data.sum(), dtype=a.dtype).reshape((1,) * max(a.ndim, 1))
    return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    basic = all(isinstance(i, (slice, int)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the channel axis, in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4:
            raise ShapeError(f"part {i} is not 4-D: {p.shape}")
        for axis, label in ((0, "N"), (2, "H"), (3, "W")):
            if p.shape[axis] != ref[axis]:
                raise ShapeError(f"part {i} has {label}={p.shape[axis]}, expected {ref[axis]}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, parts, backward)


def split_channels(x: Tensor, h: int) -> list:
    """Split into ``h`` contiguous, equally wide channel groups."""
    if h < 1 or x.shape[1] % h:
        raise ShapeError(f"cannot split C={x.shape[1]} channels into {h} groups")
    if h == 1:
        return [x]
    d = x.shape[1] // h
    return [index(x, (slice(None), slice(i * d, (i + 1) * d))) for i in range(h)]


# -- resampling ----------------------------------------------------------
def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def downsample_avg2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_avg2x needs even H and W, got H={h}, W={w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),)

    return _make(out, (x,), backward)


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape[-1]} vs {b.shape[-2]}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g * y
        gx -= y * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _make(y, (x,), backward)


def channel_linear(x: Tensor, w: Tensor) -> Tensor:
    """Per-position linear map over channels: ``out[:, j] = sum_i x[:, i] * w[i, j]``."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel_linear: x has C={x.shape[1]}, weight expects {w.shape[0]}")
    out = np.einsum("nchw,cd->ndhw", x.data, w.data, optimize=True)

    def backward(g):
        gx = np.einsum("ndhw,cd->nchw", g, w.data, optimize=True)
        gw = np.einsum("nchw,ndhw->cd", x.data, g, optimize=True)
        return gx, gw

    return _make(out, (x, w), backward)


# -- convolution and normalization --------------------------------------
def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, k, k)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input C={c}, kernel C_in={c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias has shape {bias.shape}, expected ({c_out},)")
    h_out = conv_output_size(h, kh, stride, padding)
    w_out = conv_output_size(w, kw, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be degenerate: H_out={h_out}, W_out={w_out}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i : i + (h_out - 1) * stride + 1 : stride,
                    j : j + (w_out - 1) * stride + 1 : stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, eps: float = 1e-5, training: bool = False,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (N, H, W) normalize the input
    and ``running_mean``/``running_var`` are updated in place.
    """
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data),
                       ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d: {label} has shape {arr.shape}, input has C={c}")
    bshape = (1, c, 1, 1)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        g_beta = g.sum(axis=(0, 2, 3))
        g_hat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * g_hat
                - g_hat.sum(axis=(0, 2, 3), keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = g_hat * inv_std.reshape(bshape)
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), backward)


# -- verification --------------------------------------------------------
def gradcheck(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]], eps: float = 1e-5,
              analytic_scale: float = 1.0) -> float:
    """Compare tape gradients against central differences.

    ``f`` is called with the tensors in ``x`` and must return a single-element
    tensor. Returns the largest ``|a - n| / max(1e-8, |a| + |n|)`` over every
    coordinate of every input. ``analytic_scale`` exists only so callers can
    inject a known fault as a negative control.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    worst = 0.0
    for t in xs:
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad) * analytic_scale
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(*xs).item()
            flat[i] = orig - eps
            f_minus = f(*xs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        t.grad = None
    return worst
