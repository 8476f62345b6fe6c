"""A small dense tensor engine with a reverse-mode gradient tape.

Operations run eagerly on numpy arrays.  While a :class:`Tape` is active
(``with Tape() as tape:``) every op whose inputs require gradients is
appended to it together with its backward rule; :func:`backward` then walks
the tape once in reverse order.  Outside a tape nothing is recorded, so
inference is plain numpy.

Image tensors are ``C x H x W`` or batched ``N x C x H x W``; token tensors
put the feature axis last.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Mapping, Sequence

import numpy as np

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d array that may participate in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one step."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))
        self._produced.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def clear(self):
        self.nodes.clear()
        self._produced.clear()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op and record it if needed.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss is not on this tape (detached graph)")
    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {pg.shape} does not match input {parent.shape}")
                pid = id(parent)
                if tape.produced(parent):
                    prev = grads.get(pid)
                    grads[pid] = pg if prev is None else prev + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    finally:
        tape.clear()


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    a, b = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    return a, b


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    x = a.data
    return make_op(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return make_op(r, (a,), lambda g: (g * 0.5 / r,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return make_op(e, (a,), lambda g: (g * e,))


# -- reductions and shape ----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_op(a.data @ b.data, (a, b), bw)


# -- image ops ---------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ValueError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Output size is ``(H + 2 pad - k) // stride + 1``.
    """
    xd, squeeze = _batched(x)
    n, c, h, wd = xd.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    # floor convention: with stride 2 the trailing pad row/column is unused
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ValueError(f"empty output for input {h}x{wd}, k={k}, s={stride}, p={pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # n, c, ho, wo, k, k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(co, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3)).reshape(b.shape)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            gx = np.ascontiguousarray(gx)
            if squeeze:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return make_op(out, parents, bw)


def up2_nearest(x: Tensor) -> Tensor:
    """Repeat every pixel into a 2x2 block."""
    h, w = x.shape[-2:]
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        lead = g.shape[:-2]
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return make_op(out, (x,), bw)


def resample(x: Tensor, mode: str = "up2_nearest") -> Tensor:
    if mode != "up2_nearest":
        raise ValueError(f"unsupported resample mode {mode!r}; downsample with conv2d(stride=2)")
    return up2_nearest(x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[-3]
    return make_op(np.concatenate([a.data, b.data], axis=-3), (a, b),
                   lambda g: (g[..., :ca, :, :], g[..., ca:, :, :]))


def split_channels(x: Tensor, c1: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_channels` at channel ``c1``."""
    c = x.shape[-3]

    def part(lo, hi):
        def bw(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi, :, :] = g
            return (full,)
        return make_op(x.data[..., lo:hi, :, :].copy(), (x,), bw)

    return part(0, c1), part(c1, c)


# -- normalisation / attention ----------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then ``gamma * . + beta``."""
    xd = x.data
    # shift by the first feature so constant tokens centre to exactly zero
    ref = xd[..., :1]
    mu = ref + np.mean(xd - ref, axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead).reshape(gamma.shape)
        if beta.requires_grad:
            gb = g.sum(axis=lead).reshape(beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (x,), bw)


# -- tensor container --------------------------------------------------------

MAGIC = b"KUNT"
VERSION = 1


class TensorFileError(ValueError):
    """Raised for unreadable or invalid KUNT containers."""


def save_tensors(tensors: Mapping[str, object]) -> bytes:
    """Serialise a name -> tensor map to the KUNT v1 container.

    Payloads are little-endian float32, so round trips are exact at 32-bit
    precision.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, value in tensors.items():
        if not name or not name.isascii():
            raise TensorFileError(f"tensor names must be non-empty ASCII, got {name!r}")
        if name in seen:
            raise TensorFileError(f"duplicate name {name!r}")
        seen.add(name)
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
        raw = name.encode("ascii")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise TensorFileError(f"entry {name!r} exceeds format limits")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Parse a KUNT v1 container into a name -> float32 array dict."""
    buf = bytes(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TensorFileError(f"truncated file at byte {pos} (need {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFileError("bad magic")
    take(4)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("ascii")
        except UnicodeDecodeError:
            raise TensorFileError("non-ASCII tensor name") from None
        if not name:
            raise TensorFileError("empty tensor name")
        if name in out:
            raise TensorFileError(f"duplicate name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise TensorFileError(f"{len(buf) - pos} trailing bytes after last entry")
    return out
