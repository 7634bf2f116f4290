"""Dense-tensor core with tape-based reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float64 by default, float32 allowed for
faster training). Differentiable ops record onto the currently active Tape;
``backward(loss)`` replays the tape in exact reverse execution order and
accumulates gradients into every ``requires_grad`` tensor on the path.

Every op validates that finite inputs produce finite outputs and raises
NonFiniteError otherwise; NaN/Inf never propagate silently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# Toggle for the per-op finite check. On by default; the cost is small next
# to the BLAS calls it guards.
FINITE_CHECKS = True


class NumericsError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(NumericsError):
    pass


class GradientStateError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class Tensor:
    """A dense array plus gradient bookkeeping.

    ``data`` is always a contiguous float32/float64 ndarray. ``grad`` holds the
    accumulated gradient after a backward pass (same shape/dtype as ``data``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """View of the same data with gradient flow cut (the sg(.) operator)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Arithmetic sugar; constants are wrapped without gradient.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager; ops executed inside record themselves when any
    input requires a gradient. A tape can be backpropagated exactly once.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GradientStateError("tape stack corrupted: exited a tape that is not innermost")

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self):
        return tuple(self._entries)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op {op!r} produced non-finite values")


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    """Build the output tensor for an op and record it on the active tape."""
    _check_finite(out_data, op)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape._consumed:
            raise GradientStateError("tape already backpropagated; start a new Tape")
        out.requires_grad = True
        out._tape = tape
        tape._entries.append(_TapeEntry(tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate reverse-mode gradients of a scalar loss into its inputs.

    Walks the recorded tape in exact reverse execution order. Raises if the
    loss is not a recorded scalar, if the tape was already consumed, or if a
    leaf still carries a gradient from an earlier step (stale accumulation
    must be cleared explicitly with ``zero_grad``).
    """
    if loss.size != 1:
        raise GradientStateError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GradientStateError("loss was not produced through recorded ops (no tape)")
    if tape._consumed:
        raise GradientStateError("backward already ran on this tape; reset before reuse")
    tape._consumed = True

    fresh: set[int] = set()
    loss.grad = np.ones_like(loss.data)
    fresh.add(id(loss))

    for entry in reversed(tape._entries):
        out_grad = entry.output.grad
        if out_grad is None:
            continue  # op not on the path to this loss
        grads = entry.backward_fn(out_grad)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:  # pragma: no cover - internal consistency
                raise ShapeError(f"backward produced grad {g.shape} for tensor {t.shape}")
            _check_finite(g, "backward")
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=True)
                fresh.add(id(t))
            else:
                if id(t) not in fresh:
                    raise GradientStateError(
                        "stale gradient: tensor already holds a grad from a previous "
                        "backward pass; call zero_grad before accumulating again"
                    )
                t.grad += g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading dimensions.

    Gradients follow d a = g @ b^T and d b = a^T @ g, with broadcast leading
    axes summed back to each operand's shape.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record("matmul", out, (a, b), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def bw(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record("transpose", out, (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", out, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _record("mean", np.asarray(out), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU nonlinearity, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * d,)

    return _record("gelu", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _record("relu", out, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted exponentials)."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position standardization over the last axis, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - mean_g - xhat * mean_gx)
        return gx, ggain, gbias

    return _record("layer_norm", out, (a, gain, bias), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with an explicit generator; identity at p == 0."""
    if p <= 0.0:
        return a
    if p >= 1.0:
        raise NumericsError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = a.data * keep

    def bw(g):
        return (g * keep,)

    return _record("dropout", out, (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from ``table`` by integer ids; backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, targets: np.ndarray,
                       mask: Optional[np.ndarray] = None,
                       class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over masked positions.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` match the leading
    shape. Optional per-class weights multiply each term; the divisor stays
    the masked-position count, so scaling all weights by c scales the loss
    by c exactly.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets shape {np.asarray(targets).shape} does not match logits {logits.shape}")
    if mask is None:
        m = np.ones(flat.shape[0], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise NumericsError("no supervised positions (empty mask)")
    tm = t[m]
    if tm.min() < 0 or tm.max() >= v:
        raise NumericsError(f"target class out of range [0, {v})")
    # unmasked targets may carry sentinel ids (e.g. PAD); gather on a safe copy
    t_safe = np.where(m, t, 0)

    mx = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - mx)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    logp = (flat - mx) - np.log(z)
    picked = logp[np.arange(flat.shape[0]), t_safe]
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=flat.dtype)[t_safe]
    else:
        w = np.ones_like(picked)
    loss = -(w * picked * m).sum() / n

    def bw(g):
        onehot = np.zeros_like(flat)
        onehot[np.arange(flat.shape[0]), t_safe] = 1.0
        gl = (probs - onehot) * (w * m / n)[:, None]
        return (np.asarray(g).reshape(()) * gl.reshape(logits.shape),)

    return _record("cross_entropy", np.asarray(loss), (logits,), bw)


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0,
               mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean Huber penalty over selected elements.

    ``mask`` may match ``pred.shape`` (per element) or ``pred.shape[:-1]``
    (per row, e.g. per spectrogram frame); None selects everything.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"huber_loss shapes differ: {pred.shape} vs {target.shape}")
    if mask is None:
        m = np.ones(pred.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape == pred.shape[:-1]:
            m = np.broadcast_to(m[..., None], pred.shape)
        elif m.shape != pred.shape:
            raise ShapeError(f"huber mask shape {m.shape} incompatible with {pred.shape}")
    n = int(m.sum())
    if n == 0:
        raise NumericsError("no supervised positions (empty mask)")
    r = pred.data - target.data
    a = np.abs(r)
    quad = a <= delta
    elem = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    loss = (elem * m).sum() / n

    def bw(g):
        dr = np.where(quad, r, delta * np.sign(r)) * m / n
        gs = np.asarray(g).reshape(())
        return gs * dr, -gs * dr

    return _record("huber", np.asarray(loss), (pred, target), bw)


# ---------------------------------------------------------------------------
# 1-D convolutions (NCL layout)
# ---------------------------------------------------------------------------

def _conv_cols(xp: np.ndarray, k: int, stride: int, l_out: int) -> np.ndarray:
    """Gather (B, C, K, L_out) patches from a padded (B, C, L) signal."""
    b, c, _ = xp.shape
    sb, sc, sl = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, k, l_out), strides=(sb, sc, sl, sl * stride), writeable=False
    )
    return view


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """Strided cross-correlation: x (B, Cin, L), w (Cout, Cin, K) -> (B, Cout, Lout)."""
    bsz, cin, ln = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs weight {w.shape}")
    l_out = (ln + 2 * pad - k) // stride + 1
    if l_out < 1:
        raise ShapeError(f"conv1d input length {ln} too short for kernel {k} stride {stride}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = _conv_cols(xp, k, stride, l_out)
    out = np.tensordot(w.data, cols, axes=([1, 2], [1, 2])).transpose(1, 0, 2)
    if b is not None:
        out = out + b.data[None, :, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        # g: (B, Cout, Lout)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 3]))  # (Cout, Cin, K)
        gcols = np.tensordot(w.data, g, axes=(0, 1))        # (Cin, K, B, Lout)
        gxp = np.zeros_like(xp)
        for kk in range(k):
            gxp[:, :, kk:kk + stride * l_out:stride] += gcols[:, kk].transpose(1, 0, 2)
        gx = gxp[:, :, pad:pad + ln] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _record("conv1d", np.ascontiguousarray(out), inputs, bw)


def conv1d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor],
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed conv (adjoint of conv1d): x (B, Cin, L), w (Cin, Cout, K)."""
    bsz, cin, ln = x.shape
    cin_w, cout, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d_transpose channel mismatch: input {x.shape} vs weight {w.shape}")
    l_full = (ln - 1) * stride + k
    l_out = l_full - 2 * pad
    if l_out < 1:
        raise ShapeError("conv1d_transpose output would be empty")
    cols = np.tensordot(w.data, x.data, axes=(0, 1))  # (Cout, K, B, L)
    full = np.zeros((bsz, cout, l_full), dtype=x.data.dtype)
    for kk in range(k):
        full[:, :, kk:kk + stride * ln:stride] += cols[:, kk].transpose(1, 0, 2)
    out = full[:, :, pad:pad + l_out]
    if b is not None:
        out = out + b.data[None, :, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad))) if pad else g
        gcols = _conv_cols(gp, k, stride, ln)                    # (B, Cout, K, L)
        gx = np.tensordot(gcols, w.data, axes=([1, 2], [1, 2])).transpose(0, 2, 1)
        gw = np.tensordot(x.data, gcols, axes=([0, 2], [0, 3]))  # (Cin, Cout, K)
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2))

    return _record("conv1d_transpose", np.ascontiguousarray(out), inputs, bw)
