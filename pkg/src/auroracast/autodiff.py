"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray; each operation computes its forward value and,
when given a Tape, appends a backward closure. Tape.backward replays the
closures in exact reverse execution order, accumulating gradients into
every tensor on the path from parameters to the loss. The operation set
is deliberately small: exactly what the bundled architectures need.

Training runs in float32; tests build float64 graphs so central finite
differences resolve gradients to ~1e-10. Inputs to an op must share one
float dtype; outputs keep it. Calling an op without a tape is inference:
same forward value, nothing recorded.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """An ndarray with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensors are at most 4-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations for one forward pass.

    A tape is single-use: backward() consumes it. Independent tapes may
    run concurrently; a tape itself is single-threaded.
    """

    def __init__(self):
        self._backward_fns: list[Callable[[], None]] = []
        self._outputs: set[int] = set()
        self._spent = False

    def record(self, out: Tensor, backward_fn: Callable[[], None]):
        self._backward_fns.append(backward_fn)
        self._outputs.add(id(out))

    def backward(self, loss: Tensor):
        """Populate .grad on every tensor the scalar loss depends on."""
        if self._spent:
            raise RuntimeError("tape already consumed; re-run the forward pass")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ValueError("loss is not an output of this tape (detached graph)")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._backward_fns):
            fn()


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_dtypes(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes: {sorted(map(str, dtypes))}")


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ── Dense / elementwise ───────────────────────────────────────────────

def dense(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """y = x @ w + b for x [n, d_in], w [d_in, d_out], b [d_out]."""
    _check_dtypes(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x [n,di], w [di,do], b [do]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dy = out.grad
            _accumulate(w, x.data.T @ dy)
            _accumulate(b, dy.sum(axis=0))
            _accumulate(x, dy @ w.data.T)

        tape.record(out, backward)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))

    if tape is not None:
        gate = x.data > 0

        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * gate)

        tape.record(out, backward)
    return out


def dropout(
    x: Tensor,
    rate: float,
    training: bool,
    rng: np.random.Generator | int | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng or seed")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * keep * scale)

        tape.record(out, backward)
    return out


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row softmax of logits [n, k], max-subtracted for stability."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ValueError("softmax expects [n, k] with k >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dy = out.grad
            inner = (dy * p).sum(axis=1, keepdims=True)
            _accumulate(x, p * (dy - inner))

        tape.record(out, backward)
    return out


def reshape(x: Tensor, shape, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad.reshape(x.shape))

        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)

        tape.record(out, backward)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data * c)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad * c)

        tape.record(out, backward)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.array(x.data.sum(), dtype=x.data.dtype))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, np.broadcast_to(out.grad, x.shape).astype(x.data.dtype))

        tape.record(out, backward)
    return out


def add_channel_bias(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x [n, c, h, w] plus a per-channel bias b [c]."""
    _check_dtypes(x, b)
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ValueError("add_channel_bias expects x [n,c,h,w], b [c]")
    out = Tensor(x.data + b.data[None, :, None, None])

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(b, out.grad.sum(axis=(0, 2, 3)))
            _accumulate(x, out.grad)

        tape.record(out, backward)
    return out


# ── Padding ───────────────────────────────────────────────────────────

def pad_periodic_mlt(x: Tensor, overlap: int, tape: Tape | None = None) -> Tensor:
    """Wrap the width (MLT) axis only: copy the last columns to the left
    edge and the first columns to the right edge."""
    w = x.shape[-1]
    if overlap >= w:
        raise ValueError(f"overlap {overlap} must be smaller than width {w}")
    if overlap < 0:
        raise ValueError("overlap must be non-negative")
    if overlap == 0:
        return x
    out = Tensor(np.concatenate([x.data[..., -overlap:], x.data, x.data[..., :overlap]], axis=-1))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dy = out.grad
            dx = dy[..., overlap : overlap + w].copy()
            dx[..., :overlap] += dy[..., w + overlap :]
            dx[..., -overlap:] += dy[..., :overlap]
            _accumulate(x, dx)

        tape.record(out, backward)
    return out


def pad_zero_lat(x: Tensor, pad: int, tape: Tape | None = None) -> Tensor:
    """Zero-pad the height (latitude) axis of x [n, c, h, w] on both sides."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return x
    if x.data.ndim != 4:
        raise ValueError("pad_zero_lat expects a 4-D tensor")
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0))))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            _accumulate(x, out.grad[:, :, pad:-pad, :])

        tape.record(out, backward)
    return out


# ── Convolutions ──────────────────────────────────────────────────────

def _corr2d(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of a [n, c_in, h, w] with k [c_out, c_in, kh, kw]."""
    win = sliding_window_view(a, (k.shape[2], k.shape[3]), axis=(2, 3))
    y = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(y, 3, 1))


def conv2d(x: Tensor, k: Tensor, tape: Tape | None = None) -> Tensor:
    """Valid cross-correlation; x [n, c_in, h, w], k [c_out, c_in, kh, kw]."""
    _check_dtypes(x, k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, ci, h, w = x.shape
    co, ci2, kh, kw = k.shape
    if ci != ci2:
        raise ValueError(f"conv2d channel mismatch: {ci} vs {ci2}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    out = Tensor(_corr2d(x.data, k.data))

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dy = out.grad
            win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
            dk = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(k, dk)
            dy_pad = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            k_rot = k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, _corr2d(dy_pad, k_rot))

        tape.record(out, backward)
    return out


def conv2d_transpose(x: Tensor, k: Tensor, stride, tape: Tape | None = None) -> Tensor:
    """Fractionally-strided convolution with exact stride-multiple output.

    x [n, c_in, h, w], k [c_in, c_out, kh, kw], output [n, c_out, h*s, w*s].
    Requires kernel >= stride per axis; the full scatter output is cropped
    by (k - s) // 2 leading rows/columns, matching the usual 'same' sizing.
    """
    _check_dtypes(x, k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d_transpose expects 4-D input and kernel")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    n, ci, h, w = x.shape
    ci2, co, kh, kw = k.shape
    if ci != ci2:
        raise ValueError(f"conv2d_transpose channel mismatch: {ci} vs {ci2}")
    if kh < sh or kw < sw:
        raise ValueError("kernel must be at least as large as stride")
    full_h = (h - 1) * sh + kh
    full_w = (w - 1) * sw + kw
    out_h, out_w = h * sh, w * sw
    top = (kh - sh) // 2
    left = (kw - sw) // 2

    prod = np.einsum("ncij,coab->noijab", x.data, k.data, optimize=True)
    full = np.zeros((n, co, full_h, full_w), dtype=x.data.dtype)
    for a in range(kh):
        for b in range(kw):
            full[:, :, a : a + (h - 1) * sh + 1 : sh, b : b + (w - 1) * sw + 1 : sw] += prod[
                :, :, :, :, a, b
            ]
    out = Tensor(full[:, :, top : top + out_h, left : left + out_w])

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            dfull = np.zeros((n, co, full_h, full_w), dtype=x.data.dtype)
            dfull[:, :, top : top + out_h, left : left + out_w] = out.grad
            win = sliding_window_view(dfull, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
            dx = np.tensordot(win, k.data, axes=([1, 4, 5], [1, 2, 3]))
            _accumulate(x, np.ascontiguousarray(np.moveaxis(dx, 3, 1)))
            dk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(k, dk)

        tape.record(out, backward)
    return out
