"""Dense tensors with a reverse-mode tape.

Operations executed inside a ``with Tape() as tape:`` block are recorded when
at least one input requires a gradient. ``backward(loss, tape)`` replays the
records in reverse order. Outside a tape nothing is recorded, which is how
inference and finite-difference evaluation run.

Feature-map ops accept ``[C, H, W]`` or a batched ``[N, C, H, W]`` layout;
the channel axis is always ``-3``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / float(other))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered log of differentiable operations."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn, op: str) -> None:
        self.records.append(_Record(out, tuple(inputs), backward_fn, op))


_ACTIVE: list[Tape] = []


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, op)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every grad-requiring tensor recorded on ``tape``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise RuntimeError("no tape given and none active")
    for rec in tape.records:
        rec.out.grad = np.zeros_like(rec.out.data)
        for t in rec.inputs:
            if t.requires_grad:
                t.grad = np.zeros_like(t.data)
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        grads = rec.backward_fn(rec.out.grad)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            t.grad += g


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h, w, kh, kw, stride, pad, dilation):
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    return ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded, dilated cross-correlation (no kernel flip)."""
    if stride < 1 or dilation < 1 or pad < 0:
        raise GeometryError(f"bad conv params stride={stride} pad={pad} dilation={dilation}")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W]/[N,C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise GeometryError(f"output would be {ho}x{wo}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    # patches laid out as [N, C*kH*kW, Ho*Wo] so the product lands directly in NCHW
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    w2 = kernel.data.reshape(co, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    if unbatched:
        out = out[0]

    def _backward(g):
        g3 = (g[None] if unbatched else g).reshape(n, co, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i * dilation
                for j in range(kw):
                    wj = j * dilation
                    gxp[:, :, hi : hi + (ho - 1) * stride + 1 : stride, wj : wj + (wo - 1) * stride + 1 : stride] += (
                        dcols[:, :, i, j]
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            if unbatched:
                gx = gx[0]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, _backward, "conv2d")


# ---------------------------------------------------------------------------
# elementwise

# Piecewise ops push their branch masks here while grad_check is probing.
_KINK_PROBE: list | None = None


def _probe(mask: np.ndarray) -> None:
    if _KINK_PROBE is not None:
        _KINK_PROBE.append(mask)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep strictly interior even when float rounding saturates
    lo = np.finfo(z.dtype).tiny
    hi = np.nextafter(z.dtype.type(1), z.dtype.type(0))
    return np.clip(out, lo, hi)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise ``relu``, ``leaky_relu`` (with ``slope``) or ``sigmoid``."""
    z = x.data
    if kind == "relu":
        mask = z > 0
        _probe(mask)
        out = np.where(mask, z, z.dtype.type(0))
        return _emit(out, (x,), lambda g: (g * mask,), "relu")
    if kind == "leaky_relu":
        s = z.dtype.type(slope)
        mask = z > 0
        _probe(mask)
        out = np.where(mask, z, z * s)
        return _emit(out, (x,), lambda g: (np.where(mask, g, g * s),), "leaky_relu")
    if kind == "sigmoid":
        out = _sigmoid(z)
        return _emit(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return activation(x, "leaky_relu", slope)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis -3, max-subtracted per pixel."""
    if x.data.ndim < 3 or x.shape[-3] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels on axis -3, got {x.shape}")
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-3, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _emit(p, (x,), _backward, "softmax_channels")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def _backward(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _emit(out, (x,), _backward, "upsample_nearest2x")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes, keeping them as size-1 dims."""
    hw = x.shape[-2] * x.shape[-1]
    out = x.data.mean(axis=(-2, -1), keepdims=True)
    return _emit(out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),), "global_avg_pool")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim and c.shape != a.shape:
            raise ShapeError(f"add: constant shape {c.shape} != {a.shape}")
        return _emit(a.data + c, (a,), lambda g: (g,), "add_const")
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape constant array."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim and c.shape != a.shape:
            raise ShapeError(f"mul: constant shape {c.shape} != {a.shape}")
        return _emit(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    c = a.dtype.type(s)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log of ``max(a, floor)``; zero gradient below the floor."""
    z = a.data
    keep = z > floor
    _probe(keep)
    safe = np.where(keep, z, z.dtype.type(floor))
    return _emit(np.log(safe), (a,), lambda g: (np.where(keep, g / safe, 0).astype(z.dtype),), "log")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _emit(out, (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kink_skipped: int

    def __float__(self) -> float:
        return self.max_rel_error


def _probed(fn):
    global _KINK_PROBE
    _KINK_PROBE = []
    try:
        val = float(fn().data)
        return val, _KINK_PROBE
    finally:
        _KINK_PROBE = None


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(fn: Callable[[], Tensor], params: Tensor | Iterable[Tensor], eps: float = 1e-3,
                      max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``fn`` must rebuild the loss from the current contents of ``params`` on
    every call. The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    A coordinate whose +eps or -eps evaluation lands on a different branch of
    a piecewise op (relu sign, log floor) straddles a kink where the central
    difference estimates no derivative; it is counted in ``kink_skipped``
    instead of the max. With ``max_coords`` a seeded random subset of
    coordinates is checked per tensor.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside [1e-5, 1e-2]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        p.requires_grad = True
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [np.array(p.grad, dtype=np.float64) if p.grad is not None else np.zeros(p.shape) for p in plist]
    _, base = _probed(fn)

    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(plist, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            up, up_br = _probed(fn)
            flat[k] = orig - eps
            down, down_br = _probed(fn)
            flat[k] = orig
            if not (_same_branches(base, up_br) and _same_branches(base, down_br)):
                skipped += 1
                continue
            num = (up - down) / (2 * eps)
            a = ga.reshape(-1)[k]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
            checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(fn: Callable[[], Tensor], params: Tensor | Iterable[Tensor], eps: float = 1e-3,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error of the tape gradient against central differences (see ``grad_check_report``)."""
    return grad_check_report(fn, params, eps, max_coords, seed).max_rel_error
