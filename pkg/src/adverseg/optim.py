"""Optimizers: SGD (momentum + L2 decay), Adam, polynomial LR decay and SWA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autograd import ShapeError, Tensor

SWA_MODES = ("running_mean", "literal_eq7")


class MissingGradError(RuntimeError):
    pass


def poly_lr(base_lr: float, k: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= k <= max_iter:
        raise ValueError(f"iteration {k} outside [0, {max_iter}]")
    return base_lr * (1.0 - k / max_iter) ** power


def _grads(params: Sequence[Tensor]) -> list[np.ndarray]:
    out = []
    for p in params:
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or p.shape} has no gradient")
        out.append(p.grad)
    return out


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 5e-5
    momentum_buffers: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: Sequence[Tensor], state: SgdState, lr: float) -> None:
    """``buf = momentum*buf + grad + wd*param``; ``param -= lr*buf``."""
    grads = _grads(params)
    if not state.momentum_buffers:
        state.momentum_buffers = [np.zeros_like(p.data) for p in params]
    for p, g, buf in zip(params, grads, state.momentum_buffers):
        d = g + state.weight_decay * p.data if state.weight_decay else g
        buf *= state.momentum
        buf += d
        p.data = (p.data - lr * buf).astype(p.dtype)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    grads = _grads(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
        p.data = (p.data - step).astype(p.dtype)


@dataclass
class SwaState:
    """Averaged generator weights.

    ``running_mean`` keeps the exact mean of every absorbed snapshot;
    ``literal_eq7`` blends with fixed weights ``n/(n+1)`` and ``1/(n+1)``.
    """

    theta_swa: dict[str, np.ndarray]
    n: int = 100
    mode: str = "running_mean"
    update_count: int = 0

    def __post_init__(self):
        if self.mode not in SWA_MODES:
            raise ValueError(f"unknown SWA mode {self.mode!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], n: int = 100, mode: str = "running_mean") -> "SwaState":
        # accumulated in float64; cast back when loaded into a network
        return cls({k: np.array(v, dtype=np.float64) for k, v in params.items()}, n=n, mode=mode)


def swa_update(state: SwaState, theta_gen: Mapping[str, np.ndarray]) -> None:
    if set(theta_gen) != set(state.theta_swa):
        raise ShapeError("parameter names differ between theta_swa and theta_gen")
    w = state.update_count if state.mode == "running_mean" else state.n
    for k, cur in state.theta_swa.items():
        new = np.asarray(theta_gen[k])
        if new.shape != cur.shape:
            raise ShapeError(f"{k}: {new.shape} vs {cur.shape}")
        state.theta_swa[k] = (cur * w + new.astype(np.float64)) / (w + 1)
    state.update_count += 1
