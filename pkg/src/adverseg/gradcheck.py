"""Finite-difference suite over every differentiable op and both loss pipelines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check_report
from .data import one_hot
from .losses import disc_loss, gen_loss
from .models import NetConfig, build_discriminator, build_generator, forward_discriminator, forward_generator

TOLERANCE = 1e-3


@dataclass
class CheckRow:
    name: str
    max_rel_error: float
    checked: int
    kink_skipped: int

    @property
    def ok(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _op_cases(r: np.random.Generator):
    x = _t(r.standard_normal((2, 6, 6)))
    k = _t(r.standard_normal((3, 2, 3, 3)) * 0.5)
    b = _t(r.standard_normal(3))

    def projected(f, shape):
        m = r.standard_normal(shape)
        return lambda: ag.sum(ag.mul(f(), m))

    yield "conv2d", projected(lambda: ag.conv2d(x, k, b, stride=2, pad=1), (3, 3, 3)), [x, k, b]
    yield "conv2d_dilated", projected(lambda: ag.conv2d(x, k, b, pad=2, dilation=2), (3, 6, 6)), [x, k, b]
    yield "relu", projected(lambda: ag.relu(x), x.shape), [x]
    yield "leaky_relu", projected(lambda: ag.leaky_relu(x, 0.2), x.shape), [x]
    yield "sigmoid", projected(lambda: ag.sigmoid(x), x.shape), [x]
    z = _t(r.standard_normal((4, 3, 3)))
    yield "softmax_channels", projected(lambda: ag.softmax_channels(z), z.shape), [z]
    yield "upsample_nearest2x", projected(lambda: ag.upsample_nearest2x(x), (2, 12, 12)), [x]
    yield "global_avg_pool", projected(lambda: ag.global_avg_pool(x), (2, 1, 1)), [x]
    pos = _t(np.abs(r.standard_normal((2, 6, 6))) + 0.5)
    yield "log", projected(lambda: ag.log(pos), pos.shape), [pos]
    y = _t(r.standard_normal(x.shape))
    yield "add", projected(lambda: ag.add(x, y), x.shape), [x, y]
    yield "mul", lambda: ag.sum(ag.mul(x, y)), [x, y]
    yield "mean", lambda: ag.mean(ag.mul(x, x)), [x]


def pipeline_cases(seed: int = 0, size: int = 8, num_classes: int = 4, lam: float = 0.01):
    cfg = NetConfig(num_classes=num_classes, base_width=4, depth=2)
    r = np.random.default_rng(seed)
    gen = build_generator(cfg, seed).astype(np.float64)
    disc = build_discriminator(cfg, seed + 1).astype(np.float64)
    img = r.random((3, size, size))
    labels = r.integers(0, num_classes, (size, size))

    def generator_loss():
        p = forward_generator(gen, img)
        return gen_loss(p, labels, forward_discriminator(disc, p), lam)[0]

    fake = forward_generator(gen, img).data
    real = one_hot(labels, num_classes).astype(np.float64)

    def discriminator_loss():
        return disc_loss(forward_discriminator(disc, fake), forward_discriminator(disc, real))

    return gen, disc, generator_loss, discriminator_loss


def run_suite(eps: float = 1e-3, seed: int = 0, max_coords: int | None = None) -> list[CheckRow]:
    rows = []
    for name, fn, params in _op_cases(np.random.default_rng(seed)):
        res = grad_check_report(fn, params, eps)
        rows.append(CheckRow(name, res.max_rel_error, res.checked, res.kink_skipped))

    gen, disc, gfn, dfn = pipeline_cases(seed)
    for p in disc.params.values():
        p.requires_grad = False
    res = grad_check_report(gfn, list(gen.params.values()), eps, max_coords, seed)
    rows.append(CheckRow("generator_loss_pipeline", res.max_rel_error, res.checked, res.kink_skipped))
    for p in disc.params.values():
        p.requires_grad = True
    res = grad_check_report(dfn, list(disc.params.values()), eps, max_coords, seed)
    rows.append(CheckRow("discriminator_loss_pipeline", res.max_rel_error, res.checked, res.kink_skipped))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = [f"{'check':<30}{'max_rel_err':>14}{'checked':>9}{'kinks':>7}  status"]
    for r in rows:
        lines.append(f"{r.name:<30}{r.max_rel_error:>14.3e}{r.checked:>9}{r.kink_skipped:>7}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
