import numpy as np
import pytest

from adverseg.models import NetConfig


def naive_conv2d(x, k, b, stride=1, pad=0, dilation=1):
    """Quadruple-loop cross-correlation reference, float64."""
    c, h, w = x.shape
    co, ci, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = float(b[o]) if b is not None else 0.0
                for cc in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[cc, i * stride + u * dilation, j * stride + v * dilation] * k[o, cc, u, v]
                out[o, i, j] = acc
    return out


@pytest.fixture
def small_cfg():
    return NetConfig(in_channels=3, num_classes=4, base_width=4, depth=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
