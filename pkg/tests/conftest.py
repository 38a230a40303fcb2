import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lrm.tensor import precision  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def scalar_bilinear(plane: np.ndarray, u: float, v: float) -> np.ndarray:
    """Reference bilinear lookup, one point at a time (corner texel centers at +/-1, clamped)."""
    H, W, _ = plane.shape
    x = min(max((u + 1.0) / 2.0 * (W - 1), 0.0), W - 1)
    y = min(max((v + 1.0) / 2.0 * (H - 1), 0.0), H - 1)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * plane[y0, x0] + ax * (1 - ay) * plane[y0, x1]
            + (1 - ax) * ay * plane[y1, x0] + ax * ay * plane[y1, x1])


def slab_interval(o, d, h=1.0):
    """Scalar slab test against [-h, h]^3; returns (t_near, t_far, hit)."""
    lo, hi = -np.inf, np.inf
    for k in range(3):
        if d[k] == 0.0:
            if abs(o[k]) > h:
                return 0.0, 0.0, False
            continue
        t0, t1 = (-h - o[k]) / d[k], (h - o[k]) / d[k]
        lo, hi = max(lo, min(t0, t1)), min(hi, max(t0, t1))
    lo = max(lo, 0.0)
    if hi <= lo:
        return lo, lo, False
    return lo, hi, True


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are printed in the terminal summary."""
    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
