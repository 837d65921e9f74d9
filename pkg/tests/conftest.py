import numpy as np
import pytest
from threadpoolctl import threadpool_limits

threadpool_limits(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def direct_conv2d(x, w, b, stride, padding):
    """Six nested loops, no vectorization: the independent conv oracle."""
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride - padding + i
                                xi = xx * stride - padding + j
                                if 0 <= yy < h and 0 <= xi < wd:
                                    acc += x[bi, ci, yy, xi] * w[o, ci, i, j]
                    out[bi, o, y, xx] = acc
    return out


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the verdict of an acceptance criterion for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip())
