import numpy as np
import pytest

from bitkit.engine import Tensor


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Six nested loops, no vectorization; the reference for conv2d."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[b, ic, i * stride + ki, j * stride + kj] * w[oc, ic, ki, kj]
                    out[b, oc, i, j] = acc
    return out


def leaf(arr, dtype=np.float64) -> Tensor:
    return Tensor(np.array(arr, dtype=dtype), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------

_REPORT_KEY = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines: list, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}" + (f"  ({self.detail})" if self.detail else "")
        self.lines.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one pass/fail line for the summary."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
