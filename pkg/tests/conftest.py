import numpy as np
import pytest

from fedssd.nn import ModelParams, init_mlp


def finite_difference_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a-b| / max(|a|, |b|, floor)``."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def tiny_net() -> ModelParams:
    return init_mlp(3, 4, hidden=(5,), seed=7)


def random_net(rng: np.random.Generator, n_in: int, hidden, n_out: int) -> ModelParams:
    """Net with non-zero biases so ReLU kinks are not hit at the origin."""
    base = init_mlp(n_in, n_out, hidden, seed=rng)
    layers = [(w, rng.normal(0, 0.3, size=b.shape)) for w, b in base.layers]
    return ModelParams(tuple(layers))


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record a one-line verdict, print it, then fail the test if needed."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
