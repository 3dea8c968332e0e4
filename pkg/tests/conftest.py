import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedsto.autodiff import run
from fedsto.config import Config

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Float64 central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def graph_grad_check(graph, inputs: dict, root, name: str, h: float = 1e-6):
    """(analytic float32 gradient, float64 finite-difference oracle) for input ``name``."""
    analytic = run(graph, inputs, root=root, wrt=[name]).gradients[name]

    def f(v):
        return float(run(graph, {**inputs, name: v}, root=root, backward=False, dtype=np.float64).value)

    return analytic, central_diff(f, inputs[name], h)


@pytest.fixture
def tiny_config() -> Config:
    """Two rounds per stage on small datasets; a full run takes a few seconds."""
    return Config().with_updates(
        federation=dict(warmup_rounds=1, phase1_rounds=2, phase2_rounds=2, batch_size=8),
        data=dict(server_scenes=24, client_scenes=16, test_scenes=12),
    )


ACCEPTANCE_LINES: list[str] = []


def verdict(number: int, name: str, ok: bool, detail: str = "") -> None:
    """Print and record one PASS/FAIL line, then fail the calling test if ``ok`` is false."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {name}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
