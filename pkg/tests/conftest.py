import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from patternkit.data import Dataset

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_dataset(rng, n, p, patterns, noise=1.0, beta=None):
    """Normal covariates with rows assigned to ``patterns`` (bitmasks) at random.

    Every listed pattern receives at least ``2 * (p + 1) + 2`` rows.
    """
    patterns = list(patterns)
    base = 2 * (p + 1) + 2
    assert n >= base * len(patterns)
    pid = np.concatenate([np.repeat(patterns, base), rng.choice(patterns, n - base * len(patterns))])
    rng.shuffle(pid)
    mask = ((pid[:, None] >> np.arange(p)) & 1).astype(np.uint8)
    cov = 0.5 * np.eye(p) + 0.5
    x = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T + 2.0
    beta = rng.normal(size=p + 1) if beta is None else np.asarray(beta)
    y = beta[0] + x @ beta[1:] + noise * rng.standard_normal(n)
    return Dataset(y, x, mask, tuple(f"x{j + 1}" for j in range(p)))


@pytest.fixture
def make_dataset():
    return random_dataset
