import numpy as np
import pytest

from conquer import tensor as T
from conquer.config import ModelConfig


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model_config(**kw) -> ModelConfig:
    base = dict(hidden=8, max_clips=10, max_tokens=6, visual_dim=6, text_dim=5, n_heads=2, ff_mult=2,
                n_clusters=4, conv_kernel=5, model_seed=0)
    base.update(kw)
    return ModelConfig(**base)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
