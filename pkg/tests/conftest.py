import numpy as np
import pytest

from mixupmil.bagstore import FeatureBag, one_hot
from mixupmil.rng import RngStream

ACCEPTANCE_LINES: list[str] = []


def random_bag(rng: np.random.Generator, p: int, d: int, c: int, ident: str = "bag", cls: int | None = None,
               scale: float = 1.0) -> FeatureBag:
    cls = int(rng.integers(c)) if cls is None else cls
    return FeatureBag(ident, one_hot(cls, c), rng.normal(size=(p, d)) * scale)


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


@pytest.fixture
def stream():
    return RngStream(7)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
