import numpy as np
import pytest

from eccbird.dataset import LabelVocabulary, MlcDataset


def make_mlc(X, Y, names=None, prefix="ex"):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y)
    names = names or tuple(f"c{j}" for j in range(Y.shape[1]))
    return MlcDataset.from_arrays(LabelVocabulary(tuple(names)),
                                  [f"{prefix}{i}" for i in range(len(X))], X, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mlc(rng):
    """60 examples, 5 features, 3 correlated classes driven by the features."""
    X = rng.random((60, 5))
    Y = np.column_stack([X[:, 0] > 0.5, (X[:, 0] > 0.5) & (X[:, 1] > 0.3), X[:, 2] > 0.7]).astype(np.uint8)
    return make_mlc(X, Y)


_ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, pytest.skip.Exception):
            status = "SKIP"
            self.detail = self.detail or str(exc)
        else:
            status = "FAIL" if exc_type is not None else "PASS"
        _ACCEPTANCE[self.number] = f"criterion {self.number} {status}: {self.title}" + \
            (f" ({self.detail})" if self.detail else "")
        print(_ACCEPTANCE[self.number])
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the acceptance summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
