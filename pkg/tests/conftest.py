import numpy as np
import pytest

from mflab.measures import DataMeasure, ParameterPath
from mflab.model import make_model

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        _VERDICTS.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["linear-tanh", "gated-tanh"])
def kind(request):
    return request.param


def small_instance(rng, kind, d=2, L=3, N=4, n=5, scale=0.5):
    model = make_model(kind, d)
    path = ParameterPath(scale * rng.standard_normal((L, N, model.m)))
    data = DataMeasure(rng.uniform(-1, 1, (n, d)), rng.uniform(-1, 1, (n, d)))
    return model, path, data
