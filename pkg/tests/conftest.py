import numpy as np
import pytest

from sleepcmt.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small widths so model tests run in milliseconds."""
    return ModelConfig(embed_dim=8, ff_dim=16, heads=2, path_channels=4)


ACCEPTANCE_KEY = pytest.StashKey[dict]()
OUT_OF_SCOPE = {2: "full-corpus benchmark accuracy needs the complete PSG corpus and long training"}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL verdict per criterion; the summary prints them after the run."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(criterion: int, ok: bool, detail: str) -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}"
        results[criterion] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted({*results, *OUT_OF_SCOPE}):
        terminalreporter.write_line(results.get(n) or f"criterion {n}: OUT OF SCOPE {OUT_OF_SCOPE[n]}")
