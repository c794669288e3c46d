import numpy as np
import pytest

from domsot.core import build_vocabulary, encode_transcript
from domsot.data import SynthSpec, generate_corpus


@pytest.fixture
def vocab():
    return build_vocabulary(["a", "b", "c", "d"])


@pytest.fixture
def seq(vocab):
    return lambda text: encode_transcript(text, vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    spec = SynthSpec(vocab_size=4, feature_dim=6, frames_per_token=(3, 5), seed=7)
    return spec, generate_corpus(spec, 40)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def record():
    """Append one pass/fail line for an acceptance criterion."""
    def _record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _record


@pytest.fixture(scope="session")
def desk():
    """Desk-scale experiments keyed by seed; models are trained on first use."""
    from domsot.experiment import DeskExperiment, DeskProtocol
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = DeskExperiment(DeskProtocol(seed=seed))
        return cache[seed]
    return get


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
