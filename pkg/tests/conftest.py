import numpy as np
import pytest

from attnsteer.model import ModelConfig, ModelWeights, init_random, tensor_layout

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_positions=512)


@pytest.fixture(scope="session")
def tiny_weights():
    return init_random(TINY, 7)


@pytest.fixture(scope="session")
def default_weights():
    return init_random(ModelConfig(), 42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_causal_attention(rng, n, heads=None):
    """Row-stochastic lower-triangular matrices (or a stack of them)."""
    shape = (n, n) if heads is None else (heads, n, n)
    raw = rng.exponential(size=shape) * np.tril(np.ones((n, n)))
    return raw / raw.sum(axis=-1, keepdims=True)


def blank_arrays(cfg: ModelConfig) -> dict:
    """All-zero weights with unit norm gains, for hand-built models."""
    return {name: (np.ones(shape) if len(shape) == 1 else np.zeros(shape))
            for name, shape in tensor_layout(cfg)}


def build_weights(cfg: ModelConfig, arrays: dict) -> ModelWeights:
    return ModelWeights.from_arrays(cfg, arrays)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, lines: dict, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail
        if exc_type is not None:
            reason = str(exc).splitlines()[0] if str(exc) else ""
            detail = f"{detail} | {exc_type.__name__}: {reason}"
        line = f"criterion {self.number:>2}: {status}  {self.title}"
        if detail:
            line += f"  [{detail.strip(' |')}]"
        self.lines[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
