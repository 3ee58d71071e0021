from types import SimpleNamespace

import numpy as np
import pytest

from crayon.model import ModelConfig, init_weights


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=11, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_seq=10, precision=64)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_weights(cfg, seed=1, scale=0.1):
    """Random init plus noise so LayerNorm gains and biases are not trivially 1 and 0."""
    w = init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for k in w.params:
        w.params[k] = (w.params[k] + rng.normal(0, scale, w.params[k].shape)).astype(cfg.dtype)
    return w


def random_batch(cfg, b=3, t=7, seed=0):
    rng = np.random.default_rng(seed)
    mask = rng.random((b, t)) < 0.6
    mask[:, -1] = True
    return SimpleNamespace(inputs=rng.integers(0, cfg.vocab_size, (b, t)),
                           targets=rng.integers(0, cfg.vocab_size, (b, t)), mask=mask)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, perturbed_weights(cfg)


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    from crayon.harness import Benchmark, BenchmarkConfig
    b = Benchmark(BenchmarkConfig.small(precision=64), tmp_path_factory.mktemp("small"))
    b.pool
    return b


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
