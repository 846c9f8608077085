import numpy as np
import pytest

from lengen_se import model as M
from lengen_se.mixer import make_corpus, synthetic_corpus
from lengen_se.train import TrainConfig, train_loop

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(seed=3, n_clean=10, clean_len=6.0, n_noise=12, noise_len=8.0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    make_corpus(out, seed=5, n_clean=10, clean_len=6.0, n_noise=12, noise_len=8.0)
    return out


SMALL_MODEL = M.ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32)


@pytest.fixture(scope="session")
def trained_small(small_corpus):
    """A small no-pos model trained briefly on 0.5 s clips."""
    cfg = TrainConfig(epochs=2, iters_per_epoch=150, batch_size=6, clip_len_s=0.5,
                      warmup_iters=100, val_count=4, val_len_s=1.0)
    result = train_loop(SMALL_MODEL, cfg, small_corpus)
    return SMALL_MODEL, result.params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
