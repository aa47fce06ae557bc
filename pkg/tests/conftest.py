import numpy as np
import pytest
import torch

from fnt_lab.config import preset
from fnt_lab.experiment import fixture_vocabulary, make_corpus
from fnt_lab.model import ModelConfig, init_model
from fnt_lab.training import TrainConfig, train_model


def random_lattice(rng, T, U, V):
    x = rng.normal(size=(T, U + 1, V + 1))
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def random_log_rows(rng, n, V, scale=1.0):
    x = scale * rng.normal(size=(n, V))
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def small_config(variant, V=5, **kw):
    dims = dict(feature_dim=4, enc_layers=1, enc_hidden=6, pred_layers=1, pred_hidden=5,
                embed_dim=3, joint_dim=7)
    dims.update(kw)
    return ModelConfig(variant, V, **dims)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    return make_corpus(tiny_cfg)


@pytest.fixture(scope="session")
def word_vocab():
    return fixture_vocabulary("word")


@pytest.fixture(scope="session")
def trained_small(tiny_corpus):
    """Improved FNT that has memorised a handful of clean training utterances."""
    from fnt_lab.synthdata import make_utterances

    v = tiny_corpus.vocab
    lines = [u.text for u in tiny_corpus.train[:6]]
    utts = make_utterances(lines, v, "mem", seed=5, noise_sd=0.1)
    cfg = ModelConfig("fnt_improved", v.size, enc_layers=1, enc_hidden=32, pred_hidden=32,
                      embed_dim=16, joint_dim=32)
    m, log = train_model(init_model(cfg, 0), utts, TrainConfig(epochs=80, lr=1e-2, batch_size=6))
    return m, utts, log


def pytest_terminal_summary(terminalreporter):
    import sys
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])
