import numpy as np
import pytest

from fnt_lab.config import preset
from fnt_lab.errors import FNTError
from fnt_lab.experiment import (RECIPES, cell_seed, make_corpus, markdown_table, run_experiment,
                                train_recipe)


def test_cell_seed_depends_on_seed_and_cell_only():
    assert cell_seed(0, "a") == cell_seed(0, "a")
    assert len({cell_seed(s, c) for s in (0, 1) for c in ("a", "b")}) == 4


def test_corpus_is_reproducible():
    cfg = preset("tiny")
    a, b = make_corpus(cfg), make_corpus(cfg)
    assert a.adapt_text == b.adapt_text and a.lm_text == b.lm_text
    assert all(np.array_equal(x.feats, y.feats) for x, y in zip(a.train, b.train))
    c = make_corpus(cfg.with_seed(1))
    assert c.adapt_text != a.adapt_text


def test_recipes_share_initial_weights(tiny_cfg, tiny_corpus):
    cfg = tiny_cfg.override("train", epochs=0)
    assert RECIPES["F1"][0] == RECIPES["F2"][0]
    a = train_recipe("F1", tiny_corpus, cfg, None)
    with pytest.raises(FNTError):
        train_recipe("F2", tiny_corpus, cfg, None)
    with pytest.raises(FNTError):
        train_recipe("Z9", tiny_corpus, cfg, None)
    b = train_recipe("F1", tiny_corpus, cfg.override("train", lam=0.5), None)
    assert a.params.digest() == b.params.digest()


def test_parallel_matches_serial(tiny_cfg, tiny_corpus):
    serial = run_experiment(tiny_cfg, ["B0", "F1"], corpus=tiny_corpus)
    parallel = run_experiment(tiny_cfg, ["B0", "F1"], jobs=2, corpus=tiny_corpus)
    assert [r.wers for r in serial] == [r.wers for r in parallel]
    assert "adapted" not in serial[0].wers and set(serial[1].wers) == {"base", "adapted", "ngram"}
    table = markdown_table(serial)
    assert table.splitlines()[2].startswith("| B0 |") and " - " in table
