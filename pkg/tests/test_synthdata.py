import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnt_lab.errors import FNTError
from fnt_lab.synthdata import (DomainSpec, adaptation_domain, general_domain, make_utterances,
                               read_dataset, read_features, sample_text, synthesize_features,
                               token_templates, write_dataset, write_features)
from fnt_lab.tokenizer import build_vocabulary, encode


def test_sampling_is_repeatable():
    spec = general_domain(seed=3)
    assert sample_text(spec, 3) == sample_text(spec, 3)
    assert len(sample_text(spec, 3)) == 3


def test_degenerate_chain():
    spec = DomainSpec(["go"], np.ones((1, 1)), (2, 2), seed=0)
    assert sample_text(spec, 5) == ["go go"] * 5


def test_different_seeds_differ():
    a = sample_text(general_domain().with_seed(1), 100)
    b = sample_text(general_domain().with_seed(2), 100)
    assert a != b


def test_bad_domain_specs():
    with pytest.raises(FNTError):
        DomainSpec(["a", "b"], np.array([[1.0, -1.0], [1.0, 1.0]]))
    with pytest.raises(FNTError):
        DomainSpec(["a", "b"], np.array([[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(FNTError):
        DomainSpec(["a"], np.ones((1, 1)), (3, 2))


def test_sentence_lengths_within_range():
    for line in sample_text(general_domain(), 200):
        assert 3 <= len(line.split()) <= 7


def test_adaptation_domain_is_more_predictable():
    # empirical bigram entropy of the adaptation text is lower than the general one
    def entropy(lines):
        pairs = {}
        for line in lines:
            w = line.split()
            for a, b in zip(w, w[1:]):
                pairs.setdefault(a, []).append(b)
        h, n = 0.0, 0
        for followers in pairs.values():
            _, c = np.unique(followers, return_counts=True)
            p = c / c.sum()
            h -= (c * np.log(p)).sum()
            n += c.sum()
        return h / n

    assert entropy(sample_text(adaptation_domain(), 2000)) < entropy(sample_text(general_domain(), 2000)) - 0.3


def test_feature_shapes():
    v = build_vocabulary(["ab"])
    fs = synthesize_features([1, 2], v, (3, 3), noise_sd=0.1, seed=0, dim=16)
    assert fs.frames.shape == (6, 16)


def test_noise_free_features_are_deterministic():
    v = build_vocabulary(["ab"])
    a = synthesize_features([1, 2], v, (2, 4), noise_sd=0.0, seed=0).frames
    b = synthesize_features([1, 2], v, (2, 4), noise_sd=0.0, seed=0).frames
    assert np.array_equal(a, b)


def test_noise_level_near_template():
    v = build_vocabulary(["abc"])
    sd, D = 0.1, 16
    temps = token_templates(v, D)
    tokens = [1, 2, 3] * 110
    fs = synthesize_features(tokens, v, (3, 3), noise_sd=sd, seed=1, dim=D).frames
    expected = np.repeat(temps[tokens], 3, axis=0)
    dist = np.linalg.norm(fs - expected, axis=1)
    assert len(dist) >= 990
    assert dist.mean() < 3 * sd * np.sqrt(D)


def test_empty_utterance_rejected():
    v = build_vocabulary(["ab"])
    with pytest.raises(FNTError):
        synthesize_features([], v, seed=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8))
def test_feature_file_roundtrip(T, D):
    import tempfile
    from pathlib import Path

    x = np.random.default_rng(T * 10 + D).normal(size=(T, D)).astype(np.float32).astype(np.float64)
    with tempfile.TemporaryDirectory() as d:
        write_features(Path(d) / "x.f32", x)
        assert np.array_equal(read_features(Path(d) / "x.f32"), x)


def test_dataset_roundtrip(tmp_path):
    v = build_vocabulary(sample_text(general_domain(), 50), mode="word")
    utts = make_utterances(sample_text(general_domain(), 4), v, "u", seed=0)
    manifest = write_dataset(tmp_path, "set", utts)
    back = read_dataset(manifest, v)
    assert [u.uid for u in back] == [u.uid for u in utts]
    for a, b in zip(utts, back):
        assert a.text == b.text and a.tokens == b.tokens == encode(v, a.text)
        assert np.allclose(a.feats, b.feats, atol=1e-6)
