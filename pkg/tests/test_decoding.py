import numpy as np
import pytest
import torch

from conftest import small_config
from fnt_lab.decoding import DecodeOptions, StepScorer, beam_decode, decode, greedy_decode, score_sequence
from fnt_lab.errors import FNTError
from fnt_lab.evaluation import wer
from fnt_lab.losses import transducer_loss
from fnt_lab.model import init_model, model_lattice, predictor_step
from fnt_lab.ngram import build_ngram
from fnt_lab.synthdata import make_utterances
from fnt_lab.tokenizer import decode as detokenize


@pytest.fixture(scope="module")
def random_model():
    return init_model(small_config("fnt_improved", V=5), 7)


def test_blank_dominated_model_emits_nothing(rng):
    m = init_model(small_config("fnt_standard"), 0)
    m.params["joint_blank.b"] = np.array([1e3])
    assert greedy_decode(m, rng.normal(size=(6, 4))) == []
    assert beam_decode(m, rng.normal(size=(6, 4)), DecodeOptions("beam"))[0].tokens == ()


def test_emission_cap_per_frame(rng):
    m = init_model(small_config("baseline"), 0)
    m.params["joint.b"] = np.array([-1e3] + [0.0] * 5)
    out = greedy_decode(m, rng.normal(size=(3, 4)), DecodeOptions(max_symbols_per_frame=2))
    assert len(out) == 6


def test_memorises_training_utterances(trained_small, tiny_corpus):
    m, utts, _ = trained_small
    for u in utts:
        assert greedy_decode(m, u.feats) == u.tokens


def test_ngram_weight_zero_is_identity(random_model, rng):
    ng = build_ngram([[0, 1, 2, 3, 4, 1]], 5, 3)
    for _ in range(5):
        feats = rng.normal(size=(8, 4))
        plain = decode(random_model, feats)
        hooked = decode(random_model, feats, DecodeOptions(ngram=ng, ngram_weight=0.0))
        assert plain == hooked


def test_ngram_hook_distribution_normalised(random_model, rng):
    ng = build_ngram([[0, 1, 2, 3, 4, 1]], 5, 3)
    sc = StepScorer(random_model, rng.normal(size=(4, 4)), DecodeOptions(ngram=ng, ngram_weight=0.3))
    for prefix in [(), (1,), (1, 2), (4, 4, 0)]:
        assert np.isclose(np.exp(sc.entry(prefix).z_vocab.numpy()).sum(), 1.0, atol=1e-8)
        assert np.isclose(np.exp(sc.log_dist(2, prefix)).sum(), 1.0, atol=1e-8)


def test_ngram_hook_rejected_for_baseline(rng):
    m = init_model(small_config("baseline"), 0)
    ng = build_ngram([[0, 1]], 5, 2)
    with pytest.raises(FNTError):
        greedy_decode(m, rng.normal(size=(3, 4)), DecodeOptions(ngram=ng))
    with pytest.raises(FNTError):
        score_sequence(m, rng.normal(size=(3, 4)), [1], DecodeOptions(ngram=ng))


def test_options_validation():
    with pytest.raises(FNTError):
        DecodeOptions(mode="viterbi")
    with pytest.raises(FNTError):
        DecodeOptions(beam_size=0)
    with pytest.raises(FNTError):
        DecodeOptions(max_symbols_per_frame=0)


@pytest.mark.parametrize("variant", ["baseline", "fnt_standard", "fnt_improved"])
def test_beam_one_equals_greedy(variant, rng):
    m = init_model(small_config(variant), 3)
    for _ in range(5):
        feats = 2 * rng.normal(size=(7, 4))
        top = beam_decode(m, feats, DecodeOptions("beam", beam_size=1))[0]
        assert list(top.tokens) == greedy_decode(m, feats)


def test_beam_sorted_and_replayable(random_model, rng):
    feats = rng.normal(size=(6, 4))
    hyps = beam_decode(random_model, feats, DecodeOptions("beam", beam_size=4))
    scores = [h.log_score for h in hyps]
    assert scores == sorted(scores, reverse=True) and all(np.isfinite(scores))
    assert len({h.tokens for h in hyps}) == len(hyps)
    P, cfg = random_model.tensors(), random_model.config
    for h in hyps:
        assert all(0 <= t < cfg.vocab_size for t in h.tokens)
        states, _ = predictor_step(P, cfg, "vocab", None, None)
        for tok in h.tokens:
            states, _ = predictor_step(P, cfg, "vocab", states, tok)
        assert all(torch.equal(a, b) for a, b in zip(states, h.vocab_state))


def test_decoding_is_deterministic(random_model, rng):
    feats = rng.normal(size=(6, 4))
    opts = DecodeOptions("beam", beam_size=3)
    assert [h.tokens for h in beam_decode(random_model, feats, opts)] == \
           [h.tokens for h in beam_decode(random_model, feats, opts)]


def test_score_sequence_bridge(random_model, rng):
    feats = rng.normal(size=(5, 4))
    for tokens in ([], [2], [0, 4, 4]):
        lat = model_lattice(random_model, feats, tokens)
        assert abs(score_sequence(random_model, feats, tokens) + transducer_loss(lat, tokens)[0]) < 1e-10
    lat = model_lattice(random_model, feats, [])
    assert np.isclose(score_sequence(random_model, feats, []), lat[:, 0, 0].sum(), atol=1e-12)


def test_score_sequence_with_ngram_matches_hooked_scorer(random_model, rng):
    ng = build_ngram([[0, 1, 2, 3, 4, 1]], 5, 3)
    opts = DecodeOptions(ngram=ng, ngram_weight=0.5)
    feats = rng.normal(size=(1, 4))
    # T=1, one token: emit at (0, 0) then blank at (0, 1)
    sc = StepScorer(random_model, feats, opts)
    expected = sc.log_dist(0, ())[3] + sc.log_dist(0, (2,))[0]
    assert np.isclose(score_sequence(random_model, feats, [2], opts), expected, atol=1e-10)


def test_greedy_beats_perturbations(trained_small, tiny_corpus):
    m, _, _ = trained_small
    v = tiny_corpus.vocab
    rng = np.random.default_rng(0)
    utts = make_utterances([u.text for u in tiny_corpus.test_general], v, "p", seed=9, noise_sd=0.1)
    wins = 0
    for u in utts:
        hyp = greedy_decode(m, u.feats)
        s = score_sequence(m, u.feats, hyp)
        ok = True
        for _ in range(20):
            pert = list(hyp) if hyp else [0]
            i = int(rng.integers(len(pert)))
            pert[i] = int((pert[i] + rng.integers(1, v.size)) % v.size)
            ok &= s >= score_sequence(m, u.feats, pert)
        wins += ok
    assert wins >= 0.9 * len(utts)


def test_beam_not_worse_than_greedy(trained_small, tiny_corpus):
    m, _, _ = trained_small
    v = tiny_corpus.vocab
    from fnt_lab.synthdata import general_domain, sample_text

    lines = sample_text(general_domain().with_seed(77), 50)
    utts = make_utterances(lines, v, "b", seed=10, noise_sd=0.6)
    g = wer(lines, [detokenize(v, greedy_decode(m, u.feats)) for u in utts]).wer
    b = wer(lines, [detokenize(v, decode(m, u.feats, DecodeOptions("beam", 4))) for u in utts]).wer
    assert b <= g
