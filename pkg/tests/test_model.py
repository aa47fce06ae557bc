import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import small_config
from fnt_lab.errors import FNTError
from fnt_lab.losses import ctc_loss, torch_ctc_loss, torch_lm_cross_entropy, torch_transducer_loss
from fnt_lab.model import (VARIANTS, ModelConfig, assemble_output, ctc_head, encode,
                           encoder_forward, encoder_vocab_logits, init_model, joint_blank,
                           joint_vocab_improved, joint_vocab_standard, lattice, load_model,
                           model_lattice, param_shapes, predict_blank, predict_vocab_logits,
                           predictor_forward, predictor_step, pred_output, save_model,
                           vocab_head, vocab_param_names)
from fnt_lab.nncore import gradient_check


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_parameter_sets_per_variant():
    names = {v: set(param_shapes(small_config(v))) for v in VARIANTS}
    assert "gamma" in names["fnt_improved"] and "gamma" not in names["fnt_standard"]
    assert names["lm"] == set(vocab_param_names(small_config("lm")))
    assert not any(n.startswith("vocab") for n in names["baseline"])
    assert param_shapes(small_config("fnt_improved", V=5))["enc_vocab.W"][0] == (6, 7)
    assert param_shapes(small_config("fnt_standard", V=5))["enc_vocab.W"][0] == (5, 7)


def test_config_validation():
    with pytest.raises(FNTError):
        ModelConfig("rnnt", 5)
    with pytest.raises(FNTError):
        ModelConfig("baseline", 1)
    with pytest.raises(FNTError):
        ModelConfig("baseline", 5, enc_hidden=0)


def test_init_is_seeded():
    a, b = init_model(small_config("fnt_improved"), 3), init_model(small_config("fnt_improved"), 3)
    assert a.params.digest() == b.params.digest()
    assert init_model(small_config("fnt_improved"), 4).params.digest() != a.params.digest()
    assert a.params["gamma"][0] == 1.0


def test_encoder_shapes_and_purity(rng):
    m = init_model(small_config("baseline"), 0)
    f = encode(m, rng.normal(size=(1, 4)))
    assert f.shape == (1, 7)
    x = rng.normal(size=(5, 4))
    assert np.array_equal(encode(m, x), encode(m, x))
    with pytest.raises(FNTError):
        encode(m, rng.normal(size=(5, 3)))


def test_predictor_rows():
    m = init_model(small_config("fnt_standard"), 0)
    assert predict_blank(m, []).shape == (1, 7)
    assert predict_blank(m, [1, 2]).shape == (3, 7)


@pytest.mark.parametrize("prefix_name", ["blank", "vocab"])
def test_streaming_matches_batch(prefix_name, rng):
    cfg = small_config("fnt_improved", pred_layers=2)
    m = init_model(cfg, 1)
    P = m.tensors()
    tokens = [3, 0, 4, 4, 1]
    with torch.no_grad():
        batch = predictor_forward(P, cfg, prefix_name, torch.tensor(tokens))
        states, h = predictor_step(P, cfg, prefix_name, None, None)
        rows = [h]
        for tok in tokens:
            states, h = predictor_step(P, cfg, prefix_name, states, tok)
            rows.append(h)
    assert torch.allclose(torch.stack(rows), batch, atol=1e-10, rtol=0)


def test_vocab_rows_normalised(rng):
    m = init_model(small_config("fnt_improved"), 0)
    _, z = predict_vocab_logits(m, [1, 2, 3])
    assert np.allclose(np.logaddexp.reduce(z, axis=-1), 0.0, atol=1e-12)


def test_zero_vocab_weights_give_uniform_rows():
    m = init_model(small_config("lm", V=6), 0)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    _, z = predict_vocab_logits(m, [1, 2])
    assert np.allclose(z, -math.log(6), atol=1e-12)


def test_blank_joint_hand_case():
    P = {"joint_blank.W": t64([[1.0, -2.0]]), "joint_blank.b": t64([0.5])}
    f, g = t64([1.0, 1.0]), t64([0.5, -3.0])
    # relu([1.5, -2]) = [1.5, 0]; 1.5 + 0.5 = 2
    assert joint_blank(f, g, P).item() == 2.0
    P0 = {k: torch.zeros_like(v) for k, v in P.items()}
    assert joint_blank(f, g, P0).item() == 0.0
    P["joint_blank.b"] = P["joint_blank.b"] + 3.0
    assert joint_blank(f, g, P).item() == 5.0


def test_vocab_joint_standard_hand_case():
    P = {"enc_vocab.W": t64([[1.0, 0.0], [2.0, -1.0]]), "enc_vocab.b": t64([0.0, 1.0])}
    f = t64([2.0, -1.0])                    # relu -> [2, 0]
    z = t64([-0.5, -1.0])
    assert joint_vocab_standard(f, z, P).tolist() == [1.5, 4.0]
    P0 = {k: torch.zeros_like(v) for k, v in P.items()}
    assert joint_vocab_standard(f, z, P0).tolist() == z.tolist()


def test_vocab_joint_standard_shift():
    P = {"enc_vocab.W": t64(np.eye(3)), "enc_vocab.b": t64([0.1, 0.2, 0.3])}
    f, z = t64([0.5, 1.0, 2.0]), t64([-1.0, -2.0, -0.5])
    base = joint_vocab_standard(f, z, P)
    P["enc_vocab.b"] = P["enc_vocab.b"] + 0.7
    shifted = joint_vocab_standard(f, z, P)
    assert torch.allclose(shifted - base, torch.full((3,), 0.7, dtype=torch.float64))
    a = assemble_output(t64(0.0), base)[1:]
    b = assemble_output(t64(0.0), shifted)[1:]
    assert torch.allclose(a - a.logsumexp(0), b - b.logsumexp(0), atol=1e-12)


def test_vocab_joint_improved_gamma_zero_and_uniform():
    V = 3
    P = {"enc_vocab.W": t64(np.zeros((V + 1, 2))), "enc_vocab.b": t64(np.zeros(V + 1)), "gamma": t64([0.0])}
    f = t64([1.0, 2.0])
    z = torch.log_softmax(t64([0.3, -1.0, 2.0]), -1)
    out0 = joint_vocab_improved(f, z, P)
    assert torch.allclose(out0, torch.full((V,), -math.log(V + 1), dtype=torch.float64), atol=1e-15)
    out1 = joint_vocab_improved(f, z, P, gamma=t64([1.0]))
    assert torch.allclose(out1, -math.log(V + 1) + z, atol=1e-15)


def test_vocab_joint_improved_gamma_gradient(rng):
    V = 4
    base = {"f": rng.normal(size=(3, 5)), "gamma": np.array([0.8]),
            "enc_vocab.W": rng.normal(size=(V + 1, 5)), "enc_vocab.b": rng.normal(size=V + 1)}
    z = torch.log_softmax(t64(rng.normal(size=(3, V))), -1)
    w = t64(rng.normal(size=(3, V)))
    rep = gradient_check(lambda p: (joint_vocab_improved(p["f"], z, p) * w).sum(), base)
    assert rep.passed
    P = {k: torch.tensor(v, requires_grad=True) for k, v in base.items()}
    (joint_vocab_improved(P["f"], z, P) * w).sum().backward()
    assert math.isclose(P["gamma"].grad.item(), (z * w).sum().item(), rel_tol=1e-12)


def test_assemble_output_examples():
    out = assemble_output(t64(0.0), t64(np.zeros(4)))
    assert torch.allclose(out, torch.full((5,), -math.log(5), dtype=torch.float64))
    z = t64([0.2, -1.0])
    probs = [assemble_output(t64(b), z)[0].exp().item() for b in (-5.0, 0.0, 5.0, 20.0)]
    assert all(a < b for a, b in zip(probs, probs[1:])) and probs[-1] > 1 - 1e-8


def test_ctc_head_shares_encoder_projection(rng):
    m = init_model(small_config("fnt_improved"), 0)
    f = encode(m, rng.normal(size=(3, 4)))
    head = ctc_head(m, f)
    assert head.shape == (3, 6)
    assert np.allclose(np.logaddexp.reduce(head, -1), 0, atol=1e-12)
    ctc_loss(head, [1, 2])
    lat = model_lattice(m, rng.normal(size=(3, 4)), [1])
    m2 = m.copy()
    m2.params["enc_vocab.W"][0] += 0.5
    assert not np.allclose(ctc_head(m2, f), head)
    assert not np.allclose(model_lattice(m2, rng.normal(size=(3, 4)), [1]), lat)


@pytest.mark.parametrize("variant", ["baseline", "fnt_standard", "fnt_improved"])
def test_lattice_normalised(variant, rng):
    m = init_model(small_config(variant), 2)
    lat = model_lattice(m, rng.normal(size=(6, 4)), [0, 3, 3])
    assert lat.shape == (6, 4, 6)
    assert np.allclose(np.logaddexp.reduce(lat, axis=-1), 0.0, atol=1e-12)


def test_gamma_zero_removes_lm_branch(rng):
    m = init_model(small_config("fnt_improved"), 0)
    m.params["gamma"] = np.zeros(1)
    feats = rng.normal(size=(4, 4))
    a = model_lattice(m, feats, [1, 2])
    m.params["vocab.proj.W"] = m.params["vocab.proj.W"] + rng.normal(size=m.params["vocab.proj.W"].shape)
    assert np.array_equal(model_lattice(m, feats, [1, 2]), a)


def test_batched_lattice_matches_single(rng):
    cfg = small_config("fnt_improved")
    m = init_model(cfg, 0)
    P = m.tensors()
    feats = rng.normal(size=(2, 5, 4))
    toks = torch.tensor([[1, 2, 0], [4, 4, 3]])
    with torch.no_grad():
        out = lattice(P, cfg, encoder_forward(P, cfg, torch.tensor(feats)), toks)["log_probs"]
    for i in range(2):
        assert torch.allclose(out[i], torch.tensor(model_lattice(m, feats[i], toks[i].tolist())), atol=1e-12)


def test_save_load_roundtrip(tmp_path):
    m = init_model(small_config("fnt_improved"), 0)
    save_model(m, tmp_path / "ck")
    back = load_model(tmp_path / "ck")
    assert back.config == m.config
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k].astype(np.float32).astype(np.float64))
    (tmp_path / "ck" / "model.cfg").write_text("variant = baseline\nvocab_size = 5\n")
    with pytest.raises(FNTError):
        load_model(tmp_path / "ck")


def composite_objective(cfg, feats, tokens, lam=0.1, beta=0.1):
    def loss(P):
        f = encoder_forward(P, cfg, torch.tensor(feats))
        out = lattice(P, cfg, f, torch.tensor(tokens))
        total = torch_transducer_loss(out["log_probs"], tokens)
        if "vocab_log_probs" in out:
            total = total + lam * torch_lm_cross_entropy(out["vocab_log_probs"][:-1], tokens)
        if "ctc_log_probs" in out:
            total = total + beta * torch_ctc_loss(out["ctc_log_probs"], tokens)
        return total
    return loss


@pytest.mark.parametrize("variant", ["baseline", "fnt_standard", "fnt_improved"])
def test_full_objective_gradient(variant, rng):
    cfg = small_config(variant, V=4)
    m = init_model(cfg, 5)
    loss = composite_objective(cfg, rng.normal(size=(5, 4)), [1, 3, 0])
    rep = gradient_check(loss, m.params, n_coords=60, seed=1)
    assert rep.passed, rep


def test_gamma_gradient_through_objective(rng):
    cfg = small_config("fnt_improved", V=4)
    m = init_model(cfg, 5)
    loss = composite_objective(cfg, rng.normal(size=(5, 4)), [1, 3, 0])
    rep = gradient_check(lambda p: loss({**m.tensors(), "gamma": p["gamma"]}), {"gamma": m.params["gamma"]})
    assert rep.passed


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["baseline", "fnt_standard", "fnt_improved"]),
       st.integers(1, 6), st.integers(0, 4))
def test_lattice_normalised_property(seed, variant, T, U):
    rng = np.random.default_rng(seed)
    m = init_model(small_config(variant), seed)
    lat = model_lattice(m, 3 * rng.normal(size=(T, 4)), rng.integers(0, 5, size=U).tolist())
    assert np.allclose(np.exp(lat).sum(-1), 1.0, atol=1e-8)
