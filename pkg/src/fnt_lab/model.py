"""Baseline transducer, standard FNT, improved FNT and the standalone LM.

All forward functions take ``P``, a mapping from parameter name to float64
tensor, so the same code serves training (leaf tensors with gradients) and
inference (``torch.no_grad``).  Shapes broadcast: a joint function applied to
``f`` of shape (..., T, 1, J) and ``g`` of shape (..., 1, U+1, J) yields a full
lattice.

Parameter groups (``V`` = vocabulary size, ``J`` = joint width):

* ``enc.*``         recurrent encoder and its output projection to ``f_t``
* ``pred.*``        baseline prediction network, output ``g_u``
* ``joint.*``       baseline joint, ``V + 1`` logits
* ``blank.*``       FNT blank predictor, output ``g^b_u``
* ``joint_blank.*`` FNT scalar blank logit
* ``vocab.*``       vocabulary predictor (the internal LM); also the whole of an external LM
* ``enc_vocab.*``   encoder-side vocabulary projection ``d_t^v`` (width ``V + 1`` when improved)
* ``gamma``         LM weight of the improved FNT
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from fnt_lab.errors import FNTError
from fnt_lab.nncore import (DTYPE, ParameterArchive, affine, init_uniform, log_softmax,
                            recurrent_sequence, recurrent_step, relu)

VARIANTS = ("baseline", "fnt_standard", "fnt_improved", "lm")
FNT_VARIANTS = ("fnt_standard", "fnt_improved")

Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    vocab_size: int
    feature_dim: int = 16
    enc_layers: int = 2
    enc_hidden: int = 64
    pred_layers: int = 1
    pred_hidden: int = 64
    embed_dim: int = 32
    joint_dim: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise FNTError("bad-variant", self.variant)
        if self.vocab_size < 2:
            raise FNTError("vocab-too-small", str(self.vocab_size))
        for name in ("feature_dim", "enc_layers", "enc_hidden", "pred_layers",
                     "pred_hidden", "embed_dim", "joint_dim"):
            if getattr(self, name) < 1:
                raise FNTError("bad-config", f"{name} must be >= 1")

    @property
    def is_fnt(self) -> bool:
        return self.variant in FNT_VARIANTS


@dataclass
class ModelState:
    config: ModelConfig
    params: ParameterArchive
    frozen: frozenset = field(default_factory=frozenset)

    def tensors(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        out = {}
        for name, arr in self.params.items():
            t = torch.from_numpy(arr)
            if requires_grad and name not in self.frozen:
                t.requires_grad_(True)
            out[name] = t
        return out

    def copy(self) -> "ModelState":
        return ModelState(self.config,
                          ParameterArchive((k, v.copy()) for k, v in self.params.items()),
                          self.frozen)


# ---------------------------------------------------------------------------
# parameter layout


def _recurrent_shapes(prefix: str, n_layers: int, in_dim: int, hidden: int):
    shapes = {}
    for i in range(n_layers):
        fan_in = in_dim + hidden
        shapes[f"{prefix}.{i}.W_x"] = ((2 * hidden, in_dim), fan_in)
        shapes[f"{prefix}.{i}.W_h"] = ((2 * hidden, hidden), fan_in)
        shapes[f"{prefix}.{i}.b"] = ((2 * hidden,), fan_in)
        in_dim = hidden
    return shapes


def _predictor_shapes(prefix: str, cfg: ModelConfig):
    shapes = {f"{prefix}.embed": ((cfg.vocab_size + 1, cfg.embed_dim), 1)}
    shapes.update(_recurrent_shapes(prefix, cfg.pred_layers, cfg.embed_dim, cfg.pred_hidden))
    return shapes


def _linear(name: str, out_dim: int, in_dim: int):
    return {f"{name}.W": ((out_dim, in_dim), in_dim), f"{name}.b": ((out_dim,), in_dim)}


def vocab_predictor_shapes(cfg: ModelConfig) -> dict:
    shapes = _predictor_shapes("vocab", cfg)
    shapes.update(_linear("vocab.proj", cfg.vocab_size, cfg.pred_hidden))
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Ordered ``name -> (shape, fan_in)`` for every parameter of ``cfg.variant``."""
    V, J = cfg.vocab_size, cfg.joint_dim
    if cfg.variant == "lm":
        return vocab_predictor_shapes(cfg)
    shapes = _recurrent_shapes("enc", cfg.enc_layers, cfg.feature_dim, cfg.enc_hidden)
    shapes.update(_linear("enc.out", J, cfg.enc_hidden))
    if cfg.variant == "baseline":
        shapes.update(_predictor_shapes("pred", cfg))
        shapes.update(_linear("pred.out", J, cfg.pred_hidden))
        shapes.update(_linear("joint", V + 1, J))
        return shapes
    shapes.update(_predictor_shapes("blank", cfg))
    shapes.update(_linear("blank.out", J, cfg.pred_hidden))
    shapes.update(_linear("joint_blank", 1, J))
    shapes.update(vocab_predictor_shapes(cfg))
    width = V + 1 if cfg.variant == "fnt_improved" else V
    shapes.update(_linear("enc_vocab", width, J))
    if cfg.variant == "fnt_improved":
        shapes["gamma"] = ((1,), 1)
    return shapes


def init_model(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Uniform(+-1/sqrt(fan_in)) initialisation in a fixed name order; gamma = 1."""
    rng = np.random.default_rng(seed)
    params = ParameterArchive()
    for name, (shape, fan_in) in param_shapes(cfg).items():
        if name == "gamma":
            params[name] = np.ones(shape)
        else:
            params[name] = init_uniform(rng, shape, fan_in)
    return ModelState(cfg, params)


def vocab_param_names(cfg: ModelConfig) -> list[str]:
    return list(vocab_predictor_shapes(cfg))


# ---------------------------------------------------------------------------
# encoder and predictors


def _layer(P: Params, prefix: str, i: int) -> dict[str, torch.Tensor]:
    return {k: P[f"{prefix}.{i}.{k}"] for k in ("W_x", "W_h", "b")}


def encoder_forward(P: Params, cfg: ModelConfig, x: torch.Tensor) -> torch.Tensor:
    """(..., T, D) features -> (..., T, J) encoder outputs ``f_t``."""
    if x.shape[-1] != cfg.feature_dim:
        raise FNTError("shape-mismatch", f"features have D={x.shape[-1]}, model expects {cfg.feature_dim}")
    h = x
    for i in range(cfg.enc_layers):
        h, _ = recurrent_sequence(h, _layer(P, "enc", i))
    return affine(h, P["enc.out.W"], P["enc.out.b"])


def predictor_forward(P: Params, cfg: ModelConfig, prefix: str, tokens: torch.Tensor) -> torch.Tensor:
    """Hidden outputs for positions u = 0..U given (..., U) token ids; SOS is id V."""
    sos = torch.full(tokens.shape[:-1] + (1,), cfg.vocab_size, dtype=torch.long)
    ids = torch.cat([sos, tokens.long()], dim=-1)
    h = P[f"{prefix}.embed"][ids]
    for i in range(cfg.pred_layers):
        h, _ = recurrent_sequence(h, _layer(P, prefix, i))
    return h


def predictor_step(P: Params, cfg: ModelConfig, prefix: str,
                   states: list[torch.Tensor] | None, token: int) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Advance a predictor by one input token (``None`` states = fresh start, feed SOS)."""
    if states is None:
        states = [torch.zeros(cfg.pred_hidden, dtype=DTYPE) for _ in range(cfg.pred_layers)]
        token = cfg.vocab_size
    h = P[f"{prefix}.embed"][int(token)]
    new_states = []
    for i, s in enumerate(states):
        s, h = recurrent_step(s, h, _layer(P, prefix, i))
        new_states.append(s)
    return new_states, h


def pred_output(P: Params, prefix: str, h: torch.Tensor) -> torch.Tensor:
    """Project predictor hidden states to the joint space (``g_u`` / ``g^b_u``)."""
    return affine(h, P[f"{prefix}.out.W"], P[f"{prefix}.out.b"])


def vocab_head(P: Params, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``d^v_u = W_pred relu(g^v_u) + b_pred`` and ``z^v_u = log_softmax(d^v_u)``."""
    d = affine(relu(h), P["vocab.proj.W"], P["vocab.proj.b"])
    return d, log_softmax(d)


# ---------------------------------------------------------------------------
# joints


def joint_baseline(f: torch.Tensor, g: torch.Tensor, P: Params) -> torch.Tensor:
    """``W relu(f_t + g_u) + b``: V+1 logits, blank first."""
    return affine(relu(f + g), P["joint.W"], P["joint.b"])


def joint_blank(f: torch.Tensor, g_blank: torch.Tensor, P: Params) -> torch.Tensor:
    """Scalar blank logit ``W^b relu(f_t + g^b_u) + b^b``."""
    return affine(relu(f + g_blank), P["joint_blank.W"], P["joint_blank.b"])[..., 0]


def encoder_vocab_logits(f: torch.Tensor, P: Params) -> torch.Tensor:
    """``d_t^v = W_enc relu(f_t) + b_enc``."""
    return affine(relu(f), P["enc_vocab.W"], P["enc_vocab.b"])


def joint_vocab_standard(f: torch.Tensor, z_vocab: torch.Tensor, P: Params) -> torch.Tensor:
    return encoder_vocab_logits(f, P) + z_vocab


def joint_vocab_improved(f: torch.Tensor, z_vocab: torch.Tensor, P: Params,
                         gamma: torch.Tensor | None = None) -> torch.Tensor:
    """Acoustic log-probs without the CTC blank plus ``gamma`` times the LM log-probs."""
    gamma = P["gamma"] if gamma is None else gamma
    z_t = log_softmax(encoder_vocab_logits(f, P))
    return z_t[..., :-1] + gamma * z_vocab


def assemble_output(z_blank: torch.Tensor, z_vocab: torch.Tensor) -> torch.Tensor:
    """log_softmax of ``[z^b; z^v]``; blank at index 0."""
    return log_softmax(torch.cat([z_blank.unsqueeze(-1), z_vocab], dim=-1))


def ctc_log_probs(f: torch.Tensor, P: Params) -> torch.Tensor:
    """Encoder CTC head: (..., T, V+1) log-probs, CTC blank last."""
    return log_softmax(encoder_vocab_logits(f, P))


# ---------------------------------------------------------------------------
# full lattice


def lattice(P: Params, cfg: ModelConfig, f: torch.Tensor, tokens: torch.Tensor,
            vocab_override: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Output log-distributions for every (t, u).

    Args:
        f: (..., T, J) encoder outputs.
        tokens: (..., U) target ids.
        vocab_override: optional (..., U+1, V) replacement for ``z^v_u`` (n-gram hook).

    Returns:
        dict with ``log_probs`` (..., T, U+1, V+1), and for FNT variants
        ``vocab_log_probs`` (..., U+1, V) and, when improved, ``ctc_log_probs``.
    """
    out = {}
    fe = f.unsqueeze(-2)                                    # (..., T, 1, J)
    if cfg.variant == "baseline":
        g = pred_output(P, "pred", predictor_forward(P, cfg, "pred", tokens))
        out["log_probs"] = log_softmax(joint_baseline(fe, g.unsqueeze(-3), P))
        return out
    if not cfg.is_fnt:
        raise FNTError("wrong-variant", cfg.variant)
    g_b = pred_output(P, "blank", predictor_forward(P, cfg, "blank", tokens))
    z_b = joint_blank(fe, g_b.unsqueeze(-3), P)             # (..., T, U+1)
    _, z_u = vocab_head(P, predictor_forward(P, cfg, "vocab", tokens))
    out["vocab_log_probs"] = z_u
    if vocab_override is not None:
        z_u = vocab_override
    if cfg.variant == "fnt_standard":
        z_v = encoder_vocab_logits(fe, P) + z_u.unsqueeze(-3)
    else:
        z_t = ctc_log_probs(f, P)
        out["ctc_log_probs"] = z_t
        z_v = z_t[..., :-1].unsqueeze(-2) + P["gamma"] * z_u.unsqueeze(-3)
    out["log_probs"] = assemble_output(z_b, z_v)
    return out


# ---------------------------------------------------------------------------
# numpy-facing convenience wrappers


def _as_tokens(prefix: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor(np.asarray(prefix, dtype=np.int64).reshape(-1))


def encode(m: ModelState, feats: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return encoder_forward(m.tensors(), m.config, torch.as_tensor(np.asarray(feats, dtype=np.float64))).numpy()


def predict_blank(m: ModelState, prefix: Sequence[int]) -> np.ndarray:
    """``g^b_u`` rows for u = 0..len(prefix)."""
    if not m.config.is_fnt:
        raise FNTError("wrong-variant", f"{m.config.variant} has no blank predictor")
    with torch.no_grad():
        P = m.tensors()
        return pred_output(P, "blank", predictor_forward(P, m.config, "blank", _as_tokens(prefix))).numpy()


def predict_vocab_logits(m: ModelState, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """``(d^v, z^v)``, each (len(prefix)+1, V); row u predicts the token after prefix[:u]."""
    if not (m.config.is_fnt or m.config.variant == "lm"):
        raise FNTError("wrong-variant", f"{m.config.variant} has no vocabulary predictor")
    with torch.no_grad():
        P = m.tensors()
        d, z = vocab_head(P, predictor_forward(P, m.config, "vocab", _as_tokens(prefix)))
        return d.numpy(), z.numpy()


def ctc_head(m: ModelState, f: np.ndarray) -> np.ndarray:
    """(T, V+1) CTC log-probs from encoder outputs ``f`` (see :func:`encode`)."""
    if m.config.variant != "fnt_improved":
        raise FNTError("wrong-variant", "CTC head exists only on fnt_improved")
    with torch.no_grad():
        return ctc_log_probs(torch.as_tensor(f), m.tensors()).numpy()


def model_lattice(m: ModelState, feats: np.ndarray, tokens: Sequence[int],
                  vocab_override: np.ndarray | None = None) -> np.ndarray:
    """(T, U+1, V+1) output lattice for a single utterance."""
    with torch.no_grad():
        P = m.tensors()
        f = encoder_forward(P, m.config, torch.as_tensor(np.asarray(feats, dtype=np.float64)))
        override = None if vocab_override is None else torch.as_tensor(vocab_override)
        return lattice(P, m.config, f, _as_tokens(tokens), override)["log_probs"].numpy()


# ---------------------------------------------------------------------------
# persistence


def save_model(m: ModelState, directory: str | Path) -> None:
    directory = Path(directory)
    m.params.save(directory)
    lines = [f"{k} = {v}" for k, v in asdict(m.config).items()]
    (directory / "model.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(directory: str | Path) -> ModelState:
    directory = Path(directory)
    fields = {}
    for line in (directory / "model.cfg").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            fields[k] = v if k == "variant" else int(v)
    cfg = ModelConfig(**fields)
    params = ParameterArchive.load(directory)
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise FNTError("bad-checkpoint", "parameter names do not match model.cfg")
    return ModelState(cfg, params)
