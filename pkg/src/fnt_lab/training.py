"""Training loops: transducer / FNT objectives, external LM pretraining, seeding.

The per-utterance objective is

    J = J_t + lam * CE + beta * J_ctc

where ``J_t`` is the transducer loss of the full lattice, ``CE`` the per-token
cross-entropy of the vocabulary predictor on the next token, and ``J_ctc`` the
CTC loss of the encoder head (improved FNT only).  A batch contributes the mean
of its utterance objectives.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from fnt_lab.errors import FNTError
from fnt_lab.losses import (ctc_required_frames, torch_ctc_loss, torch_lm_cross_entropy,
                            torch_transducer_loss)
from fnt_lab.model import (ModelConfig, ModelState, encoder_forward, init_model, lattice,
                           predictor_forward, vocab_head, vocab_param_names)
from fnt_lab.nncore import DTYPE, AdamMoments, ParameterArchive, adam_step
from fnt_lab.synthdata import Utterance

log = logging.getLogger(__name__)

LM_MODES = ("none", "seed_fixed", "seed_updated")


@dataclass
class TrainConfig:
    lam: float = 0.1
    beta: float = 0.1
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    lm_mode: str = "none"

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise FNTError("bad-config", "lam and beta must be >= 0")
        if self.lm_mode not in LM_MODES:
            raise FNTError("bad-config", f"lm_mode {self.lm_mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise FNTError("bad-config", "batch_size >= 1 and epochs >= 0 required")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    skipped_ctc: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "J_t", "CE", "J_ctc", "total"])
            for row in self.epochs:
                w.writerow([row["epoch"]] + [repr(row[k]) for k in ("J_t", "CE", "J_ctc", "total")])


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _pad_tokens(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    U = max((len(s) for s in seqs), default=0)
    out = np.zeros((len(seqs), U), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return torch.from_numpy(out)


def _pad_feats(feats: Sequence[np.ndarray]) -> torch.Tensor:
    T = max(f.shape[0] for f in feats)
    out = np.zeros((len(feats), T, feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, :f.shape[0]] = f
    return torch.from_numpy(out)


def compute_objective(P, mcfg: ModelConfig, cfg: TrainConfig,
                      batch: Sequence[Utterance]) -> dict:
    """Batch-mean objective and its components as scalar tensors.

    Utterances whose CTC target cannot fit in their frames are dropped from the
    batch when the CTC term is active; ``n_used`` counts the rest.
    """
    use_ce = mcfg.is_fnt and cfg.lam > 0
    use_ctc = mcfg.variant == "fnt_improved" and cfg.beta > 0
    if use_ctc:
        batch = [u for u in batch if ctc_required_frames(u.tokens) <= u.feats.shape[0]]
    zero = torch.zeros((), dtype=DTYPE)
    if not batch:
        return {"J_t": zero, "CE": zero, "J_ctc": zero, "total": zero, "n_used": 0}

    f = encoder_forward(P, mcfg, _pad_feats([u.feats for u in batch]))
    out = lattice(P, mcfg, f, _pad_tokens([u.tokens for u in batch]))
    jt, ce, jc = [], [], []
    for i, u in enumerate(batch):
        T, U = u.feats.shape[0], len(u.tokens)
        jt.append(torch_transducer_loss(out["log_probs"][i, :T, :U + 1], u.tokens))
        if use_ce and U > 0:
            ce.append(torch_lm_cross_entropy(out["vocab_log_probs"][i, :U], u.tokens))
        if use_ctc:
            jc.append(torch_ctc_loss(out["ctc_log_probs"][i, :T], u.tokens))
    n = len(batch)
    J_t = torch.stack(jt).sum() / n
    CE = torch.stack(ce).sum() / n if ce else zero
    J_ctc = torch.stack(jc).sum() / n if jc else zero
    total = J_t + cfg.lam * CE + cfg.beta * J_ctc
    return {"J_t": J_t, "CE": CE, "J_ctc": J_ctc, "total": total, "n_used": n}


def _trainable_grads(P: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    grads = {}
    for name, t in P.items():
        if t.requires_grad:
            g = t.grad
            grads[name] = np.zeros(t.shape) if g is None else g.numpy().copy()
    return grads


def train_model(m: ModelState, data: Sequence[Utterance], cfg: TrainConfig) -> tuple[ModelState, TrainLog]:
    """Adam over batches in manifest order for ``cfg.epochs`` epochs.

    Parameters listed in ``m.frozen`` are never updated.
    """
    if not data:
        raise FNTError("empty-data")
    params = dict(m.params)
    moments = AdamMoments()
    step = 0
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        sums = {"J_t": 0.0, "CE": 0.0, "J_ctc": 0.0, "total": 0.0}
        n_seen = 0
        for batch in _batches(data, cfg.batch_size):
            state = ModelState(m.config, ParameterArchive(params), m.frozen)
            P = state.tensors(requires_grad=True)
            obj = compute_objective(P, m.config, cfg, batch)
            tlog.skipped_ctc += len(batch) - obj["n_used"]
            if obj["n_used"] == 0:
                continue
            total = obj["total"]
            if not torch.isfinite(total):
                raise FNTError("diverged", f"epoch {epoch}, step {step + 1}")
            total.backward()
            step += 1
            params, moments = adam_step(params, _trainable_grads(P), moments,
                                        cfg.lr, cfg.betas, cfg.eps, step)
            for k in sums:
                sums[k] += float(obj[k].detach()) * obj["n_used"]
            n_seen += obj["n_used"]
        row = {"epoch": epoch, **{k: v / max(1, n_seen) for k, v in sums.items()}}
        tlog.epochs.append(row)
        log.info("epoch %d  J_t %.4f  CE %.4f  J_ctc %.4f  total %.4f",
                 epoch, row["J_t"], row["CE"], row["J_ctc"], row["total"])
    return ModelState(m.config, ParameterArchive(params), m.frozen), tlog


# ---------------------------------------------------------------------------
# language model


def lm_config_for(mcfg: ModelConfig) -> ModelConfig:
    """External-LM config whose vocabulary predictor matches ``mcfg``'s."""
    return ModelConfig("lm", mcfg.vocab_size, feature_dim=mcfg.feature_dim,
                       pred_layers=mcfg.pred_layers, pred_hidden=mcfg.pred_hidden,
                       embed_dim=mcfg.embed_dim)


def lm_batch_loss(P, mcfg: ModelConfig, sentences: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean over sentences of the per-token cross-entropy of the vocabulary predictor."""
    sentences = [s for s in sentences if len(s) > 0]
    _, z = vocab_head(P, predictor_forward(P, mcfg, "vocab", _pad_tokens(sentences)))
    losses = [torch_lm_cross_entropy(z[i, :len(s)], s) for i, s in enumerate(sentences)]
    return torch.stack(losses).mean()


def vocab_log_probs_for(m: ModelState, sentences: Sequence[Sequence[int]],
                        batch_size: int = 64) -> list[np.ndarray]:
    """Per sentence, the (U, V) next-token log-probs of the vocabulary predictor."""
    P = m.tensors()
    out = []
    with torch.no_grad():
        for batch in _batches(list(sentences), batch_size):
            _, z = vocab_head(P, predictor_forward(P, m.config, "vocab", _pad_tokens(batch)))
            out.extend(z[i, :len(s)].numpy() for i, s in enumerate(batch))
    return out


def lm_perplexity(m: ModelState, sentences: Sequence[Sequence[int]]) -> float:
    """exp of the token-weighted mean negative log-likelihood (no end-of-sentence event)."""
    nll, count = 0.0, 0
    for s, z in zip(sentences, vocab_log_probs_for(m, sentences)):
        if len(s):
            nll -= float(z[np.arange(len(s)), np.asarray(s)].sum())
            count += len(s)
    if count == 0:
        raise FNTError("empty-corpus")
    return math.exp(nll / count)


@dataclass
class LMReport:
    perplexity: float
    epoch_losses: list[float]


def pretrain_lm(corpus: Sequence[Sequence[int]], mcfg: ModelConfig, cfg: TrainConfig,
                held_out: Sequence[Sequence[int]] | None = None) -> tuple[ModelState, LMReport]:
    """Train a predictor-shaped LM with cross-entropy; report held-out perplexity."""
    corpus = [list(s) for s in corpus if len(s) > 0]
    if not corpus:
        raise FNTError("empty-corpus")
    lm = init_model(lm_config_for(mcfg) if mcfg.variant != "lm" else mcfg, cfg.seed)
    params = dict(lm.params)
    moments = AdamMoments()
    step = 0
    losses = []
    for epoch in range(cfg.epochs):
        total, n = 0.0, 0
        for batch in _batches(corpus, cfg.batch_size):
            P = ModelState(lm.config, ParameterArchive(params)).tensors(requires_grad=True)
            loss = lm_batch_loss(P, lm.config, batch)
            if not torch.isfinite(loss):
                raise FNTError("diverged", f"lm epoch {epoch + 1}")
            loss.backward()
            step += 1
            params, moments = adam_step(params, _trainable_grads(P), moments,
                                        cfg.lr, cfg.betas, cfg.eps, step)
            total += float(loss.detach()) * len(batch)
            n += len(batch)
        losses.append(total / n)
    lm = ModelState(lm.config, ParameterArchive(params))
    ppl = lm_perplexity(lm, held_out if held_out else corpus)
    return lm, LMReport(ppl, losses)


def seed_vocab_predictor(m: ModelState, lm: ModelState, mode: str = "updated") -> ModelState:
    """Copy the external LM into the vocabulary predictor.

    ``mode="fixed"`` freezes the copied parameters for later training;
    ``"updated"`` leaves them trainable.
    """
    mode = {"seed_fixed": "fixed", "seed_updated": "updated"}.get(mode, mode)
    if mode not in ("fixed", "updated"):
        raise FNTError("bad-config", f"seeding mode {mode!r}")
    if not m.config.is_fnt:
        raise FNTError("wrong-variant", "only FNT models have a vocabulary predictor")
    names = vocab_param_names(m.config)
    for name in names:
        if name not in lm.params or lm.params[name].shape != m.params[name].shape:
            got = lm.params[name].shape if name in lm.params else None
            raise FNTError("lm-shape-mismatch", f"{name}: {got} vs {m.params[name].shape}")
    params = ParameterArchive(m.params)
    for name in names:
        params[name] = lm.params[name].copy()
    frozen = set(m.frozen)
    if mode == "fixed":
        frozen.update(names)
    else:
        frozen.difference_update(names)
    return ModelState(m.config, params, frozen=frozenset(frozen))
