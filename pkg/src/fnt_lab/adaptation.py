"""Text-only adaptation of the vocabulary predictor with a KL anchor.

Per batch the objective is ``CE + alpha * KL(adapted || baseline)`` on the
adaptation sentences, where the baseline distributions come from a frozen
copy of the predictor taken when adaptation starts.  Everything outside the
vocabulary predictor (encoder, blank predictor, joints, gamma) is untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from fnt_lab.errors import FNTError
from fnt_lab.losses import torch_kl_divergence, torch_lm_cross_entropy
from fnt_lab.model import ModelState, predictor_forward, vocab_head, vocab_param_names
from fnt_lab.nncore import AdamMoments, ParameterArchive, adam_step
from fnt_lab.training import _pad_tokens, vocab_log_probs_for


@dataclass
class AdaptConfig:
    alpha: float = 0.1
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise FNTError("bad-config", "alpha must be >= 0")


def adaptation_objective(P, m: ModelState, batch: Sequence[Sequence[int]],
                         baseline: Sequence[np.ndarray] | None, alpha: float) -> dict:
    """Batch means of CE and KL plus ``total = CE + alpha * KL``.

    With ``alpha == 0`` the KL term is not evaluated at all.
    """
    _, z = vocab_head(P, predictor_forward(P, m.config, "vocab", _pad_tokens(batch)))
    ce, kl = [], []
    for i, s in enumerate(batch):
        rows = z[i, :len(s)]
        ce.append(torch_lm_cross_entropy(rows, s))
        if alpha > 0:
            kl.append(torch_kl_divergence(rows, baseline[i]))
    CE = torch.stack(ce).mean()
    if alpha > 0:
        KL = torch.stack(kl).mean()
        return {"CE": CE, "KL": KL, "total": CE + alpha * KL}
    return {"CE": CE, "KL": torch.zeros_like(CE), "total": CE}


def adapt(m: ModelState, adaptation_text: Sequence[Sequence[int]],
          cfg: AdaptConfig) -> tuple[ModelState, list[dict]]:
    """Fine-tune ``vocab.*`` on tokenised adaptation sentences.

    Returns the adapted model (a full parameter set) and per-epoch mean CE/KL.
    """
    if not m.config.is_fnt:
        raise FNTError("wrong-variant", "adaptation needs an FNT model")
    sentences = [list(s) for s in adaptation_text if len(s) > 0]
    if not sentences:
        raise FNTError("empty-corpus", "no adaptation text")
    names = set(vocab_param_names(m.config))
    frozen = frozenset(set(m.params) - names)
    baseline = vocab_log_probs_for(m, sentences) if cfg.alpha > 0 else None

    params = dict(m.params)
    moments = AdamMoments()
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"CE": 0.0, "KL": 0.0, "total": 0.0}
        for start in range(0, len(sentences), cfg.batch_size):
            batch = sentences[start:start + cfg.batch_size]
            ref = baseline[start:start + cfg.batch_size] if baseline is not None else None
            P = ModelState(m.config, ParameterArchive(params), frozen).tensors(requires_grad=True)
            obj = adaptation_objective(P, m, batch, ref, cfg.alpha)
            if not torch.isfinite(obj["total"]):
                raise FNTError("diverged", f"adaptation epoch {epoch}")
            obj["total"].backward()
            step += 1
            grads = {k: P[k].grad.numpy().copy() for k in names if P[k].grad is not None}
            params, moments = adam_step(params, grads, moments, cfg.lr, step=step)
            for k in sums:
                sums[k] += float(obj[k].detach()) * len(batch)
        history.append({"epoch": epoch, **{k: v / len(sentences) for k, v in sums.items()}})
    return ModelState(m.config, ParameterArchive(params), m.frozen), history
