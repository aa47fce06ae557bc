"""Greedy and beam-search decoding for all model variants.

An optional n-gram hook replaces the vocabulary predictor output ``z^v_u`` by
its probability-domain interpolation with an n-gram model before it enters
the vocabulary joint, so for the improved FNT it is scaled by gamma like the
un-interpolated output.  The hook exists only for FNT variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from fnt_lab.errors import FNTError
from fnt_lab.losses import transducer_loss
from fnt_lab.model import (ModelState, assemble_output, encoder_forward, encoder_vocab_logits,
                           joint_baseline, joint_blank, model_lattice, pred_output,
                           predict_vocab_logits, predictor_step, vocab_head)
from fnt_lab.ngram import NGramModel, interpolate, interpolate_rows
from fnt_lab.nncore import log_softmax

MODES = ("greedy", "beam")


@dataclass
class DecodeOptions:
    mode: str = "greedy"
    beam_size: int = 4
    max_symbols_per_frame: int = 5
    ngram: NGramModel | None = None
    ngram_weight: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise FNTError("bad-config", f"decode mode {self.mode!r}")
        if self.beam_size < 1 or self.max_symbols_per_frame < 1:
            raise FNTError("bad-config", "beam_size and max_symbols_per_frame must be >= 1")
        if not 0.0 <= self.ngram_weight <= 1.0:
            raise FNTError("bad-config", f"ngram_weight {self.ngram_weight}")


@dataclass
class DecodeHypothesis:
    """Search state.  Baseline models keep their single predictor in ``blank_state``."""
    tokens: tuple[int, ...]
    log_score: float
    blank_state: list = field(default=None, repr=False)
    vocab_state: list = field(default=None, repr=False)


@dataclass
class _PrefixEntry:
    blank_state: list
    g: torch.Tensor
    vocab_state: list = None
    z_vocab: torch.Tensor = None


class StepScorer:
    """Output distributions ``log P(. | t, prefix)`` with per-prefix predictor memo."""

    def __init__(self, m: ModelState, feats: np.ndarray, opts: DecodeOptions):
        self.m = m
        self.cfg = m.config
        if self.cfg.variant == "lm":
            raise FNTError("wrong-variant", "cannot decode with a standalone LM")
        self.opts = opts
        self.hook = opts.ngram is not None
        if self.hook and not self.cfg.is_fnt:
            raise FNTError("wrong-variant", "n-gram interpolation needs an FNT model")
        self.P = m.tensors()
        with torch.no_grad():
            self.f = encoder_forward(self.P, self.cfg, torch.as_tensor(np.asarray(feats, dtype=np.float64)))
            if self.cfg.variant == "fnt_improved":
                self.acoustic = log_softmax(encoder_vocab_logits(self.f, self.P))[:, :-1]
            elif self.cfg.variant == "fnt_standard":
                self.acoustic = encoder_vocab_logits(self.f, self.P)
        self._memo: dict[tuple[int, ...], _PrefixEntry] = {}

    @property
    def T(self) -> int:
        return self.f.shape[0]

    def entry(self, tokens: tuple[int, ...]) -> _PrefixEntry:
        hit = self._memo.get(tokens)
        if hit is not None:
            return hit
        P, cfg = self.P, self.cfg
        with torch.no_grad():
            if tokens:
                parent = self.entry(tokens[:-1])
                last = tokens[-1]
                b_prev, v_prev = parent.blank_state, parent.vocab_state
            else:
                last, b_prev, v_prev = None, None, None
            prefix = "pred" if cfg.variant == "baseline" else "blank"
            b_state, h = predictor_step(P, cfg, prefix, b_prev, last)
            e = _PrefixEntry(b_state, pred_output(P, prefix, h))
            if cfg.is_fnt:
                e.vocab_state, hv = predictor_step(P, cfg, "vocab", v_prev, last)
                z = vocab_head(P, hv)[1]
                if self.hook:
                    z = torch.from_numpy(interpolate(z.numpy(), self.opts.ngram, tokens,
                                                     self.opts.ngram_weight))
                e.z_vocab = z
        self._memo[tokens] = e
        return e

    def log_dist(self, t: int, tokens: tuple[int, ...]) -> np.ndarray:
        """(V+1,) log-distribution, blank at 0."""
        e = self.entry(tokens)
        P = self.P
        with torch.no_grad():
            if self.cfg.variant == "baseline":
                return log_softmax(joint_baseline(self.f[t], e.g, P)).numpy()
            z_b = joint_blank(self.f[t], e.g, P)
            if self.cfg.variant == "fnt_improved":
                z_v = self.acoustic[t] + P["gamma"] * e.z_vocab
            else:
                z_v = self.acoustic[t] + e.z_vocab
            return assemble_output(z_b, z_v).numpy()

    def hypothesis(self, tokens: tuple[int, ...], score: float) -> DecodeHypothesis:
        e = self.entry(tokens)
        return DecodeHypothesis(tokens, score, e.blank_state, e.vocab_state)


def greedy_decode(m: ModelState, feats: np.ndarray, opts: DecodeOptions | None = None) -> list[int]:
    """Frame-synchronous argmax search; ties go to the lowest index (blank first)."""
    opts = opts or DecodeOptions()
    sc = StepScorer(m, feats, opts)
    tokens: tuple[int, ...] = ()
    for t in range(sc.T):
        for _ in range(opts.max_symbols_per_frame):
            k = int(np.argmax(sc.log_dist(t, tokens)))
            if k == 0:
                break
            tokens = tokens + (k - 1,)
    return list(tokens)


def _merge(pool: dict, tokens: tuple, score: float) -> None:
    old = pool.get(tokens)
    pool[tokens] = score if old is None else float(np.logaddexp(old, score))


def beam_decode(m: ModelState, feats: np.ndarray,
                opts: DecodeOptions | None = None) -> list[DecodeHypothesis]:
    """Frame-synchronous beam search returning the final beam, best first.

    Within a frame, emission rounds alternate with pruning: every active
    hypothesis proposes its blank continuation (which closes it for this frame)
    and its ``beam_size`` best token continuations; closed and open candidates
    then compete for ``beam_size`` slots.  After ``max_symbols_per_frame``
    rounds open hypotheses move to the next frame as they are.  Hypotheses
    with equal token sequences are merged by log-addition.
    """
    opts = opts or DecodeOptions(mode="beam")
    sc = StepScorer(m, feats, opts)
    beam = opts.beam_size
    hyps: dict[tuple[int, ...], float] = {(): 0.0}
    for t in range(sc.T):
        closed: dict[tuple[int, ...], float] = {}
        active = hyps
        for _ in range(opts.max_symbols_per_frame):
            open_cands: dict[tuple[int, ...], float] = {}
            for toks, s in active.items():
                lp = sc.log_dist(t, toks)
                _merge(closed, toks, s + lp[0])
                for k in np.argsort(-lp[1:], kind="stable")[:beam]:
                    _merge(open_cands, toks + (int(k),), s + lp[k + 1])
            pool = [(s, 0, toks) for toks, s in closed.items()]
            pool += [(s, 1, toks) for toks, s in open_cands.items()]
            pool.sort(key=lambda c: -c[0])
            kept = pool[:beam]
            closed = {toks: s for s, kind, toks in kept if kind == 0}
            active = {toks: s for s, kind, toks in kept if kind == 1}
            if not active:
                break
        else:
            for toks, s in active.items():
                _merge(closed, toks, s)
        hyps = dict(sorted(closed.items(), key=lambda kv: -kv[1])[:beam])
    ranked = sorted(hyps.items(), key=lambda kv: -kv[1])
    return [sc.hypothesis(toks, float(s)) for toks, s in ranked]


def decode(m: ModelState, feats: np.ndarray, opts: DecodeOptions | None = None) -> list[int]:
    opts = opts or DecodeOptions()
    if opts.mode == "beam":
        return list(beam_decode(m, feats, opts)[0].tokens)
    return greedy_decode(m, feats, opts)


def score_sequence(m: ModelState, feats: np.ndarray, tokens: Sequence[int],
                   opts: DecodeOptions | None = None) -> float:
    """log P(tokens | feats): the negated transducer loss of the model lattice."""
    tokens = [int(t) for t in tokens]
    override = None
    if opts is not None and opts.ngram is not None:
        if not m.config.is_fnt:
            raise FNTError("wrong-variant", "n-gram interpolation needs an FNT model")
        _, z = predict_vocab_logits(m, tokens)
        override = interpolate_rows(z, opts.ngram, tokens, opts.ngram_weight)
    lat = model_lattice(m, feats, tokens, override)
    return -transducer_loss(lat, tokens)[0]
