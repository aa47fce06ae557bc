"""The model x stage experiment matrix on the synthetic two-domain task.

Model recipes:

    B0  baseline transducer
    F0  standard FNT
    F1  improved FNT (log-softmax vocabulary joint, CTC on the encoder)
    F2  F1 with the vocabulary predictor seeded from an external LM, kept fixed
    F3  F1 with the vocabulary predictor seeded from an external LM, updated

Stages: ``base`` (as trained), ``adapted`` (text-only fine-tuning of the
vocabulary predictor) and ``ngram`` (base model decoded with an n-gram built
on the adaptation text).  WER is reported on the general and the adaptation
test sets plus their simple average.
"""

from __future__ import annotations

import csv
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fnt_lab.adaptation import AdaptConfig, adapt
from fnt_lab.config import RunConfig
from fnt_lab.decoding import DecodeOptions, decode
from fnt_lab.errors import FNTError
from fnt_lab.evaluation import simple_average, wer
from fnt_lab.model import ModelConfig, ModelState, init_model
from fnt_lab.ngram import NGramModel, build_ngram
from fnt_lab.synthdata import (WORDS, Utterance, adaptation_domain, general_domain,
                               make_utterances, sample_text)
from fnt_lab.tokenizer import Vocabulary, build_vocabulary, decode as detokenize, encode
from fnt_lab.training import TrainConfig, pretrain_lm, seed_vocab_predictor, train_model

log = logging.getLogger(__name__)

RECIPES = {
    "B0": ("baseline", "none"),
    "F0": ("fnt_standard", "none"),
    "F1": ("fnt_improved", "none"),
    "F2": ("fnt_improved", "seed_fixed"),
    "F3": ("fnt_improved", "seed_updated"),
}
STAGES = ("base", "adapted", "ngram")
SETS = ("general", "adapt")


def cell_seed(seed: int, cell: str) -> int:
    """Seed for one experiment cell, a function of the global seed and the cell id only."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(cell.encode("utf-8"))])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# data


@dataclass
class Corpus:
    vocab: Vocabulary
    train: list[Utterance]
    test_general: list[Utterance]
    test_adapt: list[Utterance]
    adapt_text: list[str]
    lm_text: list[str]

    def tokens(self, lines: Sequence[str]) -> list[list[int]]:
        return [encode(self.vocab, line) for line in lines]


def fixture_vocabulary(mode: str) -> Vocabulary:
    return build_vocabulary(WORDS if mode == "word" else [" ".join(WORDS)], mode=mode)


def make_corpus(cfg: RunConfig) -> Corpus:
    """Generate every data set of a run from ``cfg.run.seed``."""
    d, seed = cfg.data, cfg.run.seed
    v = fixture_vocabulary(d.unit_mode)
    gen, ad = general_domain(), adaptation_domain()

    def text(domain, name, n):
        return sample_text(domain.with_seed(cell_seed(seed, f"text/{name}")), n)

    def utts(lines, name):
        return make_utterances(lines, v, name, cell_seed(seed, f"feats/{name}"),
                               (d.dur_min, d.dur_max), d.noise_sd, d.feature_dim)

    return Corpus(
        vocab=v,
        train=utts(text(gen, "train", d.n_train), "train"),
        test_general=utts(text(gen, "test_general", d.n_test), "test_general"),
        test_adapt=utts(text(ad, "test_adapt", d.n_test), "test_adapt"),
        adapt_text=text(ad, "adapt_text", d.n_adapt_text),
        lm_text=text(gen, "lm_text", d.n_lm_text),
    )


# ---------------------------------------------------------------------------
# building blocks shared with the command line


def model_config(cfg: RunConfig, vocab_size: int, variant: str | None = None) -> ModelConfig:
    m = cfg.model
    return ModelConfig(variant or m.variant, vocab_size, feature_dim=cfg.data.feature_dim,
                       enc_layers=m.enc_layers, enc_hidden=m.enc_hidden,
                       pred_layers=m.pred_layers, pred_hidden=m.pred_hidden,
                       embed_dim=m.embed_dim, joint_dim=m.joint_dim)


def train_config(cfg: RunConfig, seed: int, lm_mode: str | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lam=t.lam, beta=t.beta, lr=t.lr, betas=(t.beta1, t.beta2), eps=t.eps,
                       epochs=t.epochs, batch_size=t.batch_size, seed=seed,
                       lm_mode=lm_mode or t.lm_mode)


def lm_train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(lr=cfg.lm.lr, epochs=cfg.lm.epochs, batch_size=cfg.lm.batch_size, seed=seed)


def adapt_config(cfg: RunConfig, seed: int, alpha: float | None = None) -> AdaptConfig:
    a = cfg.adapt
    return AdaptConfig(alpha=a.alpha if alpha is None else alpha, lr=a.lr, epochs=a.epochs,
                       batch_size=a.batch_size, seed=seed)


def decode_options(cfg: RunConfig, ngram: NGramModel | None = None,
                   weight: float | None = None) -> DecodeOptions:
    d = cfg.decode
    return DecodeOptions(d.mode, d.beam_size, d.max_symbols_per_frame, ngram,
                         cfg.ngram.weight if weight is None else weight)


def transcribe(m: ModelState, utts: Sequence[Utterance], v: Vocabulary,
               opts: DecodeOptions) -> list[str]:
    return [detokenize(v, decode(m, u.feats, opts)) for u in utts]


def set_wer(m: ModelState, utts: Sequence[Utterance], v: Vocabulary, opts: DecodeOptions) -> float:
    return wer([u.text for u in utts], transcribe(m, utts, v, opts)).wer


def train_recipe(model_id: str, corpus: Corpus, cfg: RunConfig,
                 lm: ModelState | None) -> ModelState:
    """Initialise and train one recipe of :data:`RECIPES`.

    Recipes that share an architecture start from the same initial weights,
    so differences between them come from the recipe alone.
    """
    if model_id not in RECIPES:
        raise FNTError("bad-config", f"unknown model id {model_id!r}")
    variant, lm_mode = RECIPES[model_id]
    seed = cell_seed(cfg.run.seed, f"init/{variant}")
    m = init_model(model_config(cfg, corpus.vocab.size, variant), seed)
    if lm_mode != "none":
        if lm is None:
            raise FNTError("bad-config", f"{model_id} needs an external LM")
        m = seed_vocab_predictor(m, lm, lm_mode)
    m, _ = train_model(m, corpus.train, train_config(cfg, seed, lm_mode))
    return m


def pretrain_external_lm(corpus: Corpus, cfg: RunConfig) -> ModelState:
    mcfg = model_config(cfg, corpus.vocab.size, "fnt_improved")
    lm, report = pretrain_lm(corpus.tokens(corpus.lm_text), mcfg,
                             lm_train_config(cfg, cell_seed(cfg.run.seed, "lm")),
                             held_out=[u.tokens for u in corpus.test_general])
    log.info("external LM held-out perplexity %.3f", report.perplexity)
    return lm


# ---------------------------------------------------------------------------
# the matrix


@dataclass
class CellResult:
    model_id: str
    wers: dict[str, dict[str, float]]   # stage -> set -> WER
    seconds: float

    def average(self, stage: str) -> float | None:
        row = self.wers.get(stage)
        return simple_average([row[s] for s in SETS]) if row else None


def run_cell(model_id: str, corpus: Corpus, cfg: RunConfig, lm: ModelState | None,
             ngram: NGramModel) -> CellResult:
    t0 = time.perf_counter()
    m = train_recipe(model_id, corpus, cfg, lm)
    v = corpus.vocab
    sets = {"general": corpus.test_general, "adapt": corpus.test_adapt}
    plain = decode_options(cfg)
    wers = {"base": {k: set_wer(m, u, v, plain) for k, u in sets.items()}}
    if m.config.is_fnt:
        acfg = adapt_config(cfg, cell_seed(cfg.run.seed, f"adapt/{model_id}"))
        adapted, _ = adapt(m, corpus.tokens(corpus.adapt_text), acfg)
        wers["adapted"] = {k: set_wer(adapted, u, v, plain) for k, u in sets.items()}
        fused = decode_options(cfg, ngram)
        wers["ngram"] = {k: set_wer(m, u, v, fused) for k, u in sets.items()}
    return CellResult(model_id, wers, time.perf_counter() - t0)


def _run_cell_job(args):
    return run_cell(*args)


def run_experiment(cfg: RunConfig, models: Sequence[str] | None = None,
                   jobs: int = 1, corpus: Corpus | None = None) -> list[CellResult]:
    """Train, adapt and score every requested recipe; results follow ``models`` order.

    Cells are independent given the corpus, the external LM and the n-gram,
    so ``jobs > 1`` runs them in worker processes without changing results.
    """
    models = list(models or cfg.experiment.models.split())
    for mid in models:
        if mid not in RECIPES:
            raise FNTError("bad-config", f"unknown model id {mid!r}")
    corpus = corpus or make_corpus(cfg)
    needs_lm = any(RECIPES[mid][1] != "none" for mid in models)
    lm = pretrain_external_lm(corpus, cfg) if needs_lm else None
    ngram = build_ngram(corpus.tokens(corpus.adapt_text), corpus.vocab.size,
                        cfg.ngram.order, cfg.ngram.discount)
    args = [(mid, corpus, cfg, lm, ngram) for mid in models]
    if jobs > 1 and len(models) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_job, args))
    return [_run_cell_job(a) for a in args]


# ---------------------------------------------------------------------------
# tables

COLUMNS = [(stage, s) for stage in STAGES for s in (*SETS, "average")]


def table_rows(results: Sequence[CellResult]) -> list[dict]:
    rows = []
    for r in results:
        row = {"model": r.model_id}
        for stage, s in COLUMNS:
            if stage not in r.wers:
                row[f"{stage}_{s}"] = None
            elif s == "average":
                row[f"{stage}_{s}"] = round(r.average(stage), 2)
            else:
                row[f"{stage}_{s}"] = round(r.wers[stage][s], 2)
        rows.append(row)
    return rows


def markdown_table(results: Sequence[CellResult]) -> str:
    header = ["model"] + [f"{stage} {s}" for stage, s in COLUMNS]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table_rows(results):
        cells = [row["model"]] + ["-" if row[f"{st}_{s}"] is None else f"{row[f'{st}_{s}']:.2f}"
                                  for st, s in COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_tables(results: Sequence[CellResult], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.md").write_text(markdown_table(results), encoding="utf-8")
    rows = table_rows(results)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: ("" if v is None else v) for k, v in row.items()} for row in rows)
