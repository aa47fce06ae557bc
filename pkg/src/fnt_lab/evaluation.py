"""WER scoring and adaptation-speed timing."""

from __future__ import annotations

import csv
import statistics
import timeit
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from fnt_lab.adaptation import AdaptConfig, adapt
from fnt_lab.errors import FNTError
from fnt_lab.ngram import build_ngram
from fnt_lab.tokenizer import encode


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / max(1, self.ref_words)

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_words + other.ref_words)


def align_counts(ref: Sequence[str], hyp: Sequence[str]) -> WerReport:
    """Minimum-edit alignment; among minimal alignments the one with most substitutions.

    That tie rule makes the counts canonical: swapping ``ref`` and ``hyp``
    keeps S and exchanges D with I.
    """
    n, m = len(ref), len(hyp)
    # cost packs (edits, -substitutions) into one integer compared lexicographically
    big = n + m + 1
    prev = [j * big for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [i * big] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if r == hyp[j - 1] else big - 1)
            cur[j] = min(diag, prev[j] + big, cur[j - 1] + big)
        prev = cur
    edits, neg_subs = divmod(prev[m], big)
    if neg_subs:
        edits, neg_subs = edits + 1, neg_subs - big
    subs = -neg_subs
    # |ref| - |hyp| = D - I and edits = S + D + I
    d_minus_i = n - m
    d_plus_i = edits - subs
    return WerReport(subs, (d_plus_i + d_minus_i) // 2, (d_plus_i - d_minus_i) // 2, n)


def wer(refs: Sequence[str], hyps: Sequence[str]) -> WerReport:
    """Aggregate word-level edit counts over aligned lines."""
    if len(refs) != len(hyps):
        raise FNTError("count-mismatch", f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = WerReport()
    for r, h in zip(refs, hyps):
        total = total + align_counts(r.split(), h.split())
    return total


def simple_average(wers: Sequence[float]) -> float:
    """Unweighted mean of per-set WERs."""
    return sum(wers) / len(wers)


@dataclass
class TimingReport:
    method: str
    corpus_words: int
    wall_seconds: float

    @property
    def seconds_per_1000_words(self) -> float:
        return 1000.0 * self.wall_seconds / max(1, self.corpus_words)


def time_adaptation(model, adaptation_text: Sequence[str], method: str, vocab,
                    adapt_cfg=None, ngram_order: int = 5, discount: float = 0.5,
                    repeats: int = 5) -> TimingReport:
    """Median wall time of the adaptation step alone over ``repeats`` runs.

    ``method="finetune"`` times :func:`fnt_lab.adaptation.adapt` with
    ``adapt_cfg``; ``method="ngram"`` times :func:`fnt_lab.ngram.build_ngram`.
    Tokenisation happens before the clock starts.
    """
    if not adaptation_text:
        raise FNTError("empty-corpus")
    sentences = [encode(vocab, line) for line in adaptation_text]
    if method == "finetune":
        cfg = adapt_cfg or AdaptConfig(epochs=1)
        def run():
            adapt(model, sentences, cfg)
    elif method == "ngram":
        def run():
            build_ngram(sentences, vocab.size, ngram_order, discount)
    else:
        raise FNTError("bad-config", f"timing method {method!r}")
    words = sum(len(line.split()) for line in adaptation_text)
    # timeit pauses garbage collection, so neither method pays for the other's garbage
    times = timeit.Timer(run).repeat(repeat=repeats, number=1)
    return TimingReport(method, words, statistics.median(times))


def write_rows(path: str | Path, rows: Sequence[dict]) -> None:
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def wer_row(name: str, report: WerReport) -> dict:
    return {"set": name, **asdict(report), "wer": round(report.wer, 4)}


def timing_row(report: TimingReport) -> dict:
    return {**asdict(report), "seconds_per_1000_words": report.seconds_per_1000_words}
