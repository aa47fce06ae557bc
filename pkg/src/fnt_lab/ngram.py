"""Back-off n-gram LM over token ids with absolute discounting.

Sentences are left-padded with ``N - 1`` start markers (id ``V``); no
end-of-sentence event is modelled, so every conditional distribution is over
exactly the ``V`` real units, the same support as the vocabulary predictor it
gets interpolated with.

Estimates for a context ``h`` with total count ``c(h)`` and ``n(h)`` distinct
followers::

    P(w | h) = (c(h, w) - D) / c(h)               if c(h, w) > 0
             = bow(h) * P(w | h[1:])              otherwise
    bow(h)   = (D n(h) / c(h)) / (1 - sum_{seen w} P(w | h[1:]))

At the unigram level the freed mass is shared uniformly among unseen units.
A context whose followers cover all ``V`` units is left undiscounted.

N-grams are packed into int64 keys in base ``V + 1`` so counting and
estimation are a handful of sorted-array operations.
"""

from __future__ import annotations

import time
from itertools import chain
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fnt_lab.errors import FNTError


@dataclass
class _OrderTable:
    keys: np.ndarray          # sorted n-gram keys (context * B + token)
    probs: np.ndarray         # P(token | context) for seen n-grams
    ctx_keys: np.ndarray      # sorted distinct contexts
    bows: np.ndarray          # back-off weight per context
    ctx_start: np.ndarray     # first index into keys for each context


@dataclass
class NGramModel:
    order: int
    vocab_size: int
    discount: float
    unigram: np.ndarray
    tables: dict[int, _OrderTable]
    build_seconds: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def base(self) -> int:
        return self.vocab_size + 1

    def _history(self, context: Sequence[int]) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        h = [self.bos] * n + [int(c) for c in context]
        return tuple(h[-n:])

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        """Full (V,) conditional distribution after ``context`` (read-only, cached)."""
        h = self._history(context)
        hit = self._cache.get(h)
        if hit is not None:
            return hit
        dist = self.unigram
        for n in range(2, self.order + 1):
            ctx = h[len(h) - (n - 1):]
            key = 0
            for s in ctx:
                key = key * self.base + s
            tab = self.tables[n]
            i = np.searchsorted(tab.ctx_keys, key)
            if i < len(tab.ctx_keys) and tab.ctx_keys[i] == key:
                lo = tab.ctx_start[i]
                hi = tab.ctx_start[i + 1] if i + 1 < len(tab.ctx_start) else len(tab.keys)
                dist = dist * tab.bows[i]
                dist[tab.keys[lo:hi] % self.base] = tab.probs[lo:hi]
        dist = np.array(dist, dtype=np.float64)
        dist.setflags(write=False)
        self._cache[h] = dist
        return dist


def _sentence_stream(corpus: Iterable[Sequence[int]], pad: int, bos: int, V: int) -> np.ndarray:
    """All sentences concatenated, each preceded by ``pad`` start markers."""
    sents = list(corpus)
    lengths = np.fromiter(map(len, sents), dtype=np.int64, count=len(sents))
    tokens = np.fromiter(chain.from_iterable(sents), dtype=np.int64, count=int(lengths.sum()))
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise FNTError("target-out-of-range", f"token ids must lie in [0, {V})")
    stream = np.full(tokens.size + pad * len(sents), bos, dtype=np.int64)
    sentence = np.repeat(np.arange(len(sents)), lengths)
    stream[np.arange(tokens.size) + pad * (sentence + 1)] = tokens
    return stream


def _counts_by_order(stream: np.ndarray, order: int, base: int, bos: int):
    """Yield ``(n, keys, counts)`` for n = 1..order, extending the keys one token at a time."""
    keys = stream
    for n in range(1, order + 1):
        if n > 1:
            keys = keys[:-1] * base + stream[n - 1:]
        keep = stream[n - 1:] != bos
        yield n, *np.unique(keys[keep], return_counts=True)


def build_ngram(corpus: Iterable[Sequence[int]], vocab_size: int, order: int = 5,
                discount: float = 0.5) -> NGramModel:
    """Estimate an order-``order`` back-off model from tokenised sentences."""
    t0 = time.perf_counter()
    if order < 1:
        raise FNTError("bad-config", "order must be >= 1")
    if not 0 < discount < 1:
        raise FNTError("bad-config", "discount must lie in (0, 1)")
    V, B = vocab_size, vocab_size + 1
    if float(B) ** order >= 2.0 ** 62:
        raise FNTError("bad-config", f"order {order} too large for V={V}")
    stream = _sentence_stream(corpus, max(order - 1, 1), V, V)
    counted = _counts_by_order(stream, order, B, V)
    _, keys1, counts1 = next(counted)
    if counts1.sum() == 0:
        raise FNTError("empty-corpus")

    total = counts1.sum()
    c = np.zeros(V)
    c[keys1] = counts1
    seen = c > 0
    n_unseen = V - int(seen.sum())
    if n_unseen:
        unigram = np.where(seen, (c - discount) / total, discount * seen.sum() / total / n_unseen)
    else:
        unigram = c / total

    tables: dict[int, _OrderTable] = {}
    lower_keys, lower_probs = np.arange(V, dtype=np.int64), unigram
    for n, keys, counts in counted:
        ctx = keys // B                                     # sorted, since keys are
        ctx_start = np.flatnonzero(np.concatenate(([True], ctx[1:] != ctx[:-1])))
        ctx_keys = ctx[ctx_start]
        n_types = np.diff(np.append(ctx_start, len(keys)))
        ctx_total = np.add.reduceat(counts, ctx_start).astype(np.float64)
        group = np.repeat(np.arange(len(ctx_keys)), n_types)
        full = n_types == V
        d = np.where(full, 0.0, discount)
        probs = (counts - d[group]) / ctx_total[group]
        # every seen n-gram's suffix was counted one order down
        suffix = keys % (B ** (n - 1))
        p_lower = lower_probs[np.searchsorted(lower_keys, suffix)]
        seen_lower = np.add.reduceat(p_lower, ctx_start)
        freed = d * n_types / ctx_total
        denom = 1.0 - seen_lower
        bows = np.where(full, 1.0, freed / np.where(full, 1.0, denom))
        tables[n] = _OrderTable(keys, probs, ctx_keys, bows, ctx_start)
        lower_keys, lower_probs = keys, probs

    model = NGramModel(order, V, discount, unigram, tables)
    model.build_seconds = time.perf_counter() - t0
    return model


def ngram_prob(m: NGramModel, context: Sequence[int], token: int) -> float:
    """P(token | context) using at most the last ``N - 1`` context tokens."""
    if not 0 <= token < m.vocab_size:
        raise FNTError("target-out-of-range", str(token))
    return float(m.distribution(context)[token])


def interpolate(pred_log_probs: np.ndarray, m: NGramModel, context: Sequence[int],
                w: float) -> np.ndarray:
    """``log((1 - w) * P_pred + w * P_ngram)`` over the V units."""
    if not 0.0 <= w <= 1.0:
        raise FNTError("bad-config", f"interpolation weight {w}")
    pred_log_probs = np.asarray(pred_log_probs, dtype=np.float64)
    if w == 0.0:
        return pred_log_probs.copy()
    p_ngram = m.distribution(context)
    if w == 1.0:
        return np.log(p_ngram)
    return np.log((1.0 - w) * np.exp(pred_log_probs) + w * p_ngram)


def interpolate_rows(pred_log_probs: np.ndarray, m: NGramModel, tokens: Sequence[int],
                     w: float) -> np.ndarray:
    """Apply :func:`interpolate` to rows u = 0..U with contexts ``tokens[:u]``."""
    return np.stack([interpolate(pred_log_probs[u], m, tokens[:u], w)
                     for u in range(pred_log_probs.shape[0])])


# ---------------------------------------------------------------------------
# ARPA-style text format over integer ids; the start marker is written "<s>"

_NO_PROB = -99.0


def _fmt_ids(key: int, n: int, base: int, bos: int) -> str:
    ids = []
    for _ in range(n):
        key, s = divmod(key, base)
        ids.append("<s>" if s == bos else str(s))
    return " ".join(reversed(ids))


def save_ngram(m: NGramModel, path: str | Path) -> None:
    B = m.base
    sections = {}
    ctx_bows = {n - 1: dict(zip(t.ctx_keys.tolist(), t.bows.tolist())) for n, t in m.tables.items()}
    uni = {k: (float(np.log10(p)), ctx_bows.get(1, {}).get(k, 1.0)) for k, p in enumerate(m.unigram)}
    if 1 in ctx_bows and m.bos in ctx_bows[1]:
        uni[m.bos] = (_NO_PROB, ctx_bows[1][m.bos])
    sections[1] = uni
    for n, t in m.tables.items():
        entries = {k: (float(np.log10(p)), ctx_bows.get(n, {}).get(k, 1.0))
                   for k, p in zip(t.keys.tolist(), t.probs.tolist())}
        for k, bow in ctx_bows.get(n, {}).items():
            if k not in entries:
                entries[k] = (_NO_PROB, bow)
        sections[n] = entries

    lines = [f"# fnt-lab ngram vocab_size={m.vocab_size} discount={m.discount!r}", "\\data\\"]
    lines += [f"ngram {n}={len(sections[n])}" for n in sorted(sections)]
    for n in sorted(sections):
        lines += ["", f"\\{n}-grams:"]
        for k in sorted(sections[n]):
            lp, bow = sections[n][k]
            lines.append(f"{lp!r}\t{_fmt_ids(k, n, B, m.bos)}\t{float(np.log10(bow))!r}")
    lines += ["", "\\end\\"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ngram(path: str | Path) -> NGramModel:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    header = dict(part.split("=") for part in text[0].split()[3:])
    V = int(header["vocab_size"])
    discount = float(header["discount"])
    B = V + 1
    sections: dict[int, list[tuple[int, float, float]]] = {}
    n = 0
    for line in text[1:]:
        if line.startswith("\\") and line.endswith("-grams:"):
            n = int(line[1:].split("-")[0])
            sections[n] = []
        elif n and "\t" in line:
            lp, ids, lbow = line.split("\t")
            key = 0
            for s in ids.split():
                key = key * B + (V if s == "<s>" else int(s))
            sections[n].append((key, float(lp), float(lbow)))
    order = max(sections)
    unigram = np.zeros(V)
    bow_by_order: dict[int, dict[int, float]] = {}
    seen_by_order: dict[int, list[tuple[int, float]]] = {}
    for n, rows in sections.items():
        bow_by_order[n] = {k: 10.0 ** lb for k, _, lb in rows}
        seen_by_order[n] = [(k, 10.0 ** lp) for k, lp, _ in rows if lp > _NO_PROB]
    for k, p in seen_by_order[1]:
        unigram[k] = p
    tables = {}
    for n in range(2, order + 1):
        seen = sorted(seen_by_order[n])
        keys = np.array([k for k, _ in seen], dtype=np.int64)
        probs = np.array([p for _, p in seen])
        ctx_keys, ctx_start = np.unique(keys // B, return_index=True)
        bows = np.array([bow_by_order[n - 1].get(int(c), 1.0) for c in ctx_keys])
        tables[n] = _OrderTable(keys, probs, ctx_keys, bows, ctx_start)
    return NGramModel(order, V, discount, unigram, tables)
