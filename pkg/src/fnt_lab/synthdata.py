"""Synthetic two-domain speech task.

Text comes from weighted word-bigram chains (:class:`DomainSpec`).  Acoustics
are per-unit templates: every unit string owns a fixed Gaussian vector seeded
from a hash of the string, repeated for a random number of frames and
corrupted with white noise.  Because templates are keyed by the unit string,
two domains that share a word list share acoustics exactly and differ only in
their language statistics.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fnt_lab.errors import FNTError
from fnt_lab.tokenizer import Vocabulary, encode


@dataclass
class DomainSpec:
    word_list: list[str]
    bigram_weights: np.ndarray
    sentence_length_range: tuple[int, int] = (3, 7)
    seed: int = 0
    start_weights: np.ndarray | None = None

    def __post_init__(self):
        W = len(self.word_list)
        self.bigram_weights = np.asarray(self.bigram_weights, dtype=np.float64)
        if W == 0:
            raise FNTError("bad-domain", "empty word list")
        if self.bigram_weights.shape != (W, W):
            raise FNTError("bad-domain", f"weights shape {self.bigram_weights.shape}, expected {(W, W)}")
        if (self.bigram_weights < 0).any() or (self.bigram_weights.sum(axis=1) <= 0).any():
            raise FNTError("bad-domain", "weights must be non-negative with positive row sums")
        lo, hi = self.sentence_length_range
        if lo < 1 or hi < lo:
            raise FNTError("bad-domain", f"length range {self.sentence_length_range}")
        if self.start_weights is None:
            self.start_weights = np.ones(W)
        self.start_weights = np.asarray(self.start_weights, dtype=np.float64)

    def with_seed(self, seed: int) -> "DomainSpec":
        return DomainSpec(self.word_list, self.bigram_weights, self.sentence_length_range,
                          seed, self.start_weights)


def sample_text(spec: DomainSpec, n: int) -> list[str]:
    """Draw ``n`` sentences from the bigram chain; deterministic given ``spec.seed``."""
    if n < 1:
        raise FNTError("bad-count", str(n))
    rng = np.random.default_rng(spec.seed)
    rows = spec.bigram_weights / spec.bigram_weights.sum(axis=1, keepdims=True)
    start = spec.start_weights / spec.start_weights.sum()
    W = len(spec.word_list)
    lo, hi = spec.sentence_length_range
    lines = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        w = int(rng.choice(W, p=start))
        words = [spec.word_list[w]]
        for _ in range(length - 1):
            w = int(rng.choice(W, p=rows[w]))
            words.append(spec.word_list[w])
        lines.append(" ".join(words))
    return lines


# ---------------------------------------------------------------------------
# acoustics


@lru_cache(maxsize=None)
def _unit_template(unit: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(unit.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    t = rng.standard_normal(dim)
    t.setflags(write=False)
    return t


def token_templates(v: Vocabulary, dim: int = 16) -> np.ndarray:
    """(V, dim) matrix of per-unit templates."""
    return np.stack([_unit_template(u, dim) for u in v.units])


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise FNTError("bad-features", f"shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise FNTError("bad-features", "non-finite values")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


def synthesize_features(tokens: Sequence[int], v: Vocabulary, dur_range: tuple[int, int] = (2, 4),
                        noise_sd: float = 0.1, seed: int | Sequence[int] = 0,
                        dim: int = 16) -> FeatureSequence:
    """Repeat each token's template for a uniform duration and add Gaussian noise."""
    if len(tokens) == 0:
        raise FNTError("empty-utterance")
    lo, hi = dur_range
    if lo < 1 or hi < lo:
        raise FNTError("bad-duration", f"{dur_range}")
    rng = np.random.default_rng(seed)
    templates = token_templates(v, dim)
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    frames = np.repeat(templates[np.asarray(tokens)], durations, axis=0)
    if noise_sd > 0:
        frames = frames + noise_sd * rng.standard_normal(frames.shape)
    return FeatureSequence(frames)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Utterance:
    uid: str
    text: str
    tokens: list[int]
    feats: np.ndarray = field(repr=False)


def make_utterances(lines: Sequence[str], v: Vocabulary, prefix: str, seed: int,
                    dur_range: tuple[int, int] = (2, 4), noise_sd: float = 0.1,
                    dim: int = 16) -> list[Utterance]:
    """Pair each line with synthetic features; utterance i uses seed ``(seed, i)``."""
    out = []
    for i, line in enumerate(lines):
        tokens = encode(v, line)
        feats = synthesize_features(tokens, v, dur_range, noise_sd, seed=(seed, i), dim=dim)
        out.append(Utterance(f"{prefix}-{i:05d}", line, tokens, feats.frames))
    return out


def write_features(path: str | Path, frames: np.ndarray) -> None:
    T, D = frames.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", T, D))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    T, D = struct.unpack("<II", raw[:8])
    data = np.frombuffer(raw[8:], dtype="<f4")
    if data.size != T * D:
        raise FNTError("bad-features", f"{path}: header says {T}x{D}, found {data.size} values")
    return data.reshape(T, D).astype(np.float64)


def write_dataset(directory: str | Path, name: str, utts: Iterable[Utterance]) -> Path:
    """Write ``<name>.tsv`` plus one feature file per utterance under ``<name>/``."""
    directory = Path(directory)
    feat_dir = directory / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.tsv"
    with open(manifest, "w", encoding="utf-8") as f:
        for u in utts:
            rel = Path(name) / f"{u.uid}.f32"
            write_features(directory / rel, u.feats)
            f.write(f"{u.uid}\t{u.text}\t{rel.as_posix()}\n")
    return manifest


def read_dataset(manifest: str | Path, v: Vocabulary) -> list[Utterance]:
    """Inverse of :func:`write_dataset`; feature paths resolve relative to the manifest."""
    manifest = Path(manifest)
    out = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        uid, text, rel = line.split("\t")
        path = Path(rel) if Path(rel).is_absolute() else manifest.parent / rel
        out.append(Utterance(uid, text, encode(v, text), read_features(path)))
    return out


# ---------------------------------------------------------------------------
# fixture domains

WORDS = [
    "ash", "bell", "cave", "dusk", "elm", "fern", "gale", "hill",
    "iris", "jade", "kelp", "lake", "moss", "nest", "oak", "pine",
    "reed", "sage", "tide", "vale", "wren", "yew", "zinc", "bay",
]


def _preferred_successors(n: int, seed: int, k: int) -> np.ndarray:
    """(n, k) distinct successors per word, never the word itself."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, k), dtype=np.int64)
    for w in range(n):
        choices = np.delete(np.arange(n), w)
        out[w] = rng.choice(choices, size=k, replace=False)
    return out


def general_domain(seed: int = 0) -> DomainSpec:
    """Diffuse bigram statistics over :data:`WORDS`.

    The strongly preferred transitions of :func:`adaptation_domain` are
    damped here, so the adaptation text really shifts the word prior.
    """
    n = len(WORDS)
    rng = np.random.default_rng(11)
    weights = rng.gamma(0.7, size=(n, n))
    np.fill_diagonal(weights, 0.0)
    succ = _preferred_successors(n, 23, 2)
    weights[np.arange(n)[:, None], succ] *= 0.05
    return DomainSpec(list(WORDS), weights, (3, 7), seed)


def adaptation_domain(seed: int = 0) -> DomainSpec:
    """Peaked bigram statistics: each word has two favoured successors."""
    n = len(WORDS)
    weights = np.full((n, n), 0.15)
    np.fill_diagonal(weights, 0.0)
    succ = _preferred_successors(n, 23, 2)
    weights[np.arange(n), succ[:, 0]] = 8.0
    weights[np.arange(n), succ[:, 1]] = 3.0
    return DomainSpec(list(WORDS), weights, (3, 7), seed)
