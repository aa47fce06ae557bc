"""Unit inventory and text <-> token id mapping.

Two index conventions sit on top of a :class:`Vocabulary` of size ``V``:

* the transducer output distribution has ``V + 1`` entries with the transducer
  blank at index 0 and token ``k`` at index ``k + 1``;
* the CTC head of the encoder has ``V + 1`` entries with token ``k`` at index
  ``k`` and the CTC blank last, at index ``V``.

Token ids produced here always lie in ``[0, V)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from fnt_lab.errors import FNTError

UNK = "<unk>"
MODES = ("char", "word")


@dataclass(frozen=True)
class Vocabulary:
    units: tuple[str, ...]
    mode: str = "char"
    unk_id: int = 0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise FNTError("bad-mode", self.mode)
        if len(self.units) < 2:
            raise FNTError("vocab-too-small", f"V={len(self.units)}")
        if any(not u for u in self.units):
            raise FNTError("empty-unit")
        if len(set(self.units)) != len(self.units):
            raise FNTError("duplicate-unit")
        if not 0 <= self.unk_id < len(self.units):
            raise FNTError("bad-unk-id", str(self.unk_id))
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(self.units)})

    @property
    def size(self) -> int:
        """Number of real units ``V`` (neither blank is counted)."""
        return len(self.units)

    def __len__(self) -> int:
        return len(self.units)

    def split(self, text: str) -> list[str]:
        return list(text) if self.mode == "char" else text.split()


def build_vocabulary(corpus: Iterable[str], mode: str = "char") -> Vocabulary:
    """Sorted distinct units of ``corpus`` preceded by ``<unk>`` at id 0."""
    lines = list(corpus)
    if not lines:
        raise FNTError("empty-corpus")
    if mode not in MODES:
        raise FNTError("bad-mode", mode)
    distinct: set[str] = set()
    for line in lines:
        distinct.update(list(line) if mode == "char" else line.split())
    distinct.discard(UNK)
    if not distinct:
        raise FNTError("empty-corpus", "no units found")
    return Vocabulary((UNK, *sorted(distinct)), mode=mode, unk_id=0)


def encode(v: Vocabulary, text: str) -> list[int]:
    index = v._index
    return [index.get(u, v.unk_id) for u in v.split(text)]


def decode(v: Vocabulary, tokens: Sequence[int]) -> str:
    out = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < v.size:
            raise FNTError("id-out-of-range", f"{t} not in [0, {v.size})")
        out.append(v.units[t])
    return "".join(out) if v.mode == "char" else " ".join(out)


def save_vocabulary(v: Vocabulary, path: str | Path) -> None:
    # newline is the record separator, so it can never be a unit
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for u in v.units:
            f.write(u + "\n")


def load_vocabulary(path: str | Path, mode: str = "char") -> Vocabulary:
    with open(path, encoding="utf-8", newline="\n") as f:
        units = [line[:-1] if line.endswith("\n") else line for line in f]
    unk_id = units.index(UNK) if UNK in units else 0
    return Vocabulary(tuple(units), mode=mode, unk_id=unk_id)
