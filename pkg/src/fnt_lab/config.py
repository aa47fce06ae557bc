"""Run configuration: sectioned ``key = value`` files with typed defaults.

Every section maps onto a dataclass.  Loading rejects unknown sections and
keys, and :meth:`RunConfig.dump` writes the fully resolved configuration so a
run directory carries everything needed to repeat it.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from fnt_lab.errors import FNTError


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    unit_mode: str = "word"
    noise_sd: float = 1.0
    feature_dim: int = 16
    dur_min: int = 2
    dur_max: int = 4
    n_train: int = 500
    n_test: int = 50
    n_adapt_text: int = 200
    n_lm_text: int = 5000


@dataclass
class ModelSection:
    variant: str = "fnt_improved"
    enc_layers: int = 2
    enc_hidden: int = 64
    pred_layers: int = 1
    pred_hidden: int = 64
    embed_dim: int = 32
    joint_dim: int = 64


@dataclass
class TrainSection:
    lam: float = 0.1
    beta: float = 0.1
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 8
    lm_mode: str = "none"


@dataclass
class LMSection:
    lr: float = 3e-3
    epochs: int = 3
    batch_size: int = 32


@dataclass
class AdaptSection:
    alpha: float = 0.1
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 8


@dataclass
class NGramSection:
    order: int = 5
    discount: float = 0.5
    weight: float = 0.3


@dataclass
class DecodeSection:
    mode: str = "greedy"
    beam_size: int = 4
    max_symbols_per_frame: int = 5


@dataclass
class ExperimentSection:
    models: str = "B0 F0 F1 F2 F3"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    lm: LMSection = field(default_factory=LMSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    ngram: NGramSection = field(default_factory=NGramSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def override(self, section: str, **values) -> "RunConfig":
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def with_seed(self, seed: int) -> "RunConfig":
        return self.override("run", seed=seed)

    def dumps(self) -> str:
        lines = []
        for name, sec in self.sections().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in asdict(sec).items()]
            lines.append("")
        return "\n".join(lines)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _convert(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(like)(raw.strip())
    except ValueError:
        raise FNTError("bad-config", f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``text`` on ``base`` (defaults if omitted).

    Raises:
        FNTError: ``bad-config`` naming the offending ``section.key``.
    """
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise FNTError("bad-config", str(exc).splitlines()[0]) from None
    cfg = base or RunConfig()
    current = cfg.sections()
    for name in cp.sections():
        if name not in current:
            raise FNTError("bad-config", f"unknown section [{name}]")
        sec = current[name]
        known = asdict(sec)
        values = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise FNTError("bad-config", f"unknown key {name}.{key}")
            values[key] = _convert(f"{name}.{key}", raw, known[key])
        cfg = cfg.override(name, **values)
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    return parse_config(path.read_text(encoding="utf-8"), base)


# desk-scale preset: the defaults above.  ``tiny`` is for smoke tests.
PRESETS = {
    "desk": "",
    "tiny": """
[data]
n_train = 24
n_test = 6
n_adapt_text = 20
n_lm_text = 60
[model]
enc_layers = 1
enc_hidden = 16
pred_hidden = 16
embed_dim = 8
joint_dim = 16
[train]
epochs = 2
[lm]
epochs = 1
[adapt]
epochs = 1
""",
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise FNTError("bad-config", f"unknown preset {name!r}")
    return parse_config(PRESETS[name])
