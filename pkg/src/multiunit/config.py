"""``key = value`` run configuration with dotted section keys.

Example::

    # comments start with '#'
    paths.train = corpus/train.tsv
    model.taps = phoneme@3:0.1
    train.lr = 1e-3
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SynthSpec
from .training import TrainConfig

SEED_ENV = "MULTIUNIT_SEED"


class ConfigFileError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        out[key] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


@dataclass
class PathsSection:
    train: str = ""
    dev: str = ""
    test: str = ""
    lexicon: str = ""
    bpe: str = ""
    bpe_vocab: str = ""
    char_vocab: str = ""
    pinyin_table: str = ""
    wubi_table: str = ""
    out: str = "out"


@dataclass
class ModelSection:
    feature_dim: int = 16
    model_dim: int = 64
    num_layers: int = 6
    heads: int = 2
    subsample_factor: int = 2
    kernel_size: int = 3
    ff_dim: int = 128
    decoder_layers: int = 1
    primary_unit: str = "wordpiece"
    aed_weight: float = 0.5
    taps: str = ""
    oov: str = "error"


@dataclass
class DecodeSection:
    beam: int = 16
    nbest: int = 8
    token_limit: int = 16


@dataclass
class SweepSection:
    unit: str = "phoneme"
    layers: str = "0,1,2,3,4,5,6"
    seeds: str = "1,2,3,4,5"
    weight: float = 0.1
    jobs: int = 1


@dataclass
class BpeSection:
    vocab_size: int = 80


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    synth: SynthSpec = field(default_factory=SynthSpec)
    bpe: BpeSection = field(default_factory=BpeSection)

    @classmethod
    def from_mapping(cls, values: dict[str, str], env: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        for key, value in values.items():
            section, _, name = key.partition(".")
            target = getattr(cfg, section, None)
            if not name or target is None or not dataclasses.is_dataclass(target):
                raise ConfigFileError(f"unknown config key {key!r}")
            fields = {f.name: f for f in dataclasses.fields(target)}
            if name not in fields:
                raise ConfigFileError(f"unknown config key {key!r}")
            hints = typing.get_type_hints(type(target))
            try:
                setattr(target, name, _coerce(value, hints[name]))
            except ValueError as exc:
                raise ConfigFileError(f"bad value for {key}: {value!r} ({exc})") from None
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            # last resort: only seeds that neither the file nor a flag set
            for key, section in (("train.seed", cfg.train), ("synth.seed", cfg.synth)):
                if key not in values:
                    section.seed = int(env[SEED_ENV])
        # re-run dataclass validation after field assignment
        cfg.synth = SynthSpec(**dataclasses.asdict(cfg.synth))
        return cfg

    def int_list(self, text: str) -> list[int]:
        return [int(x) for x in text.replace(" ", "").split(",") if x]


def _coerce(value: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return _coerce(value, inner[0])
    if origin is tuple:
        parts = [p.strip() for p in value.split(",")]
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if hint is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if hint in (int, float, str):
        return hint(value)
    raise ValueError(f"unsupported field type {hint}")


def parse_taps(text: str) -> list[tuple[str, int, float]]:
    """``unit@layer:weight`` items, comma separated."""
    taps = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        try:
            unit, rest = item.split("@")
            layer, weight = rest.split(":")
            taps.append((unit, int(layer), float(weight)))
        except ValueError:
            raise ConfigFileError(f"bad tap {item!r}; expected unit@layer:weight") from None
    return taps
