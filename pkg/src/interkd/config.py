"""Experiment configuration and its ``key = value`` file format.

One setting per line, dotted section names, ``#`` starts a comment::

    encoder.num_layers = 6
    distill.alpha = 0.7
    decode.lm_weights = 0.0, 0.25, 0.5
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .conformer import EncoderConfig
from .corpus import CorpusConfig
from .distill import DecoderConfig
from .teacher import TeacherConfig


@dataclass
class DistillConfig:
    alpha: float = 0.7
    beta: float = 0.5
    k: int = 10
    m: int = 1
    reverse_kl: bool = True
    floor: float = 1e-8


@dataclass
class InterCtcConfig:
    weight: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup: int = 400
    clip_norm: float = 5.0
    seed: int = 0


@dataclass
class DecodeConfig:
    beam: int = 10
    lm_weight: float = 0.5
    ins_penalty: float = 0.5
    ngram_order: int = 6
    frames_per_second: float = 100.0
    lm_weights: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0)
    ins_penalties: tuple[float, ...] = (0.0, 0.5, 1.0)


@dataclass
class PathConfig:
    data_dir: str = "work/data"
    teacher_dir: str = "work/teacher"
    runs_dir: str = "work/runs"


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    interctc: InterCtcConfig = field(default_factory=InterCtcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def set(self, key: str, raw: str):
        section, _, name = key.partition(".")
        target = getattr(self, section, None)
        if target is None or not dataclasses.is_dataclass(target) or not name:
            raise KeyError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(target))
        if name not in hints:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, name, _parse(hints[name], raw.strip(), key))

    def items(self):
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for g in dataclasses.fields(section):
                yield f"{f.name}.{g.name}", getattr(section, g.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def save(self, path: str | Path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.loads(p.read_text(encoding="utf-8"))


def _parse(tp, raw: str, key: str):
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (inner, _) = typing.get_args(tp)
            return tuple(_parse(inner, x.strip(), key) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {tp}") from None
    raise TypeError(f"{key}: unsupported field type {tp}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)
