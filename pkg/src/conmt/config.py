"""Flat ``key = value`` run descriptions.

Every run writes its fully resolved config (all keys, defaults included) next
to its outputs; feeding that file back with ``--config`` repeats the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidArgumentError


@dataclass
class ExperimentConfig:
    command: str = ""
    # task
    task: str = "lexicon"
    vocab_size: int = 2000
    zipf: float = 1.2
    min_len: int = 1
    max_len: int = 4
    n_pairs: int = 8000
    held_out: float = 0.2
    # tables
    table: str = "uniform"  # kind name or table file
    kind: str = "uniform"
    dim: int = 128
    alpha: float = 0.9
    alphas: str = "0.5,0.7,0.9"
    clump_fraction: float = 0.9
    clump_cos: float = 0.999
    pre: str = ""  # pre-trained table for combine; empty = clumped from the seed
    # training
    seed: str = ""  # one seed or a comma list
    loss: str = "cosine"
    lr: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    hidden: int = 128
    clip: float = 1.0
    targets_trainable: bool = False
    target_lr: float = 0.0  # 0 = same as lr
    # decoding
    model: str = ""
    src: str = ""
    refs: str = ""
    hyps: str = ""
    beam: int = 5
    beams: str = "1,2,4,8"
    length_norm: str = "none"
    score_sign: str = "plus"
    kappa: float = 1.0
    max_extra: int = 200
    nbest: int = 1
    # evaluation and profiling
    metric: str = "bleu"
    freq: str = ""
    buckets: str = ""  # empty = equal-mass boundaries from the training counts
    k: int = 5
    bin: int = 500
    format: str = ""
    out: str = ""

    # -------------------------------------------------------------- parsing

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_overrides(self, values: dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(self)}
        clean = {}
        for key, value in values.items():
            if key not in types:
                raise InvalidArgumentError(f"unknown config key {key!r}")
            clean[key] = _coerce(key, value, types[key])
        return dataclasses.replace(self, **clean)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise InvalidArgumentError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return cls().with_overrides(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    # ------------------------------------------------------------ accessors

    def seeds(self) -> list[int]:
        return _int_list(self.seed, "seed")

    def alpha_list(self) -> list[float]:
        vals = _float_list(self.alphas, "alphas")
        for a in vals:
            if not 0.0 <= a <= 1.0:
                raise InvalidArgumentError(f"alpha {a} outside [0, 1]")
        return vals

    def beam_list(self) -> list[int]:
        vals = _int_list(self.beams, "beams")
        if any(b < 1 for b in vals):
            raise InvalidArgumentError(f"beam widths must be >= 1: {vals}")
        return vals


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise InvalidArgumentError(f"config key {key!r}: expected {typ}, got {value!r}") from None
    if typ == "bool":
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise InvalidArgumentError(f"config key {key!r}: expected true/false, got {value!r}")
    return value


def _int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InvalidArgumentError(f"bad {what} list {text!r}") from None
    if not vals:
        raise InvalidArgumentError(f"empty {what} list")
    return vals


def _float_list(text: str, what: str) -> list[float]:
    try:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InvalidArgumentError(f"bad {what} list {text!r}") from None
    if not vals:
        raise InvalidArgumentError(f"empty {what} list")
    return vals
