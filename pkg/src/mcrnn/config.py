"""Run configuration: a flat text format, one `key = value` per line.

`#` starts a comment; keys are the dataclass field names below. Parsing and
serialization round-trip exactly, and the fully-resolved config is echoed
into the output directory at the start of every run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    # task and model shape
    task: str = "lm"  # lm | copy | adding
    cell: str = "lstm"  # vanilla | lstm
    n: int = 4  # block size; channel count is n-1, never set directly
    layers: int = 1
    n_e: int = 64
    n_h: int = 64
    tie: bool = True  # share embedding and output projection (needs n_e == n_h)
    dropout: float = 0.0
    mix_cell_state: bool = False

    # optimizer
    lr: float = 1.0
    clip: float = 5.0
    window: int = 16
    batch_size: int = 32
    patience: int = 1
    halvings: int = 6
    max_epochs: int = 20
    momentum: float = 0.0
    seed: int = 0

    # data (lm): corpus paths; empty train_path = built-in generated corpus
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    corpus_bytes: int = 1000000
    level: str = "char"  # char | word
    min_count: int = 1

    # data (copy / adding)
    length: int = 40
    alphabet: int = 8
    blank: int = 30
    steps_per_epoch: int = 50
    val_batches: int = 8

    # limits and output
    max_windows_per_epoch: int = 0  # 0 = no cap
    out: str = "run"

    def validate(self) -> None:
        if self.task not in ("lm", "copy", "adding"):
            raise ConfigError(f"task must be lm, copy or adding, got {self.task!r}")
        if self.cell not in ("vanilla", "lstm"):
            raise ConfigError(f"cell must be vanilla or lstm, got {self.cell!r}")
        if self.n < 2:
            raise ConfigError(f"n (block size) must be >= 2, got {self.n}")
        if self.window < self.n:
            raise ConfigError(f"window ({self.window}) must be >= block size n ({self.n})")
        if self.tie and self.n_e != self.n_h:
            raise ConfigError(f"tie requires n_e == n_h, got n_e={self.n_e} n_h={self.n_h}")
        if self.level not in ("char", "word"):
            raise ConfigError(f"level must be char or word, got {self.level!r}")
        for name in ("layers", "n_e", "n_h", "lr", "clip", "window", "batch_size",
                     "patience", "halvings", "max_epochs", "corpus_bytes", "min_count",
                     "length", "alphabet", "steps_per_epoch", "val_batches"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("dropout", "momentum"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.blank < 0:
            raise ConfigError(f"blank must be >= 0, got {self.blank}")
        if self.max_windows_per_epoch < 0:
            raise ConfigError(f"max_windows_per_epoch must be >= 0, got {self.max_windows_per_epoch}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e


def parse_config(text: str) -> RunConfig:
    values = {}
    for ln_no, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln_no}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {ln_no}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
