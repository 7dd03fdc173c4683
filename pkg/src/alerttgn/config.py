"""Run configuration: defaults, key=value config files and validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .aggregators import KINDS, ConfigError


@dataclass
class Config:
    aggregator: str = "bita"
    d_node: int = 100
    d_time: int = 100
    d_msg: int = 100
    d_mem: int = 9
    d_hidden: int = 0  # BiGRU hidden width; 0 means d_msg // 2
    heads: int = 2
    layers: int = 1
    dropout: float = 0.1
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 50
    patience: int = 5
    clip_norm: float = 1.0  # global gradient-norm cap, 0 disables
    lam: float = 1.0
    gamma: float = 2.0
    seed: int = 0
    window: int = 32
    candidates: int = 50
    negatives: int = 1
    balance: bool = False
    new_node_fraction: float = 0.10
    attention_scope: str = "batch"  # batch | shared_node
    bita_scope: str = "edge"  # edge | node
    time_input: str = "delta"  # delta | absolute
    category_in_message: bool = True
    csv_path: str = ""
    stream_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.aggregator not in KINDS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}; expected one of {', '.join(KINDS)}")
        for name in ("d_node", "d_time", "d_msg", "d_mem", "heads", "layers", "batch_size", "window",
                     "candidates", "negatives"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_hidden < 0:
            raise ConfigError("d_hidden must be >= 0")
        if self.d_msg % self.heads:
            raise ConfigError(f"d_msg={self.d_msg} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.clip_norm < 0 or self.lr < 0 or self.lam < 0 or self.gamma < 0 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("lr, lam, gamma, epochs must be >= 0 and patience >= 1")
        if not 0.0 <= self.new_node_fraction < 1.0:
            raise ConfigError("new_node_fraction must lie in [0, 1)")
        choices = {"attention_scope": ("batch", "shared_node"), "bita_scope": ("edge", "node"),
                   "time_input": ("delta", "absolute")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}")

    @property
    def hidden(self) -> int:
        return self.d_hidden or max(1, self.d_msg // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> Config:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(Config)}[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw.strip()


def parse_overrides(pairs) -> dict:
    """``["lr=0.001", "aggregator=last"]`` -> typed dict."""
    known = {f.name for f in fields(Config)}
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = (s.strip() for s in pair.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=None, base: Config | None = None) -> Config:
    """Defaults, then the key=value file (``#`` comments allowed), then overrides."""
    values = (base or Config()).to_dict()
    if path:
        lines = Path(path).read_text().splitlines()
        pairs = [ln.split("#", 1)[0].strip() for ln in lines]
        values.update(parse_overrides([p for p in pairs if p]))
    values.update(overrides or {})
    return Config.from_dict(values)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.to_dict().items())
