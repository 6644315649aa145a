"""Run configuration: a flat ``key = value`` text format with typed parsing."""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import GCNSpec, ModelSpec


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "mpnn"
    # graph kernel
    s: int = 256
    r: float = 0.2
    n_e: int = 32
    h: int = 4
    l: typing.Optional[float] = None  # overlap length; None means l = r
    n_proc: int = 1
    mode: str = "full"
    scatter_m: int = 1024
    # network
    d_latent: int = 16
    w_hidden: int = 64
    w_kernel: int = 32
    gcn_width: int = 378
    gcn_layers: int = 6
    # optimisation
    epochs: int = 150
    lr_max: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    scheduler: str = "onecycle"
    precision: str = "f32"
    # data
    max_train: int = 0
    max_test: int = 0
    eval_repeats: int = 5
    # seeds
    seed_data: int = 0
    seed_sampling: int = 0
    seed_init: int = 0
    # runtime
    no_comm: bool = False
    transport: str = "queue"
    launcher: str = "thread"
    timeout: float = 120.0
    check_sync: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("s", "n_e", "h", "n_proc", "epochs", "d_latent", "w_hidden", "w_kernel",
                     "gcn_width", "gcn_layers", "eval_repeats", "scatter_m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.r > 0:
            raise ConfigError("r must be positive")
        if self.l is not None and self.l < 0:
            raise ConfigError("l must be ≥ 0")
        if self.n_proc & (self.n_proc - 1):
            raise ConfigError("n_proc must be a power of two")
        choices = {"model": ("mpnn", "gcn"), "scheduler": ("onecycle", "plateau"),
                   "precision": ("f32", "f64"), "mode": ("full", "scatter"),
                   "transport": ("queue", "socket"), "launcher": ("thread", "process")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.launcher == "process" and self.transport != "socket":
            raise ConfigError("launcher=process needs transport=socket")

    @property
    def overlap(self) -> float:
        return self.r if self.l is None else self.l

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def model_spec(self, d_in: int = 3, d_e: int = 3, d_out: int = 1):
        if self.model == "gcn":
            return GCNSpec(d_in=d_in, d_out=d_out, width=self.gcn_width, hidden_layers=self.gcn_layers)
        return ModelSpec(d_in=d_in, d_e=d_e, d_out=d_out, d_latent=self.d_latent,
                         w_hidden=self.w_hidden, w_kernel=self.w_kernel)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def resolved(self) -> "TrainConfig":
        return self.replace(l=self.overlap)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved().to_text().encode()).hexdigest()[:12]


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in fields(TrainConfig)}


def parse_value(name: str, raw: str):
    types = _field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    tp = types[name]
    raw = raw.strip()
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        if raw.lower() in ("none", "", "r"):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {tp.__name__}") from None


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """File values, then ``overrides``, then ``DSMPNN_PRECISION`` from the environment."""
    values = parse_text(Path(path).read_text()) if path else {}
    for k, v in (overrides or {}).items():
        if k not in _field_types():
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    env = os.environ.get("DSMPNN_PRECISION")
    if env:
        if env not in ("f32", "f64"):
            raise ConfigError(f"DSMPNN_PRECISION must be f32 or f64, got {env!r}")
        values["precision"] = env
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(cfg.resolved().to_text())


# full-size reference configuration (about 700k parameters); not used by the desk-scale defaults
REFERENCE_SCALE = dict(s=421, r=0.2, n_e=64, h=8, d_latent=32, w_hidden=128, w_kernel=448, epochs=200,
                       eval_repeats=5)
