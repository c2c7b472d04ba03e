"""Flat key=value configuration shared by the CLI subcommands.

Precedence is flag > file > default. Unknown keys are rejected and every
value is validated against the consuming module's preconditions at load
time, so a bad run fails before any work starts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# Keys whose digest a checkpoint pins: anything that changes the model
# topology or the diffusion chain it was trained on.
MODEL_KEYS = (
    "timesteps", "beta_start", "beta_end",
    "depth", "base_channels", "gn_groups", "embed_dim", "n_cond", "input_side",
)


@dataclass
class Config:
    # noise schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # model topology
    depth: int = 3
    base_channels: int = 8
    gn_groups: int = 4
    embed_dim: int = 32
    n_cond: int = 3
    input_side: int = 32
    # training
    lr: float = 3e-4
    ema_rate: float = 0.99
    train_steps: int = 2000
    batch_size: int = 16
    # sampling
    ddim_steps: int = 500
    ddim_eta: float = 0.0
    seeds: int = 5
    # data and evaluation
    patch_side: int = 128
    scales: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    lag_years: int = 10
    # clustering
    cluster_k: int = 5
    signature_stat: str = "mean_change"
    # CA-Markov
    ca_window: int = 5
    ca_eta: float = 0.1
    ca_tolerance: float = 0.005
    ca_max_iterations: int = 500

    def validate(self) -> None:
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1 or self.base_channels % self.gn_groups:
            raise ConfigError("base_channels must be a positive multiple of gn_groups")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError("embed_dim must be even and >= 2")
        if self.n_cond < 1:
            raise ConfigError("n_cond must be >= 1")
        if self.input_side < 1 or self.input_side % (1 << (self.depth - 1)):
            raise ConfigError("input_side must be divisible by 2^(depth-1)")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if not (0.0 <= self.ema_rate < 1.0):
            raise ConfigError("ema_rate must be in [0, 1)")
        if self.train_steps < 0 or self.batch_size < 1:
            raise ConfigError("train_steps must be >= 0 and batch_size >= 1")
        if not (1 <= self.ddim_steps <= self.timesteps):
            raise ConfigError("ddim_steps must be in [1, timesteps]")
        if not (0.0 <= self.ddim_eta <= 1.0):
            raise ConfigError("ddim_eta must be in [0, 1]")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.patch_side < 1:
            raise ConfigError("patch_side must be >= 1")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ConfigError("scales must be positive")
        if list(self.scales) != sorted(set(self.scales)):
            raise ConfigError("scales must be strictly increasing")
        if self.lag_years < 0:
            raise ConfigError("lag_years must be >= 0")
        if self.cluster_k < 1:
            raise ConfigError("cluster_k must be >= 1")
        if self.signature_stat not in ("mean_change", "changed_fraction"):
            raise ConfigError(f"unknown signature_stat {self.signature_stat!r}")
        if self.ca_window < 1 or self.ca_window % 2 == 0:
            raise ConfigError("ca_window must be odd and positive")
        if self.ca_eta < 0 or self.ca_tolerance < 0 or self.ca_max_iterations < 1:
            raise ConfigError("CA parameters out of range")


_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple[int, ...]":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc


def parse_overrides(cfg: Config, items: dict[str, str]) -> Config:
    """Apply raw string overrides onto a config, rejecting unknown keys."""
    for key, raw in items.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        items = {}
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            items[key.strip()] = value
        parse_overrides(cfg, items)
    if overrides:
        parse_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def config_items(cfg: Config) -> dict[str, str]:
    out = {}
    for f in fields(Config):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            out[f.name] = ",".join(str(p) for p in v)
        else:
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
    return out


def model_digest(cfg: Config) -> str:
    """SHA-256 over the canonical text of the model-defining keys."""
    items = config_items(cfg)
    text = "\n".join(f"{k}={items[k]}" for k in MODEL_KEYS)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
