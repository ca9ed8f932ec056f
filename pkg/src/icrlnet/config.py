"""Flat key=value run configuration with flag overrides.

A config file holds ``key = value`` lines ('#' starts a comment).  Every
key has a documented default; unknown keys are rejected so typos fail
loudly.  Command-line flags win over file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .tensor import ContractViolation


class ConfigError(Exception):
    """Bad configuration: unknown key, unparsable value, missing path."""


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


def _parse_losses(text: str) -> tuple[str, ...]:
    terms = tuple(t.strip() for t in str(text).split(",") if t.strip())
    if "cls" not in terms:
        raise ConfigError("losses must include 'cls'")
    for t in terms:
        if t not in ("cls", "intra", "inter"):
            raise ConfigError(f"unknown loss term {t!r}")
    return terms


def _parse_milestones(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    if not text:
        return ()
    return tuple(int(t) for t in text.split(","))


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = tuple(float(t) for t in str(text).split(","))
    if len(parts) != 3:
        raise ConfigError("split ratios need three comma-separated fractions")
    return parts


@dataclass
class RunConfig:
    seed: int = 0
    n: int = 5
    k: int = 5
    m: int = 15
    epochs: int = 200
    episodes_per_epoch: int = 100
    episodes: int = 600
    lr_backbone: float = 0.001
    lr_new: float = 0.01
    lr_pretrain: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay: float = 0.1
    decay_milestones: tuple = ()
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 10.0
    airn: bool = True
    airn_hidden: int = 0
    pooling: str = "full"
    losses: tuple = ("cls", "intra", "inter")
    blocks: int = 4
    channels: int = 32
    augment: bool = True
    crop_pad: int = 4
    val_fraction: float = 0.1
    val_episodes: int = 40
    pretrain_batch: int = 64
    split_ratios: tuple = (0.64, 0.16, 0.20)
    eval_split: str = "test"
    dataset: str = ""
    checkpoint: str = ""
    split: str = ""
    out: str = ""


_PARSERS = {
    "seed": int, "n": int, "k": int, "m": int, "epochs": int,
    "episodes_per_epoch": int, "episodes": int,
    "lr_backbone": float, "lr_new": float, "lr_pretrain": float,
    "momentum": float, "weight_decay": float, "lr_decay": float,
    "decay_milestones": _parse_milestones,
    "lambda1": float, "lambda2": float, "tau": float,
    "airn": _parse_bool, "airn_hidden": int, "pooling": str,
    "losses": _parse_losses, "blocks": int, "channels": int,
    "augment": _parse_bool, "crop_pad": int,
    "val_fraction": float, "val_episodes": int, "pretrain_batch": int,
    "split_ratios": _parse_ratios, "eval_split": str,
    "dataset": str, "checkpoint": str, "split": str, "out": str,
}

assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_config(file_values: dict[str, str] | None = None,
                 overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then file values, then overrides (flags win)."""
    cfg = RunConfig()
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _PARSERS:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                parsed = _PARSERS[key](value) if isinstance(value, str) else value
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
            setattr(cfg, key, parsed)
    if cfg.pooling not in ("full", "model-1", "model-2", "model-3", "model-4", "model-5"):
        raise ConfigError(f"unknown pooling variant {cfg.pooling!r}")
    return cfg


def load_config(path: str | None, overrides: dict[str, object] | None = None) -> RunConfig:
    file_values = read_config_file(path) if path else None
    try:
        return build_config(file_values, overrides)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
