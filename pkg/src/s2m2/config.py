"""Plain-text run configuration: ``key = value`` lines plus ``--key value`` overrides."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from .data import RotationConfig
from .errors import ConfigurationError
from .evaluation import AdaptConfig, EpisodeSpec
from .losses import MixupSpec, SelfSupSpec
from .training import TrainConfig

log = logging.getLogger(__name__)


def _int_tuple(text: str) -> tuple:
    return tuple(int(tok) for tok in text.replace("/", ",").split(",") if tok.strip())


def _str_tuple(text: str) -> tuple:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    # accepts fractions such as 1/255
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "default") else _float(text)


def _path(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


PATH_KEYS = ("dataset", "splits", "checkpoint", "report_dir", "features")


@dataclass
class RunConfig:
    # files
    dataset: str | None = None
    splits: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = None
    features: str | None = None
    # data generation and splits
    seed: int = 0
    classes: int = 16
    per_class: int = 60
    size: int = 32
    sample_seed: int | None = None
    split_ratios: tuple = (8, 3, 5)
    merge_val: bool = False
    # training
    epochs: int = 30
    max_epochs: int = 400
    batch_size: int = 32
    lr: float | None = None
    optimizer: str = "adam"
    momentum: float = 0.9
    selfsup: str = "rotation"
    angles: tuple = (0, 90, 180, 270)
    copies: int = 4
    alpha: float = 2.0
    mixup_layers: tuple = (0, 1, 2, 3)
    phase2: bool = True
    phase2_max_epochs: int = 10
    scale: float = 10.0
    channels: tuple = (16, 32, 64, 64)
    strides: tuple = (2, 1, 2, 1)
    val_n_way: int = 5
    val_k_shot: int = 5
    val_q: int = 15
    val_episodes: int = 100
    # evaluation
    n_way: int = 5
    k_shot: int = 1
    q: int = 15
    tasks: int = 600
    eval_split: str = "novel"
    adapt_steps: int = 100
    adapt_lr: float = 0.01
    # probes
    kinds: tuple = ("brightness", "contrast", "pixelate")
    severities: tuple = (0, 1, 2, 3, 4, 5)
    epsilon: float = 1.0 / 255.0
    percentile: float = 1.0
    image_index: int = 0
    threads: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, max_epochs=self.max_epochs, batch_size=self.batch_size, lr=self.lr,
            optimizer=self.optimizer, momentum=self.momentum, seed=self.seed,
            selfsup=SelfSupSpec(self.selfsup, RotationConfig(self.angles), self.copies),
            mixup=MixupSpec(self.alpha, self.mixup_layers), phase2=self.phase2,
            phase2_max_epochs=self.phase2_max_epochs,
            val_episodes=EpisodeSpec(self.val_n_way, self.val_k_shot, self.val_q, self.val_episodes, self.seed),
            adapt=self.adapt_config(), scale=self.scale, channels=self.channels, strides=self.strides)

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.q, self.tasks, self.seed)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(self.adapt_steps, self.adapt_lr, self.scale)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            elif value is None:
                value = "none"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "seed": int, "classes": int, "per_class": int, "size": int, "sample_seed": _optional_int,
    "split_ratios": _int_tuple, "merge_val": _bool, "epochs": int, "max_epochs": int,
    "batch_size": int, "lr": _optional_float, "optimizer": str, "momentum": _float,
    "selfsup": str, "angles": _int_tuple, "copies": int, "alpha": _float, "mixup_layers": _int_tuple,
    "phase2": _bool, "phase2_max_epochs": int, "scale": _float, "channels": _int_tuple,
    "strides": _int_tuple, "val_n_way": int, "val_k_shot": int, "val_q": int, "val_episodes": int,
    "n_way": int, "k_shot": int, "q": int, "tasks": int,
    "eval_split": str, "adapt_steps": int, "adapt_lr": _float, "kinds": _str_tuple,
    "severities": _int_tuple, "epsilon": _float, "percentile": _float, "image_index": int, "threads": int,
    **{k: _path for k in PATH_KEYS},
}
KEYS = tuple(f.name for f in fields(RunConfig))
assert set(KEYS) == set(_PARSERS)


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def read_config_file(path) -> dict[str, str]:
    """Raw ``key -> value`` strings; later duplicates win with a warning."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key = normalize_key(key)
        if key in raw:
            log.warning("%s:%d: duplicate key %r, last occurrence wins", path, lineno, key)
        raw[key] = value.strip()
    return raw


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``['--n-way', '20', '--phase2', 'false']`` -> {'n_way': '20', 'phase2': 'false'}."""
    out = {}
    i = 0
    while i < len(args):
        token = args[i]
        if not token.startswith("--"):
            raise ConfigurationError(f"unexpected argument {token!r}")
        if "=" in token:
            key, value = token.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigurationError(f"missing value for {token}")
            key, value = token, args[i + 1]
            i += 2
        out[normalize_key(key)] = value
    return out


def parse_config(path=None, overrides: dict[str, str] | None = None, env=None) -> RunConfig:
    """File values, then CLI overrides, then FSL_SEED, then defaults."""
    env = os.environ if env is None else env
    raw = read_config_file(path) if path else {}
    raw.update(overrides or {})
    if "seed" not in raw and env.get("FSL_SEED"):
        raw["seed"] = env["FSL_SEED"]
    values = {}
    for key, text in raw.items():
        if key not in _PARSERS:
            raise ConfigurationError(f"unknown config key {key!r}")
        try:
            values[key] = _PARSERS[key](text)
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse {key} = {text!r}: {exc}") from None
    try:
        config = RunConfig(**values)
        config.train_config()
        config.episode_spec()
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from None
    return config

