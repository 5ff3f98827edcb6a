"""Experiment configuration: desk-scale defaults, JSON loading, strict checks.

A config file may specify any subset of the keys below; missing values take
the defaults, unknown keys are rejected with their dotted path. Validation
happens entirely before any compute.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .data import ALL_TASKS
from .errors import ConfigError
from .training import KNOWN_GROUPS

DEFAULT_CONFIG: dict = {
    "model": {
        "n_layers": 2,
        "n_heads": 4,
        "hidden": 64,
        "ffn_width": 128,
        "vocab": 32,
        "max_seq": 64,
        "lora": {"rank": 16, "beta": 0.25, "gamma": 0.75, "alpha": None, "mode": "mm"},
    },
    "vision": {
        "grid": 6,
        "channels": 4,
        "width": 32,
        "heads": 4,
        "blocks": 4,
        "ladder_layers": 2,
        "n_query": 8,
        "adapter_hidden": 64,
        "use_qladder": True,
    },
    "train": {
        "seed": 7,
        "eval_samples": 200,
        "pretrain": {
            "steps": 300,
            "batch_size": 8,
            "learning_rates": {"adapter": 2e-3, "qladder": 4e-4, "mm_lora": 5e-3},
            "task_mix": {"caption": 1.0},
            "train_mm_lora": False,
        },
        "finetune": {
            "steps": 2000,
            "batch_size": 8,
            "learning_rates": {"adapter": 1e-3, "qladder": 1e-3, "mm_lora": 5e-3},
            "task_mix": {"majority": 1.0, "count": 1.0},
            "train_mm_lora": True,
        },
    },
    "output": {"directory": "runs/default"},
}

# leaves whose values are open dictionaries with their own key validation
_OPEN_DICT_KEYS = {
    ("train", "pretrain", "learning_rates"): KNOWN_GROUPS,
    ("train", "finetune", "learning_rates"): KNOWN_GROUPS,
    ("train", "pretrain", "task_mix"): ALL_TASKS,
    ("train", "finetune", "task_mix"): ALL_TASKS,
}


@dataclass(frozen=True)
class LoraSettings:
    rank: int
    beta: float
    gamma: float
    alpha: float | None
    mode: str

    def __post_init__(self):
        if self.mode not in ("mm", "plain", "none"):
            raise ConfigError(f"model.lora.mode must be mm/plain/none, got {self.mode!r}")


@dataclass(frozen=True)
class ModelSettings:
    n_layers: int
    n_heads: int
    hidden: int
    ffn_width: int
    vocab: int
    max_seq: int
    lora: LoraSettings


@dataclass(frozen=True)
class VisionSettings:
    grid: int
    channels: int
    width: int
    heads: int
    blocks: int
    ladder_layers: int
    n_query: int
    adapter_hidden: int
    use_qladder: bool


@dataclass(frozen=True)
class StageSettings:
    steps: int
    batch_size: int
    learning_rates: dict[str, float]
    task_mix: dict[str, float]
    train_mm_lora: bool


@dataclass(frozen=True)
class TrainSettings:
    seed: int
    eval_samples: int
    pretrain: StageSettings
    finetune: StageSettings


@dataclass(frozen=True)
class OutputSettings:
    directory: str


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSettings
    vision: VisionSettings
    train: TrainSettings
    output: OutputSettings

    def to_dict(self) -> dict:
        return asdict(self)


def _merge_checked(defaults, override, path=()):
    """Deep-merge `override` into `defaults`, rejecting unknown keys."""
    if path in _OPEN_DICT_KEYS:
        allowed = _OPEN_DICT_KEYS[path]
        bad = sorted(set(override) - set(allowed))
        if bad:
            raise ConfigError(f"{'.'.join(path)}: unknown keys {bad} (allowed: {sorted(allowed)})")
        for key, value in override.items():
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{'.'.join(path)}.{key}: expected a nonnegative number, got {value!r}")
        return dict(override)
    if not isinstance(override, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected an object, got {type(override).__name__}")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {'.'.join(path + (key,))}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge_checked(defaults[key], value, path + (key,))
        else:
            merged[key] = _check_leaf(defaults[key], value, path + (key,))
    return merged


def _check_leaf(default, value, path):
    dotted = ".".join(path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{dotted}: unsupported value {value!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    merged = _merge_checked(DEFAULT_CONFIG, raw)
    m, v, t = merged["model"], merged["vision"], merged["train"]

    def stage(d):
        return StageSettings(
            steps=d["steps"],
            batch_size=d["batch_size"],
            learning_rates=dict(d["learning_rates"]),
            task_mix=dict(d["task_mix"]),
            train_mm_lora=d["train_mm_lora"],
        )

    return ExperimentConfig(
        model=ModelSettings(
            n_layers=m["n_layers"],
            n_heads=m["n_heads"],
            hidden=m["hidden"],
            ffn_width=m["ffn_width"],
            vocab=m["vocab"],
            max_seq=m["max_seq"],
            lora=LoraSettings(
                rank=m["lora"]["rank"],
                beta=m["lora"]["beta"],
                gamma=m["lora"]["gamma"],
                alpha=m["lora"]["alpha"],
                mode=m["lora"]["mode"],
            ),
        ),
        vision=VisionSettings(**v),
        train=TrainSettings(seed=t["seed"], eval_samples=t["eval_samples"], pretrain=stage(t["pretrain"]), finetune=stage(t["finetune"])),
        output=OutputSettings(**merged["output"]),
    )


def load_config(path=None) -> ExperimentConfig:
    """Config from a JSON file, or pure defaults when no path is given."""
    if path is None:
        return config_from_dict({})
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)
