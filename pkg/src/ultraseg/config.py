"""Flat, typed key/value run configuration with CLI flag overrides.

Files hold ``section.key = value`` lines; flags mirror them as
``--section.key=value``.  Unknown keys are rejected so configs cannot rot
silently.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .errors import ConfigurationError


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (type, default).  A None default means "unset".
SCHEMA: dict[str, dict[str, tuple[type, Any]]] = {
    "data": {
        "root": (str, None),
        "corpus": (str, "synthetic"),  # bus | multi_organ | bus_plus_natural | natural | synthetic
        "natural_source": (str, "cifar10"),  # cifar10 | mini_imagenet
        "image_size": (int, 32),
        "split_seed": (int, 0),
        "split_name": (str, "bus"),
        "split_file": (str, None),
        "train_count": (int, 546),
        "val_count": (int, 78),
        "test_count": (int, 156),
        "camus_train": (int, 1800),
        "camus_val": (int, 200),
        "lus_train": (int, 207),
        "lus_val": (int, 21),
        "natural_train": (int, 50000),
        "natural_val": (int, 10000),
        "synthetic_count": (int, 200),
    },
    "model": {
        "arch": (str, "unet"),
        "base_width": (int, 64),
        "depth": (int, 4),
        "embedding_dim": (int, 128),
        "pretrain_decoder": (_bool, None),
    },
    "pretrain": {
        "method": (str, "simclr"),
        "epochs": (int, 200),
        "batch_size": (int, None),  # unset: published default for (method, size)
        "lr": (float, 1e-3),
        "weight_decay": (float, 1e-6),
        "tau": (float, None),  # unset: method default
        "momentum": (float, 0.999),
        "queue_size": (int, None),  # unset: derived from corpus and batch
        "seed": (int, 0),
        "out_dir": (str, "runs/pretrain"),
    },
    "finetune": {
        "checkpoint": (str, None),  # unset: supervised baseline
        "scope": (str, "encoder_only"),
        "fraction": (float, 1.0),
        "lr": (float, 1e-4),
        "weight_decay": (float, 1e-6),
        "epochs": (int, 100),
        "batch_size": (int, 32),
        "seed": (int, 0),
        "repeats": (int, 10),
        "patience": (int, 20),
        "out_dir": (str, "runs/finetune"),
        "results_log": (str, "runs/results.tsv"),
    },
    "report": {
        "results_log": (str, "runs/results.tsv"),
        "out_dir": (str, "runs/report"),
    },
}


def default_config() -> dict[str, dict[str, Any]]:
    return {section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()}


def _coerce(section: str, key: str, raw: str) -> Any:
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigurationError(f"unknown config key {section}.{key}")
    kind, _ = SCHEMA[section][key]
    try:
        return kind(raw.strip())
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad value for {section}.{key}: {raw!r} ({err})") from err


def set_value(config: dict, dotted: str, raw: str) -> None:
    section, _, key = dotted.partition(".")
    if not key:
        raise ConfigurationError(f"config keys look like section.key, got {dotted!r}")
    config[section][key] = _coerce(section, key, raw)


def load_config(path: Path | str | None, overrides: list[str] | None = None) -> dict:
    """Config defaults, then the file's lines, then ``section.key=value`` overrides."""
    config = default_config()
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            dotted, eq, value = line.partition("=")
            if not eq:
                raise ConfigurationError(f"{path}:{lineno}: expected 'section.key = value'")
            set_value(config, dotted.strip(), value)
    for override in overrides or []:
        dotted, eq, value = override.partition("=")
        if not eq:
            raise ConfigurationError(f"override {override!r} is not of the form section.key=value")
        set_value(config, dotted.strip(), value)
    return config


def dump_config(config: dict) -> str:
    lines = []
    for section in sorted(config):
        for key in sorted(config[section]):
            value = config[section][key]
            if value is not None:
                lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"
