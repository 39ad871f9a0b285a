"""Run configuration: a JSON file with data, model, train, pipelines and ensemble sections.

Any key left out takes the default below; any key not listed here is an error.
The hash of the fully resolved config is stamped on every output.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "manifest": None,  # training manifest CSV (path,label); null generates synthetic data
        "test_manifest": None,  # held-out manifest; null with a manifest means a 50/50 split of it
        "synthetic_n": 512,  # training images generated when no manifest is given
        "synthetic_test_n": 256,  # held-out images, generated from an independent seed
        "resolution": 64,  # side length of generated images
        "difficulty": 0.3,  # 0 = lesions obvious, 1 = no signal
        "data_seed": 2024,  # generator seed for the training images
        "test_seed": 102024,  # generator seed for the held-out images
        "train_fraction": 0.5,  # split fraction when only one manifest is given
        "split_seed": 2023,
    },
    "model": {
        "preset": "desk",  # desk | b0 | b1 | b2
        "resolution": None,  # null keeps the preset's resolution
        "num_outputs": 1,
        "init_from": None,  # checkpoint to fine-tune from; a head of a different size is re-initialized
    },
    "train": {
        "epochs": 10,
        "batch_size": 64,
        "lr": 0.001,
        "seed": 2024,
        "selection": "train",  # train | val (val uses the held-out set)
    },
    "pipelines": {
        "preset": "B",  # A = resize only, B/C = resize then center crop
        "rotation": True,
        "max_degrees": 180.0,
        "flip": True,
        "flip_p": 0.5,
        "jitter": True,
        "brightness": [0.8, 1.2],
        "contrast": [0.8, 1.2],
        "saturation": [0.8, 1.2],
        "hue": [-0.05, 0.05],
    },
    "ensemble": {
        # one member per entry; member i trains with seed train.seed + seed_offset
        "members": [
            {"pipeline": "A", "seed_offset": 0},
            {"pipeline": "B", "seed_offset": 1},
            {"pipeline": "C", "seed_offset": 2},
        ],
    },
}

_MEMBER_KEYS = {"pipeline", "seed_offset", "checkpoint"}


class ConfigError(ValueError):
    pass


def _merge(section: str, user: Dict[str, Any]) -> Dict[str, Any]:
    if not isinstance(user, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(user) - set(DEFAULTS[section])
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    out = copy.deepcopy(DEFAULTS[section])
    out.update(copy.deepcopy(user))
    return out


def resolve(user: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Fill defaults and validate; returns a new dict."""
    user = user or {}
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = {name: _merge(name, user.get(name, {})) for name in DEFAULTS}
    for m in cfg["ensemble"]["members"]:
        extra = set(m) - _MEMBER_KEYS
        if extra:
            raise ConfigError(f"unknown ensemble member keys: {sorted(extra)}")
        if m.get("pipeline", "A") not in ("A", "B", "C"):
            raise ConfigError(f"bad member pipeline {m.get('pipeline')!r}")
    if not cfg["ensemble"]["members"]:
        raise ConfigError("ensemble needs at least one member")
    if cfg["pipelines"]["preset"] not in ("A", "B", "C"):
        raise ConfigError(f"bad pipeline preset {cfg['pipelines']['preset']!r}")
    if cfg["train"]["selection"] not in ("train", "val"):
        raise ConfigError(f"bad selection {cfg['train']['selection']!r}")
    return cfg


def canonical(cfg: Dict[str, Any]) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def load(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    cfg = resolve(user)
    base = path.parent
    for key in ("manifest", "test_manifest"):
        if cfg["data"][key] is not None:
            cfg["data"][key] = str((base / cfg["data"][key]).resolve())
    if cfg["model"]["init_from"] is not None:
        cfg["model"]["init_from"] = str((base / cfg["model"]["init_from"]).resolve())
    for m in cfg["ensemble"]["members"]:
        if m.get("checkpoint"):
            m["checkpoint"] = str((base / m["checkpoint"]).resolve())
    return cfg
