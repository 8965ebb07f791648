"""Experiment configuration: defaults, YAML files and ``--set`` overrides.

Resolution order is defaults, then the file, then command-line flags. The
resolved mapping is hashed over its canonical JSON form, so key order in the
file never changes the hash.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig
from .denoiser import TrainConfig
from .metrics import JudgeRules
from .schedule import NoiseSchedule, make_schedule

DEFAULTS: dict[str, Any] = {
    "schedule": {"T": 25, "beta_start": 1e-4, "beta_end": 0.02},
    "world": {"n_videos": 100, "frames": 8, "data_seed": 0},
    "denoiser": {
        "variant": "analytic",
        "mixture_seed": 0,
        "s2": 1e-4,
        "n_modes": 4,
        "spread": 1.5,
        "checkpoint": None,
        "train": {"steps": 3000, "batch": 256, "lr": 2e-3, "hidden": 128, "seed": 0, "checkpoint_every": 250},
    },
    "alignment": {"embedding_seed": 0, "hidden": 96, "d_feat": 64, "map_gain": 2.0, "box_gain": 1.0, "app_gain": 0.5},
    "attack": AttackConfig().to_dict(),
    "judge": json.loads(JudgeRules().to_json()),
    "experiment": {"n_runs": 100, "seed": 0, "edit": "default", "out_dir": "runs"},
    "downstream": {"train_videos": 200, "test_videos": 100, "seeds": [0, 1, 2, 3, 4], "horizon": 3,
                   "obs_noise": 0.3, "frames_per_video": 8},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"{where!r} is a section, got a scalar")
        out[k] = deep_merge(out[k], v, where) if isinstance(out[k], dict) else copy.deepcopy(v)
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` with ``value`` parsed as YAML (numbers, lists, null)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = deep_merge(cfg, loaded)
    for item in overrides or []:
        cfg = deep_merge(cfg, parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        schedule_of(cfg)
        attack_of(cfg)
        judge_of(cfg)
        TrainConfig(**cfg["denoiser"]["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["denoiser"]["variant"] not in ("analytic", "trained"):
        raise ConfigError("denoiser.variant must be analytic or trained")
    if cfg["world"]["frames"] < 1 or cfg["experiment"]["n_runs"] < 0:
        raise ConfigError("need frames >= 1 and n_runs >= 0")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def schedule_of(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))


def attack_of(cfg: dict) -> AttackConfig:
    return AttackConfig.from_dict(cfg["attack"])


def judge_of(cfg: dict) -> JudgeRules:
    return JudgeRules.from_json(json.dumps(cfg["judge"]))


def dump_yaml(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
