"""Flat JSON run configuration with per-task defaults.

Unknown keys are rejected so that a misspelled hyperparameter fails loudly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

__all__ = ["ConfigError", "default_config", "load_config", "config_hash", "run_config", "TASKS",
           "GENERATION_KEYS"]

TASKS = ("portfolio", "power")


class ConfigError(ValueError):
    pass


_COMMON = {
    "seed": 0,
    "n_instances": 2000,
    "split": [0.8, 0.1, 0.1],
    "split_seed": 0,
    # surrogate pre-training
    "surrogate_samples": 2000,
    "surrogate_epochs": 40,
    "surrogate_lr": 3e-3,
    "surrogate_lr_decay": 0.95,
    "surrogate_batch": 64,
    "surrogate_width": 64,
    "surrogate_depth": 2,
    "surrogate_seed": 1,
    "n_start": 200,
    "curriculum_fraction": 0.5,
    # proxy training
    "lr": 1e-3,
    "lr_surrogate": 1e-3,
    "lr_decay": 1.0,
    "rho": 0.1,
    "rho_dynamics": 0.1,
    "lambda_dynamics": 0.0,
    "epochs": 50,
    "batch_size": 64,
    "period": 1,
    "aggregation": "mean",
    "train_surrogate": True,
    "proxy_width": 200,
    "proxy_depth": 5,
    "train_seed": 0,
}

_TASK = {
    "portfolio": {
        "n_assets": 10,
        "risk_scale": 200.0,
        "horizon": 28_800.0,
        "dt": 100.0,
        "price_median": 100.0,
        "price_log_sd": 0.25,
        "surrogate_epochs": 15,
        "surrogate_lr": 1e-2,
        "diffusion_width": 100,
        "n_paths": 16,
        "noise_seed": 0,
        "proxy_width": 50,
        "proxy_depth": 2,
        "period": 10,
    },
    "power": {
        "case": "case9",
        "load_low": 0.8,
        "load_high": 1.2,
        "stability_margin": 0.005,
        "solver_stride": 20,
        "box_margin": 0.5,
        "rk45_rtol": 1e-7,
        "lr_surrogate": 1e-5,
        "rho_dynamics": 100.0,
        "lambda_dynamics": 10.0,
        "aggregation": "time_sum",
    },
}


# keys fixed when a dataset is generated; later stages must not change them
GENERATION_KEYS = ("seed", "n_instances", "n_assets", "risk_scale", "horizon", "dt",
                   "price_median", "price_log_sd", "case", "load_low", "load_high")


def default_config(task: str) -> dict:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    cfg = dict(_COMMON)
    cfg.update(_TASK[task])
    cfg["task"] = task
    return cfg


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return [float(v) for v in value]
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key} must be a {type(default).__name__}")
    return value


def load_config(source=None, task: str | None = None, **overrides) -> dict:
    """Defaults for ``task`` updated from a JSON file path, a dict and ``overrides``."""
    given = {}
    if source is not None:
        if isinstance(source, dict):
            given = dict(source)
        else:
            p = Path(source)
            if not p.exists():
                raise ConfigError(f"config file {p} not found")
            try:
                given = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
            if not isinstance(given, dict):
                raise ConfigError("config file must hold a JSON object")
    given.update(overrides)
    task = given.pop("task", task)
    if task is None:
        raise ConfigError("task not specified")
    cfg = default_config(task)
    unknown = sorted(set(given) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in given.items():
        cfg[k] = _coerce(k, v, cfg[k])
    if abs(sum(cfg["split"]) - 1.0) > 1e-9 or len(cfg["split"]) != 3:
        raise ConfigError("split must hold three fractions summing to 1")
    if cfg["aggregation"] not in ("mean", "time_sum"):
        raise ConfigError("aggregation must be 'mean' or 'time_sum'")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def run_config(dataset_config: dict, source=None, task: str | None = None) -> dict:
    """Configuration for a stage that consumes a dataset.

    Starts from the dataset's own configuration and applies ``source`` (file
    path or dict).  Changing a generation key or the task is an error.
    """
    ds_task = dataset_config["task"]
    if task is not None and task != ds_task:
        raise ConfigError(f"task {task!r} does not match the dataset ({ds_task!r})")
    raw = {}
    if source is not None:
        load_config(source, task=ds_task)  # validates keys and types
        raw = dict(source) if isinstance(source, dict) else json.loads(Path(source).read_text())
    if raw.pop("task", ds_task) != ds_task:
        raise ConfigError(f"config task does not match the dataset ({ds_task!r})")
    for k in GENERATION_KEYS:
        if k in raw and k in dataset_config and raw[k] != dataset_config[k]:
            raise ConfigError(f"{k} is fixed by the dataset ({dataset_config[k]!r})")
    return load_config(dict(dataset_config, **raw))
