"""Experiment configuration: TOML file plus command-line overrides.

Precedence is flags > file > defaults. Unknown sections or keys are
rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .estimators import ESTIMATORS


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "out": "runs",
    "check": {
        "registry": None,  # path to an alternative golden registry
        "sampler_samples": 100_000,
        "temperature_samples": 10_000,
        "estimator_budget": 100_000,
        "samples_per_estimate": 5,
        "fd_trials": 100,
    },
    "estimate": {
        "instances": ["bench-k3t3"],
        "estimators": list(ESTIMATORS),
        "budgets": [2, 4, 8, 16],
        "taus": [1.0, 0.5],
        "seeds": [0],
        "replications": 2000,
        "c": 1.0,
        "workers": 1,
    },
    "train": {
        "K": 5,
        "V": 20,
        "T": 10,
        "n": 2000,
        "n_valid": 200,
        "n_test": 200,
        "embed_dim": 16,
        "hidden_dim": 32,
        "init_scale": 0.1,
        "data_seed": 0,
        "estimator": "gumbel_crf_st",
        "n_samples": 1,
        "baseline_c": 0.0,
        "beta_entropy": 1.0,
        "tau_init": 1.0,
        "tau_floor": 0.5,
        "tau_decay": 0.95,
        "word_dropout_init": 0.3,
        "word_dropout_zero_epoch": 10,
        "batch_size": 20,
        "lr": 0.1,
        "clip_norm": 5.0,
        "epochs": 15,
        "nll_samples": 100,
        "variance_probes": 8,
        "eval_items": 200,
    },
    "sample": {
        "table": None,
        "n": 5,
        "tau": 0.01,
        "samplers": ["ffbs", "gumbelized_ffbs", "pm_mrf"],
    },
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = _coerce(base[key], val, f"{where}{key}")
    return out


def _coerce(default, val, name):
    if default is None or val is None:
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"{name} must be true or false, got {val!r}")
        return val
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"{name} must be an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{name} must be a number, got {val!r}")
        return float(val)
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"{name} must be a list, got {val!r}")
        return val
    if isinstance(default, str) and not isinstance(val, str):
        raise ConfigError(f"{name} must be a string, got {val!r}")
    return val


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None


def resolve(path=None, seed=None, out=None, estimator=None, tau=None, budget=None) -> dict:
    """Defaults, then the file at ``path``, then any flag given (not None)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, load_file(path), "")
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    if estimator is not None:
        if estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {estimator!r}; choose from {', '.join(ESTIMATORS)}")
        cfg["estimate"]["estimators"] = [estimator]
        cfg["train"]["estimator"] = estimator
    if tau is not None:
        if not tau > 0:
            raise ConfigError(f"--tau must be positive, got {tau}")
        cfg["estimate"]["taus"] = [float(tau)]
        cfg["sample"]["tau"] = float(tau)
        cfg["train"]["tau_init"] = float(tau)
        cfg["train"]["tau_floor"] = min(cfg["train"]["tau_floor"], float(tau))
    if budget is not None:
        if budget < 1:
            raise ConfigError(f"--budget must be positive, got {budget}")
        cfg["estimate"]["budgets"] = [int(budget)]
        cfg["sample"]["n"] = int(budget)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    est = cfg["estimate"]
    bad = [e for e in est["estimators"] if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators {bad}; choose from {', '.join(ESTIMATORS)}")
    if any(not (isinstance(b, int) and b >= 1) for b in est["budgets"]):
        raise ConfigError("estimate.budgets must be positive integers")
    if any(not t > 0 for t in est["taus"]):
        raise ConfigError("estimate.taus must be positive")
    if cfg["train"]["estimator"] not in ESTIMATORS:
        raise ConfigError(f"unknown train.estimator {cfg['train']['estimator']!r}")
    if not cfg["sample"]["tau"] > 0:
        raise ConfigError("sample.tau must be positive")
    for name in cfg["sample"]["samplers"]:
        if name not in ("ffbs", "gumbelized_ffbs", "pm_mrf"):
            raise ConfigError(f"unknown sampler {name!r}")


def dump(cfg: dict) -> str:
    """TOML text of ``cfg`` (None values are omitted)."""
    lines = []
    for key, val in cfg.items():
        if not isinstance(val, dict) and val is not None:
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in cfg.items():
        if isinstance(val, dict):
            lines.append(f"\n[{key}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in val.items() if v is not None)
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def write(cfg: dict, path) -> None:
    Path(path).write_text(dump(cfg))
