"""Run configuration: strict JSON schema, defaults, content hashing.

Unknown keys are rejected anywhere in the document; absent optional keys
take defaults. The fully resolved config and its hash are echoed into
every output so a report is reproducible from its own header.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

__all__ = ["ConfigError", "DEFAULT_CONFIG", "resolve_config", "load_config", "config_hash"]

WORKDIR_ENV = "LATENTADV_WORKDIR"


class ConfigError(ValueError):
    """The config document violates the schema."""


DEFAULT_CONFIG = {
    "data": {
        "n_per_class": 600,
        "seed": 1001,
    },
    "models": {
        "latent_dim": 64,
        "codec": "linear",
        "classifier_widths": [128, 96, 64],
        "transfer_width": 112,
        "seed": 2002,
        "train": {
            "lr": 1e-2,
            "batch_size": 64,
            "momentum": 0.9,
            "optimizer": "momentum",
            "codec_epochs": 30,
            "score_epochs": 40,
            "classifier_epochs": 100,
        },
    },
    "schedule": {
        "T_train": 100,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "ddim_steps": 20,
    },
    "attack": {
        "eps_start": 0.05,
        "eps_end": 0.3,
        "eps_step": 0.02,
        "iters_per_radius": 10,
        "step_size": None,
        "grad_method": "mi-fgsm",
        "momentum": 1.0,
        "l1_weight": 0.1,
        "transforms": ["hflip", "vflip", "rot90", "crop_resize", "channel_dropout"],
        "timestep_index": 2,
        "guidance_w": 1.0,
        "seed": 3003,
    },
    "eval": {
        "split": "test",
    },
    "paths": {
        "workdir": "run",
    },
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = {}
    for key, default in defaults.items():
        if key not in given:
            out[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            if not isinstance(given[key], dict):
                raise ConfigError(f"{path}{key}: expected an object")
            out[key] = _merge(default, given[key], f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(given[key])
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: dict) -> None:
    d = cfg["data"]
    _require(isinstance(d["n_per_class"], int) and d["n_per_class"] >= 1,
             "data.n_per_class must be an integer >= 1")
    m = cfg["models"]
    _require(isinstance(m["latent_dim"], int) and m["latent_dim"] >= 1,
             "models.latent_dim must be an integer >= 1")
    _require(m["codec"] in ("identity", "linear"),
             "models.codec must be 'identity' or 'linear'")
    _require(isinstance(m["classifier_widths"], list) and len(m["classifier_widths"]) >= 1
             and all(isinstance(x, int) and x >= 2 for x in m["classifier_widths"]),
             "models.classifier_widths must be a non-empty list of integers >= 2")
    _require(isinstance(m["transfer_width"], int) and m["transfer_width"] >= 2,
             "models.transfer_width must be an integer >= 2")
    t = m["train"]
    _require(t["lr"] > 0 and t["batch_size"] >= 1, "models.train: lr > 0 and batch_size >= 1")
    _require(all(t[k] >= 0 for k in ("codec_epochs", "score_epochs", "classifier_epochs")),
             "models.train epochs must be >= 0")
    _require(t["optimizer"] in ("momentum", "sgd"), "models.train.optimizer unknown")
    s = cfg["schedule"]
    _require(isinstance(s["T_train"], int) and s["T_train"] >= 1,
             "schedule.T_train must be an integer >= 1")
    _require(0.0 < s["beta_start"] <= s["beta_end"] < 1.0,
             "schedule betas must satisfy 0 < beta_start <= beta_end < 1")
    _require(isinstance(s["ddim_steps"], int) and 1 <= s["ddim_steps"] <= s["T_train"],
             "schedule.ddim_steps must be in [1, T_train]")
    a = cfg["attack"]
    _require(0 < a["eps_start"] <= a["eps_end"], "attack radii must satisfy 0 < start <= end")
    _require(a["eps_step"] > 0, "attack.eps_step must be > 0")
    _require(isinstance(a["iters_per_radius"], int) and a["iters_per_radius"] >= 0,
             "attack.iters_per_radius must be an integer >= 0")
    _require(a["step_size"] is None or a["step_size"] > 0,
             "attack.step_size must be null or > 0")
    _require(a["grad_method"] in ("plain-gd", "fgsm-sign", "mi-fgsm"),
             "attack.grad_method unknown")
    _require(a["l1_weight"] >= 0, "attack.l1_weight must be >= 0")
    _require(isinstance(a["transforms"], list), "attack.transforms must be a list")
    _require(isinstance(a["timestep_index"], int)
             and 1 <= a["timestep_index"] <= s["ddim_steps"],
             "attack.timestep_index must be in [1, schedule.ddim_steps]")
    e = cfg["eval"]
    _require(e["split"] in ("train", "val", "test"), "eval.split unknown")


def resolve_config(given: dict | None = None) -> dict:
    """Merge a partial document over the defaults, validate, apply env overrides."""
    cfg = _merge(DEFAULT_CONFIG, given or {}, "")
    workdir = os.environ.get(WORKDIR_ENV)
    if workdir:
        cfg["paths"]["workdir"] = workdir
    _validate(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return resolve_config(doc)


def config_hash(cfg: dict) -> str:
    """Content hash of the resolved config (sha256 over canonical JSON)."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
