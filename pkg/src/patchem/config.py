"""Experiment configuration: defaults, JSON loading, overrides, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources

import jsonschema

DEFAULTS = {
    "basis": {"L": 9, "c": 0.5, "alpha_threshold": 1e-6, "n_quad": 128},
    "simulation": {
        "N": 540, "gamma": 0.4, "snr": 10.0, "L": None, "mode": "separated",
        "method": "expanded-volume", "seed": 0, "downsample_to": None,
        "on_infeasible": "saturate", "n_micrographs": 1, "phantom": "blobs",
        "phantom_seed": 7,
    },
    "em": {
        "K": 200, "grid_seed": 11, "S": 1.0, "eps": 1e-4, "schedule": [[2, 15], [4, 15]],
        "seed": 0, "init_seed": 1, "stop_mode": "literal", "stop_statistic": "loglik",
        "chunk": 32, "assembly": "backprojection", "memory_budget": 2 * 1024 ** 3,
        "patch_policy": "crop",
    },
    "pick": {"empty_threshold": 0.05, "empty_energy_fraction": 0.01,
             "min_f1": None, "min_accuracy": None},
    "evaluate": {"n_rotations": 3000, "refine_steps": 20, "min_resolution_shell": None,
                 "min_fsc_up_to": None},
    "paths": {"output": "out", "cache": None},
}

# sections that change numerical results; paths and thresholds do not
_HASHED = ("basis", "simulation", "em")


class ConfigError(ValueError):
    pass


def schema() -> dict:
    text = resources.files("patchem").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(val.strip())
    return cfg


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from None
    sched = cfg["em"]["schedule"]
    if any(b[0] < a[0] for a, b in zip(sched, sched[1:])):
        raise ConfigError("em.schedule must be non-decreasing in ell_max")
    return cfg


def load(path=None, overrides=None) -> dict:
    """Defaults, then the JSON file at ``path``, then overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    """Content hash of the result-affecting sections."""
    sub = {k: cfg.get(k) for k in _HASHED}
    blob = json.dumps(sub, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ell_max(cfg: dict) -> int:
    return max(int(e) for e, _ in cfg["em"]["schedule"])
