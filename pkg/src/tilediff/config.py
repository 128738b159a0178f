"""Run configuration: JSON file with a fixed schema, full defaults,
environment-variable overrides, and canonical serialization."""

import hashlib
import json
import os

from .errors import ConfigurationError

ENV_PREFIX = "TILEDIFF_"

DEFAULTS = {
    "schedule": {
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "sampler": {
        "num_inference_steps": 50,
        "guidance_weight": 1.75,
        "eta": 0.0,
        "seed": 0,
    },
    "train": {
        "iterations": 2000,
        "batch_size": 16,
        "learning_rate": 1e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "seed": 0,
        "loss_log_interval": 50,
    },
    "fusion": {
        "stride": 16,
        "window_sigma": None,  # null -> patch_h / 4
        "patch_h": 32,
        "patch_w": 32,
    },
    "canvas": {
        "height": 128,
        "width": 128,
        "cell_h": 32,
        "cell_w": 32,
    },
    "dataset": {
        "n": 400,
        "families": ["stripes", "dots", "checker", "noise"],
        "seed": 0,
        "patch_h": 32,
        "patch_w": 32,
        "manifest": None,
    },
    "prior": {
        "cond_noise_var": 0.1,
        "sample_steps": 100,
        "guidance_weight": 1.0,
        "width": 64,
        "classes": ["stripes", "checker"],
        "scenes_per_class": 24,
        "iterations": 1500,
    },
    "eval": {
        "crop": 32,
        "crops_per_canvas": 16,
        "seed": 0,
    },
    "paths": {
        "denoiser": None,
        "prior": None,
    },
    "workers": 1,
}


def _merge(defaults, overrides, path=""):
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"config section {path or '<root>'} must be a mapping")
    out = {}
    for key, default in defaults.items():
        if key in overrides:
            val = overrides[key]
            if isinstance(default, dict):
                out[key] = _merge(default, val, f"{path}{key}.")
            else:
                out[key] = val
        else:
            out[key] = json.loads(json.dumps(default))
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s): {sorted(path + k for k in unknown)}")
    return out


def _apply_env(cfg, environ):
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("_")
        node = cfg
        # greedy longest-key match so WINDOW_SIGMA resolves inside sections
        while parts:
            for take in range(len(parts), 0, -1):
                key = "_".join(parts[:take])
                if isinstance(node, dict) and key in node:
                    if take == len(parts):
                        try:
                            node[key] = json.loads(raw)
                        except json.JSONDecodeError:
                            node[key] = raw
                        parts = []
                    else:
                        node = node[key]
                        parts = parts[take:]
                    break
            else:
                raise ConfigurationError(
                    f"environment override {name} does not match any config key")
    return cfg


def load_config(path=None, environ=None, overrides=None):
    """Defaults, then file, then env overrides, then explicit overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
    cfg = _merge(DEFAULTS, raw)
    _apply_env(cfg, environ if environ is not None else os.environ)
    for key, val in (overrides or {}).items():
        node = cfg
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = val
    return cfg


def canonical(cfg):
    """Canonical serialized form (idempotent normalization)."""
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()
