from __future__ import annotations

import copy
import os
from types import SimpleNamespace
from typing import Any

from .io_ops import yaml_to_object

SEED_ENV_VAR = "PYSLUCACHE_SEED"

# YAML files override any subset of these keys.
DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "frontend": {
        "sample_rate": 16000,
        "window_len": 401,
        "hop": 80,
        "n_filters": 60,
        "conv_channels": 60,
        "conv_kernel": 5,
        "pool": 2,
        "leaky_slope": 0.2,
        "bn_eps": 1e-5,
        "min_hz": 30.0,
        "max_hz": 7800.0,
        "stream_step": 10,
        "log_floor": 1e-8,
        "calibration_clips": 8,
    },
    "l1": {
        "k": 70,
        "tol": 1e-4,
        "max_iter": 300,
        "distribution": "softmax",  # softmax | inverse
        "temperature": 0.05,
        "fit_on_augmented": True,
    },
    "l2": {
        "hidden": 128,
        "n_phonemes": 42,
        "blank_index": 0,
        "classifier_bias": True,
    },
    "cache": {
        "capacity": 60,
        "per_intent_cap": 8,
        "bucket_boundaries": [2.7, 4.0],
        "bypass_l1_for_bucket_1": True,
        "preload_path": None,
    },
    "thresholds": {
        "mode": "static",  # static | mlp
        "l1": [1.0, 1.0, 1.0],
        "l2": [1.5, 1.5, 1.5],
        "mlp_path": None,
        "mlp_hidden": 64,
        "mlp_epochs": 2000,
        "mlp_lr": 1e-2,
        "length_scale": 100.0,
    },
    "cloud": {
        "push_every": 100,
        "finetune": True,
        "finetune_every": 1,
        "in_domain_fraction": 0.0,
        "trace_path": None,
        "augment": {
            "time_shift_pct": [-5.0, 5.0],
            "freq_shift_pct": [-10.0, 10.0],
            "noise_pct": 5.0,
            "versions": 5,
        },
        "train": {
            "lr": 1e-4,
            "batch_size": 16,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "max_epochs": 50,
            "min_improvement": 0.01,
            "patience": 3,
            "min_epochs": 0,
        },
    },
    "latency": {
        "l1_hit_ms": 96.0,
        "l2_hit_ms": 185.0,
        "rtf_mean": 0.30,
        "rtf_sd": 0.033,
        "rtf_min": 0.29 * 0.8,
        "rtf_max": 0.34 * 1.2,
        "active_power_mw": 200.6,
    },
    "benchmark": {
        "workers": 1,
        "install_during_test": False,
    },
    "synth": {
        "n_words": 24,
        "n_transcripts": 10,
        "words_per_transcript": [2, 6],
        "phonemes_per_word": [2, 4],
        "n_intents": None,
        "speakers": 3,
        "repeats": 5,
        "jitter": 1.0,
        "phoneme_s": 0.16,
        "word_gap_s": 0.05,
        "edge_silence_s": 0.1,
        "far_fraction": 0.0,
        "sample_rate": 16000,
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Merge override into a copy of base, refusing keys the defaults do not know"""

    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in merged:
            raise ValueError(f"Unknown config key: {path}{key}")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value, f"{path}{key}.")
        else:
            merged[key] = value
    return merged


def _to_namespace(data: Any) -> Any:
    if isinstance(data, dict):
        return SimpleNamespace(**{k: _to_namespace(v) for k, v in data.items()})
    return data


def config_to_dict(config: SimpleNamespace | dict) -> dict:
    """Turn a (nested) config namespace back into plain data"""

    if isinstance(config, SimpleNamespace):
        return {k: config_to_dict(v) for k, v in vars(config).items()}
    if isinstance(config, dict):
        return {k: config_to_dict(v) for k, v in config.items()}
    if isinstance(config, tuple):
        return [config_to_dict(v) for v in config]
    if isinstance(config, list):
        return [config_to_dict(v) for v in config]
    return config


def load_config(yaml_path: str | None = None, overrides: dict | None = None) -> SimpleNamespace:
    """
    Build the run configuration: defaults, then the YAML file, then the environment seed, then overrides

    Args:
        - yaml_path (str | None): Optional YAML config file
        - overrides (dict | None): Nested dict applied last (CLI flags land here)

    Returns:
        - SimpleNamespace: Nested configuration namespace
    """

    data = copy.deepcopy(DEFAULT_CONFIG)

    if yaml_path is not None:
        file_data = yaml_to_object(yaml_path, to_object=False) or {}
        data = _deep_merge(data, file_data)

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")

    if overrides:
        data = _deep_merge(data, overrides)

    _validate(data)
    return _to_namespace(data)


def _validate(data: dict) -> None:
    cache = data["cache"]
    if cache["capacity"] <= 0 or cache["per_intent_cap"] <= 0:
        raise ValueError("cache.capacity and cache.per_intent_cap must be positive")
    bounds = list(cache["bucket_boundaries"])
    if len(bounds) != 2 or not (0 < bounds[0] < bounds[1]):
        raise ValueError(f"cache.bucket_boundaries must be two increasing positive values, got {bounds}")
    if data["l1"]["distribution"] not in ("softmax", "inverse"):
        raise ValueError(f"l1.distribution must be 'softmax' or 'inverse', got {data['l1']['distribution']!r}")
    if data["l1"]["temperature"] <= 0:
        raise ValueError("l1.temperature must be positive")
    if data["thresholds"]["mode"] not in ("static", "mlp"):
        raise ValueError(f"thresholds.mode must be 'static' or 'mlp', got {data['thresholds']['mode']!r}")
    for level in ("l1", "l2"):
        if len(data["thresholds"][level]) != 3:
            raise ValueError(f"thresholds.{level} needs one value per bucket (3)")
    if not 0.0 <= data["cloud"]["in_domain_fraction"] <= 1.0:
        raise ValueError("cloud.in_domain_fraction must lie in [0, 1]")
    if data["cloud"]["push_every"] <= 0:
        raise ValueError("cloud.push_every must be positive")
