"""Single-document run configuration: defaults, file loading, overrides.

One JSON config drives every pipeline stage. `--set key.path=value` flags
override individual keys; the MODALTUNE_SEED environment variable overrides
the seed.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os


DEFAULT_CONFIG: dict = {
    "seed": 2024,
    "data": {
        "d_img": 96,
        "n_genes": 200,
        "n_pathways": 20,
        "n_classes": 2,
        "marker_pathways": [0, 1, 2],
        "risk_pathways": [3, 4],
        "n_img_min": 16,
        "n_img_max": 64,
        "rare_fraction": 0.05,
        "rare_threshold": 25,
        "censoring_target": 0.3,
        "sites": [
            {"name": "alpha", "n_patients": 300, "seed_offset": 1},
            {"name": "beta", "n_patients": 300, "seed_offset": 11},
        ],
        "ood_site": {"name": "gamma", "n_patients": 150, "seed_offset": 3},
    },
    "encoder": {
        "d_model": 64,
        "n_layers": 6,
        "n_blocks": 3,
        "n_heads": 4,
        "ff_dim": 128,
        "attention_mode": "dense",
        "segment_lengths": [32, 64],
        "dilation_ratios": [1, 2],
        "seed_offset": 11,
    },
    "modal": {
        "d_gp": 32,
        "n_t": 8,
        "smlp_hidden": 8,
        "smlp_depth": 2,
        "mixer_layers": 3,
        "mixer_expansion": 0.5,
        "mixer_dropout": 0.25,
        "use_clinical": False,
    },
    "adapter": {
        "n_heads": 4,
        "ff_ratio": 0.25,
        "dropout": 0.1,
        "d_final": 32,
        "fusion_ratio": 1.0,
        "seed_offset": 13,
    },
    "text": {
        "d_text": 64,
        "encoder": "stub",
        "projector_mode": "text_fixed",
        "projector_seed_offset": 17,
        "bin_texts": None,
    },
    "training": {
        "epochs": 30,
        "max_lr": 1e-4,
        "warmup_epochs": 10,
        "weight_decay": 5e-4,
        "batch_size": 1,
        "n_tasks": 3,
        "pan_cancer": False,
        "single_modal": False,
        "single_task_prompt": False,
        "no_text_embedding": False,
        "dropout_enabled": True,
        "kl_temperature": 1.0,
    },
    "evaluation": {
        "cph_penalizer": 0.1,
        "probe_c": 1.0,
        "probe_max_iter": 200,
        "ig_steps": 256,
        "km_alpha": 0.05,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    env_seed = os.environ.get("MODALTUNE_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    """Apply `dotted.key=value` overrides; values parse as JSON, else strings."""
    cfg = copy.deepcopy(cfg)
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return cfg


def config_digest(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
