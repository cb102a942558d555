"""Run configuration: flat dotted keys, presets, file and command-line overrides.

Resolution order is defaults, then preset, then config file, then ``--set``
overrides. The resolved dict is written next to every run's outputs; feeding
it back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .layers import MODALITIES, TASKS, FusionConfig
from .model import ModelConfig, TrainConfig

# Defaults follow the published model configuration; "desk" and "micro"
# shrink it to something that trains on a laptop CPU.
DEFAULTS = {
    "preset": "full",
    "seed": 0,
    "data.text_embedding_size": 768,
    "data.image_embedding_size": 2048,
    "data.audio_embedding_size": 128,
    "model.phase_embedding_size": 128,
    "model.gru_cells": 128,
    "model.measurement_count": 1000,
    "model.context_limit": 3,
    "model.tasks": "sar,sen,emo",
    "model.modalities": "text,video,audio",
    "model.freeze_phase": False,
    "fusion.interference_item": -0.3,
    "fusion.interference_coefficient": 0.5,
    "fusion.mode": "interference",
    "fusion.trainable_phase": False,
    "ablation.no_context": False,
    "ablation.concat_fusion": False,
    "ablation.trad_head": False,
    "train.learning_rate": 0.0075,
    "train.batch_size": 64,
    "train.dropout": 0.2,
    "train.epochs": 100,
    "train.early_stop_patience": 10,
    "train.lr_decay_factor": 0.5,
    "train.lr_patience": 5,
    "train.w_sar": 1.0 / 3.0,
    "train.w_sen": 1.0 / 3.0,
    "train.w_emo": 1.0 / 3.0,
    "train.l2_coefficient": 1e-4,
    "train.select_by": "loss",
    "generate.n_dialogues": 1000,
    "generate.latent_dim": 2,
    "generate.noise": 0.1,
    "generate.drift": 0.25,
    "generate.prior_noise": 0.1,
    "generate.emotion_noise": 0.05,
    "split.train": 0.7,
    "split.dev": 0.15,
    "eval.split": "test",
    "paths.data": None,
    "paths.train": None,
    "paths.dev": None,
    "paths.test": None,
    "paths.checkpoint": None,
    "paths.out": "runs",
    "analyze.pair_count": 800,
    "analyze.pairs": "sar:sen,sen:emo,sar:emo",
    "analyze.indexwise": False,
    "gradcheck.step": 1e-5,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.batch_size": 2,
    "gradcheck.sabotage": "",
    "sweep.grid": True,
    "sweep.context": True,
    "sweep.variants": "concat,no_context,trad",
    "sweep.tasks": "",
    "sweep.modalities": "",
    "report.figures": True,
}

PRESETS = {
    "full": {},
    "desk": {
        "data.text_embedding_size": 32,
        "data.image_embedding_size": 24,
        "data.audio_embedding_size": 16,
        "model.phase_embedding_size": 16,
        "model.gru_cells": 16,
        "model.measurement_count": 64,
        "train.learning_rate": 0.5,
        "train.batch_size": 16,
        "train.epochs": 50,
    },
    "micro": {
        "data.text_embedding_size": 6,
        "data.image_embedding_size": 5,
        "data.audio_embedding_size": 4,
        "model.phase_embedding_size": 4,
        "model.gru_cells": 4,
        "model.measurement_count": 4,
        "train.learning_rate": 0.5,
        "train.batch_size": 2,
        "train.epochs": 20,
        "generate.n_dialogues": 50,
    },
}


def _coerce(key: str, raw, reference):
    if not isinstance(raw, str) or isinstance(reference, str):
        return raw
    if isinstance(reference, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(reference, int):
            return int(raw)
        if isinstance(reference, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if reference is None:
        return None if raw.lower() in ("", "none", "null") else raw
    return raw


def resolve(config_file=None, overrides=None, preset=None, fallback=None) -> dict:
    """Merge defaults, preset, config file and ``key=value`` overrides.

    The preset comes from an override, then ``preset``, then the file, then
    ``fallback``.
    """
    file_cfg = {}
    if config_file:
        try:
            file_cfg = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_file}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    pairs = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    chosen = pairs.get("preset") or preset or file_cfg.get("preset") or fallback or DEFAULTS["preset"]
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[chosen])
    for source in (file_cfg, pairs):
        for k, v in source.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v, DEFAULTS[k])
    cfg["preset"] = chosen
    return cfg


def _names(value: str, allowed, what: str) -> tuple:
    items = tuple(s.strip() for s in str(value).split(",") if s.strip())
    for s in items:
        if s not in allowed:
            raise ConfigError(f"unknown {what} {s!r}; choose from {list(allowed)}")
    return items


def tasks_of(value) -> tuple:
    return _names(value, TASKS, "task")


def modalities_of(value) -> tuple:
    return _names(value, MODALITIES, "modality")


def data_dims(cfg: dict) -> dict:
    return {"text": cfg["data.text_embedding_size"], "video": cfg["data.image_embedding_size"],
            "audio": cfg["data.audio_embedding_size"]}


def model_config(cfg: dict, dims: dict | None = None) -> ModelConfig:
    fusion = FusionConfig(
        cos_phi=float(cfg["fusion.interference_item"]),
        alpha_sq=float(cfg["fusion.interference_coefficient"]),
        mode="concat" if cfg["ablation.concat_fusion"] else cfg["fusion.mode"],
        trainable_phase=bool(cfg["fusion.trainable_phase"]),
    )
    return ModelConfig(
        dims=dict(dims or data_dims(cfg)),
        embedding_dim=int(cfg["model.phase_embedding_size"]),
        hidden_dim=int(cfg["model.gru_cells"]),
        measurement_count=int(cfg["model.measurement_count"]),
        context_limit=int(cfg["model.context_limit"]),
        tasks=tasks_of(cfg["model.tasks"]),
        modalities=modalities_of(cfg["model.modalities"]),
        fusion=fusion,
        no_context=bool(cfg["ablation.no_context"]),
        trad_head=bool(cfg["ablation.trad_head"]),
        freeze_phase=bool(cfg["model.freeze_phase"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(cfg["train.learning_rate"]),
        batch_size=int(cfg["train.batch_size"]),
        dropout=float(cfg["train.dropout"]),
        epochs=int(cfg["train.epochs"]),
        early_stop_patience=int(cfg["train.early_stop_patience"]),
        lr_decay_factor=float(cfg["train.lr_decay_factor"]),
        lr_patience=int(cfg["train.lr_patience"]),
        loss_weights={t: float(cfg[f"train.w_{t}"]) for t in TASKS},
        l2_coefficient=float(cfg["train.l2_coefficient"]),
        select_by=cfg["train.select_by"],
        seed=int(cfg["seed"]),
    )


def recipe(cfg: dict) -> dict:
    return {k: cfg[f"generate.{k}"] for k in ("latent_dim", "noise", "drift", "prior_noise", "emotion_noise")}


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
