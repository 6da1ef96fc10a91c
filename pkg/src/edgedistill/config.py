"""Flat key-value configuration with canonical hashing.

Config files are plain text, one `key = value` per line, `#` comments.
Every hyperparameter named across the pipeline appears here with its
published default. `EDGEDISTILL_SEED` in the environment overrides the
seed after file parsing; CLI flags override last.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass

from .errors import ConfigError

SEED_ENV_VAR = "EDGEDISTILL_SEED"


@dataclass
class Config:
    seed: int = 0

    # synthetic benchmark
    n_classes: int = 8
    n_distractors: int = 8
    feature_dim: int = 64
    input_dim: int = 64
    samples_per_class: int = 200
    noise_sigma: float = 0.1
    test_fraction: float = 0.25

    # student encoder
    hidden_dims: tuple = (512, 512)

    # curation
    tau_c: float = 0.25
    temperature: float = 100.0

    # stage 1 distillation
    stage1_lr: float = 1e-4
    stage1_min_lr: float = 5e-6
    stage1_weight_decay: float = 0.05
    stage1_epochs: int = 120
    batch_size: int = 32
    modalities: str = "both"

    # quantization
    bits: int = 8
    quant_mode: str = "static"
    calibration_pairs: int = 64
    calibrate_from: str = "curated"  # curated | raw

    # stage 2 contrastive QAT
    margin: float = 0.3
    neg_set_size: int = 3
    neg_pool_size: int = 10
    sampling: str = "semi-hard"
    stage2_lr: float = 1e-6
    stage2_epochs: int = 30
    stage2_weight_decay: float = 0.0
    triplet_batch_size: int = 256
    positive_source: str = "cross-modal"

    def replace(self, **kwargs):
        return dataclasses.replace(self, **kwargs)


def _parse_value(raw, field_type, key):
    raw = raw.strip()
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
        if field_type is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text, base=None) -> Config:
    cfg = base or Config()
    fields = {f.name: f for f in dataclasses.fields(Config)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _parse_value(raw, type(getattr(cfg, key)), key)
    return cfg.replace(**updates)


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    if path is not None:
        try:
            with open(path) as fh:
                cfg = parse_config_text(fh.read(), base=cfg)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg = cfg.replace(seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"bad {SEED_ENV_VAR} value {env_seed!r}") from exc
    if overrides:
        cfg = cfg.replace(**overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: Config):
    if cfg.quant_mode not in ("static", "dynamic"):
        raise ConfigError(f"quant_mode must be static or dynamic, got {cfg.quant_mode!r}")
    if cfg.sampling not in ("semi-hard", "hard"):
        raise ConfigError(f"sampling must be semi-hard or hard, got {cfg.sampling!r}")
    if cfg.modalities not in ("both", "rgb", "nonrgb"):
        raise ConfigError(f"modalities must be both/rgb/nonrgb, got {cfg.modalities!r}")
    if cfg.calibrate_from not in ("curated", "raw"):
        raise ConfigError(f"calibrate_from must be curated or raw, got {cfg.calibrate_from!r}")
    if cfg.bits < 2:
        raise ConfigError("bits must be >= 2")
    if not 0.0 <= cfg.tau_c <= 1.0:
        raise ConfigError("tau_c must lie in [0, 1]")
    if cfg.margin <= 0:
        raise ConfigError("margin must be positive")
    if cfg.neg_set_size < 1:
        raise ConfigError("neg_set_size must be >= 1")


def canonical_text(cfg: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: Config) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
