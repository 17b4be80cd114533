"""
Configuration Settings for CLIPin Desk
======================================

This module contains all configuration settings for the application:
default hyperparameters, dimension presets, typed config objects and the
plain-text ``key = value`` config file reader.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.errors import ConfigError

# Output / logging environment
OUT_DIR = os.environ.get("CLIPIN_OUT_DIR", "runs")
LOG_LEVEL = os.environ.get("CLIPIN_LOG_LEVEL", "INFO")

LOGGING_CONFIG = {
    "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
    "datefmt": "%H:%M:%S",
}

# Dimension presets. "desk" keeps d_cl < d_pre < d_ncl; "full-scale" keeps
# the 512/1024/8192 widths of the full-size model.
DIMS_PRESETS = {
    "desk": {
        "image_side": 16,
        "channels": 3,
        "vocab_size": 66,
        "max_text_len": 16,
        "d_enc": 64,
        "d_pre": 128,
        "d_cl": 64,
        "d_ncl": 1024,
        "predictor_bottleneck": 256,
    },
    "full-scale": {
        "image_side": 16,
        "channels": 3,
        "vocab_size": 66,
        "max_text_len": 16,
        "d_enc": 768,
        "d_pre": 1024,
        "d_cl": 512,
        "d_ncl": 8192,
        "predictor_bottleneck": 2048,
    },
    # gradient checks
    "tiny": {
        "image_side": 4,
        "channels": 3,
        "vocab_size": 66,
        "max_text_len": 8,
        "d_enc": 6,
        "d_pre": 8,
        "d_cl": 4,
        "d_ncl": 16,
        "predictor_bottleneck": 5,
    },
}

# Alternate preset names
DIMS_ALIASES = {"paper-ratio": "full-scale"}

TRAIN_DEFAULTS = {
    "lr": 3e-5,
    "warmup_iters": 100,
    "adam_beta1": 0.9,
    "adam_beta2": 0.98,
    "adam_eps": 1e-6,
    "weight_decay": 0.001,
    "ema_beta": 0.95,
    "tau": 0.07,
    "learnable_tau": False,
    "batch_size": 32,
    "total_steps": 1000,
    "seed": 0,
    "weighting": "fixed",
    "dims": "desk",
    "grad_clip": 0.0,
    "checkpoint_every": 100,
    "n_samples": 2048,
    "prefetch": 0,
    "use_contrastive": True,
    "use_inter": True,
    "use_intra": True,
    "share_pre_projectors": True,
}

# Held-out evaluation corpus: same generative world, new samples, looser
# captions and noisier images than the training corpus
OOD_DEFAULTS = {
    "ood_n_samples": 512,
    "ood_looseness_rate": 0.3,
    "ood_noise_sigma": 0.05,
}

AUGMENT_DEFAULTS = {
    "flip_prob": 0.5,
    "jitter_strength": 0.1,
    "token_drop_prob": 0.1,
    "mask_token_id": 1,
    "seed_stream": "augment",
}

LATENT_DEFAULTS = {
    "k": 8,
    "classes": 8,
    "noise_sigma": 0.0,
    "redundancy_rate": 0.0,
    "looseness_rate": 0.0,
    "quantile_buckets": 4,
}

PROBE_DEFAULTS = {
    "iterations": 500,
    "lr": 0.1,
    "train_fraction": 0.8,
    "branch": "cl",
    "seed": 0,
}

WEIGHTING_SCHEMES = ("fixed", "learnable")
PAD_TOKEN_ID = 0
MASK_TOKEN_ID = 1


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for the process."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format=LOGGING_CONFIG["format"],
        datefmt=LOGGING_CONFIG["datefmt"],
    )


def get_out_dir() -> Path:
    """Get the default artifact directory."""
    return Path(OUT_DIR)


def dims_preset_names() -> List[str]:
    """Every accepted ``dims`` value, aliases included."""
    return sorted([*DIMS_PRESETS, *DIMS_ALIASES])


@dataclass
class DimsConfig:
    """Network widths and input geometry."""

    image_side: int = 16
    channels: int = 3
    vocab_size: int = 66
    max_text_len: int = 16
    d_enc: int = 64
    d_pre: int = 128
    d_cl: int = 64
    d_ncl: int = 1024
    predictor_bottleneck: int = 256
    preset: str = "desk"

    def validate(self) -> "DimsConfig":
        for f in fields(self):
            if f.name != "preset" and getattr(self, f.name) < 1:
                raise ConfigError(f"dimension {f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.preset == "full-scale" and not (self.d_ncl >= self.d_pre >= self.d_cl):
            raise ConfigError("full-scale preset requires d_ncl >= d_pre >= d_cl")
        return self

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> "DimsConfig":
        name = DIMS_ALIASES.get(name, name)
        if name not in DIMS_PRESETS:
            raise ConfigError(f"unknown dims preset {name!r}; choose from {dims_preset_names()}")
        return cls(**{**DIMS_PRESETS[name], **overrides}, preset=name).validate()


@dataclass
class AugmentConfig:
    flip_prob: float = AUGMENT_DEFAULTS["flip_prob"]
    jitter_strength: float = AUGMENT_DEFAULTS["jitter_strength"]
    token_drop_prob: float = AUGMENT_DEFAULTS["token_drop_prob"]
    mask_token_id: int = AUGMENT_DEFAULTS["mask_token_id"]
    seed_stream: str = AUGMENT_DEFAULTS["seed_stream"]

    def validate(self) -> "AugmentConfig":
        for name in ("flip_prob", "token_drop_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise ConfigError(f"jitter_strength must be >= 0, got {self.jitter_strength}")
        return self

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, jitter_strength=0.0, token_drop_prob=0.0)


@dataclass
class LatentSpec:
    """Knobs of the synthetic paired-sample generator."""

    k: int = LATENT_DEFAULTS["k"]
    classes: int = LATENT_DEFAULTS["classes"]
    noise_sigma: float = LATENT_DEFAULTS["noise_sigma"]
    redundancy_rate: float = LATENT_DEFAULTS["redundancy_rate"]
    looseness_rate: float = LATENT_DEFAULTS["looseness_rate"]
    quantile_buckets: int = LATENT_DEFAULTS["quantile_buckets"]

    def validate(self) -> "LatentSpec":
        if not 1 <= self.classes <= self.k:
            raise ConfigError(f"need 1 <= classes <= k, got classes={self.classes}, k={self.k}")
        for name in ("redundancy_rate", "looseness_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self

    @property
    def vocab_size(self) -> int:
        return 2 + self.k * 2 * self.quantile_buckets


@dataclass
class AblationFlags:
    use_contrastive: bool = True
    use_inter: bool = True
    use_intra: bool = True
    share_pre_projectors: bool = True

    def validate(self) -> "AblationFlags":
        if not self.use_contrastive:
            raise ConfigError("use_contrastive must be true; every ablation row keeps the contrastive baseline")
        return self

    @property
    def uses_target(self) -> bool:
        return self.use_inter or self.use_intra


# Ablation rows in order: CL; CL+inter; CL+inter+intra; CL+inter+intra+shared
ABLATION_PRESETS = {
    "cl": AblationFlags(True, False, False, False),
    "cl+inter": AblationFlags(True, True, False, False),
    "cl+inter+intra": AblationFlags(True, True, True, False),
    "clipin": AblationFlags(True, True, True, True),
}


@dataclass
class ProbeConfig:
    iterations: int = PROBE_DEFAULTS["iterations"]
    lr: float = PROBE_DEFAULTS["lr"]
    train_fraction: float = PROBE_DEFAULTS["train_fraction"]
    branch: str = PROBE_DEFAULTS["branch"]
    seed: int = PROBE_DEFAULTS["seed"]


@dataclass
class TrainConfig:
    lr: float = TRAIN_DEFAULTS["lr"]
    warmup_iters: int = TRAIN_DEFAULTS["warmup_iters"]
    adam_beta1: float = TRAIN_DEFAULTS["adam_beta1"]
    adam_beta2: float = TRAIN_DEFAULTS["adam_beta2"]
    adam_eps: float = TRAIN_DEFAULTS["adam_eps"]
    weight_decay: float = TRAIN_DEFAULTS["weight_decay"]
    ema_beta: float = TRAIN_DEFAULTS["ema_beta"]
    tau: float = TRAIN_DEFAULTS["tau"]
    learnable_tau: bool = TRAIN_DEFAULTS["learnable_tau"]
    batch_size: int = TRAIN_DEFAULTS["batch_size"]
    total_steps: int = TRAIN_DEFAULTS["total_steps"]
    seed: int = TRAIN_DEFAULTS["seed"]
    weighting: str = TRAIN_DEFAULTS["weighting"]
    dims: str = TRAIN_DEFAULTS["dims"]
    grad_clip: float = TRAIN_DEFAULTS["grad_clip"]
    checkpoint_every: int = TRAIN_DEFAULTS["checkpoint_every"]
    n_samples: int = TRAIN_DEFAULTS["n_samples"]
    prefetch: int = TRAIN_DEFAULTS["prefetch"]
    ood_n_samples: int = OOD_DEFAULTS["ood_n_samples"]
    ood_looseness_rate: float = OOD_DEFAULTS["ood_looseness_rate"]
    ood_noise_sigma: float = OOD_DEFAULTS["ood_noise_sigma"]
    ablation: AblationFlags = field(default_factory=AblationFlags)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    latent: LatentSpec = field(default_factory=LatentSpec)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError(f"ema_beta must be in [0, 1), got {self.ema_beta}")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.weighting not in WEIGHTING_SCHEMES:
            raise ConfigError(f"weighting must be one of {WEIGHTING_SCHEMES}, got {self.weighting!r}")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.n_samples < self.batch_size:
            raise ConfigError(f"n_samples ({self.n_samples}) must be >= batch_size ({self.batch_size})")
        if self.ood_n_samples < 0:
            raise ConfigError("ood_n_samples must be >= 0")
        self.ablation.validate()
        self.augment.validate()
        self.latent.validate()
        self.ood_latent().validate()
        self.dims_config()
        return self

    def dims_config(self) -> DimsConfig:
        return DimsConfig.from_preset(self.dims, vocab_size=self.latent.vocab_size)

    def ood_latent(self) -> LatentSpec:
        """Latent spec of the held-out corpus: training spec with the OOD shifts applied."""
        return dataclasses.replace(self.latent, looseness_rate=self.ood_looseness_rate,
                                   noise_sigma=self.ood_noise_sigma)


# Flat key -> (section, field) for the config file and CLI overrides
def _flat_fields() -> Dict[str, Optional[str]]:
    mapping: Dict[str, Optional[str]] = {}
    for f in fields(TrainConfig):
        if f.name in ("ablation", "augment", "latent"):
            continue
        mapping[f.name] = None
    for section, cls in (("ablation", AblationFlags), ("augment", AugmentConfig), ("latent", LatentSpec)):
        for f in fields(cls):
            mapping[f.name] = section
    return mapping


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    if not isinstance(value, str):
        return value
    raw = value.strip()
    try:
        if target_type in (bool, "bool"):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type in (int, "int"):
            return int(raw)
        if target_type in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def merge_overrides(cfg: TrainConfig, overrides: Dict[str, Any]) -> TrainConfig:
    """
    Apply flat ``key -> value`` overrides to a TrainConfig.

    Args:
        cfg (TrainConfig): Base configuration (left untouched)
        overrides (dict): Flat keys matching TrainConfig / section field names

    Returns:
        TrainConfig: New validated configuration

    Raises:
        ConfigError: On unknown keys or unparsable values
    """
    mapping = _flat_fields()
    cfg = dataclasses.replace(
        cfg,
        ablation=dataclasses.replace(cfg.ablation),
        augment=dataclasses.replace(cfg.augment),
        latent=dataclasses.replace(cfg.latent),
    )
    for key, value in overrides.items():
        if value is None:
            continue
        name = key.replace("-", "_")
        if name not in mapping:
            raise ConfigError(f"unknown config key {key!r}")
        section = mapping[name]
        holder = cfg if section is None else getattr(cfg, section)
        field_type = {f.name: f.type for f in fields(holder)}[name]
        setattr(holder, name, _coerce(value, field_type, name))
    return cfg.validate()


def load_config_file(path: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Load a plain-text ``key = value`` configuration file.

    Args:
        path (str): Path to the config file
        base (TrainConfig): Defaults to start from

    Returns:
        TrainConfig: Parsed and validated configuration

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: On malformed lines or unknown keys
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values: Dict[str, str] = {}
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return merge_overrides(base or TrainConfig(), values)


def config_snapshot(cfg: TrainConfig) -> Dict[str, Any]:
    """Flat echo of every config value (checkpoints, manifests, logs)."""
    snapshot: Dict[str, Any] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            snapshot.update(dataclasses.asdict(value))
        else:
            snapshot[f.name] = value
    return snapshot


def snapshot_to_config(snapshot: Dict[str, Any]) -> TrainConfig:
    """Rebuild a TrainConfig from a config echo."""
    return merge_overrides(TrainConfig(), {k: v for k, v in snapshot.items() if k in _flat_fields()})
