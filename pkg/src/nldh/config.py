"""Experiment configuration: flat dotted-key text files with typed defaults.

Config files look like::

    # desk-scale steganography run
    preset = desk-stego
    dataset.root = ./data/train
    dataset.synthetic_count = 512
    train.epochs = 26
    loss.alpha = 1.5
    attacks.jpeg.range = 50, 95

Every key has a default; where the source recipe states a value, that value
is the default (lr 0.001, batch 32, 160 epochs, 128 crops, 32-bit messages,
alpha 1.5, beta 1.0).  The effective key/value map is hashed and the hash is
stamped into checkpoints and reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import DEFAULT_RANGES, KINDS
from .errors import ConfigError
from .training import PRESETS, TrainConfig

DEFAULTS: dict[str, object] = {
    "preset": "",
    "seed": 0,
    "mode": "watermark",
    "out_dir": "runs/out",
    "workers": 1,
    # dataset
    "dataset.root": "",
    "dataset.val_ratio": 0.1,
    "dataset.policy": "crop",
    "dataset.synthetic_count": 0,  # >0: generate procedural images into root
    "dataset.image_size": 160,
    # codec
    "codec.kind": "toy",  # toy | file
    "codec.path": "",
    "codec.latent_channels": 64,
    "codec.quality": 8,
    "codec.steps": 4000,
    "codec.rd_lambda": 3.0,
    # training
    "train.learning_rate": 0.001,
    "train.batch_size": 32,
    "train.epochs": 160,
    "train.crop": 128,
    "train.message_length": 32,
    "train.quant_surrogate": "noise",
    "train.val_images": 64,
    # loss
    "loss.alpha": 1.5,
    "loss.beta": 1.0,
    "loss.perceptual_backend": "msssim",
    # attacks
    "attacks.enabled": ",".join(sorted(KINDS)),
    **{f"attacks.{kind}.range": f"{lo}, {hi}" for kind, (lo, hi) in DEFAULT_RANGES.items()},
    # evaluation
    "eval.images": 100,
    "eval.transport": "container",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def _coerce(key: str, value: str, default: object):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return value


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Effective config: defaults <- preset <- file <- overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file does not exist: {p}")
        raw = parse_config_text(p.read_text())
    for key, value in (overrides or {}).items():
        raw[key] = str(value)

    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    effective = dict(DEFAULTS)
    preset_name = raw.get("preset", "")
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r} (have {sorted(PRESETS)})")
        for k, v in PRESETS[preset_name].items():
            dotted = {
                "epochs": "train.epochs",
                "batch_size": "train.batch_size",
                "val_images": "train.val_images",
                "mode": "mode",
                "beta": "loss.beta",
                "alpha": "loss.alpha",
            }.get(k, f"train.{k}")
            effective[dotted] = v
        effective["preset"] = preset_name
    for key, value in raw.items():
        if key == "preset":
            continue
        effective[key] = _coerce(key, value, DEFAULTS[key])
    return effective


def config_hash(effective: dict) -> str:
    blob = json.dumps(effective, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_range(text: str, key: str) -> tuple[float, float]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'lo, hi', got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None
    if lo > hi:
        raise ConfigError(f"{key}: lo {lo} > hi {hi}")
    return lo, hi


@dataclass
class ExperimentConfig:
    """Typed view over the effective key/value map."""

    effective: dict
    seed: int
    mode: str
    out_dir: Path
    workers: int
    dataset_root: Path
    dataset_val_ratio: float
    dataset_policy: str
    dataset_synthetic_count: int
    dataset_image_size: int
    codec_kind: str
    codec_path: Path | None
    codec_latent_channels: int
    codec_quality: int
    codec_steps: int
    codec_rd_lambda: float
    train: TrainConfig
    eval_images: int
    eval_transport: str
    hash: str = field(init=False)

    def __post_init__(self):
        self.hash = config_hash(self.effective)


def build_experiment(effective: dict) -> ExperimentConfig:
    enabled = [k.strip() for k in str(effective["attacks.enabled"]).split(",") if k.strip()]
    for kind in enabled:
        if kind not in KINDS:
            raise ConfigError(f"attacks.enabled: unknown kind {kind!r}")
    ranges = {
        kind: parse_range(effective[f"attacks.{kind}.range"], f"attacks.{kind}.range")
        for kind in enabled
    }
    train = TrainConfig(
        learning_rate=effective["train.learning_rate"],
        batch_size=effective["train.batch_size"],
        epochs=effective["train.epochs"],
        crop=effective["train.crop"],
        message_length=effective["train.message_length"],
        alpha=effective["loss.alpha"],
        beta=effective["loss.beta"],
        mode=effective["mode"],
        seed=effective["seed"],
        quant_surrogate=effective["train.quant_surrogate"],
        perceptual_backend=effective["loss.perceptual_backend"],
        attack_ranges=ranges,
        val_images=effective["train.val_images"],
    )
    return ExperimentConfig(
        effective=effective,
        seed=effective["seed"],
        mode=effective["mode"],
        out_dir=Path(str(effective["out_dir"])),
        workers=int(effective["workers"]),
        dataset_root=Path(str(effective["dataset.root"])) if effective["dataset.root"] else Path(),
        dataset_val_ratio=float(effective["dataset.val_ratio"]),
        dataset_policy=str(effective["dataset.policy"]),
        dataset_synthetic_count=int(effective["dataset.synthetic_count"]),
        dataset_image_size=int(effective["dataset.image_size"]),
        codec_kind=str(effective["codec.kind"]),
        codec_path=Path(str(effective["codec.path"])) if effective["codec.path"] else None,
        codec_latent_channels=int(effective["codec.latent_channels"]),
        codec_quality=int(effective["codec.quality"]),
        codec_steps=int(effective["codec.steps"]),
        codec_rd_lambda=float(effective["codec.rd_lambda"]),
        train=train,
        eval_images=int(effective["eval.images"]),
        eval_transport=str(effective["eval.transport"]),
    )


def load_experiment(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    return build_experiment(load_config(path, overrides))
