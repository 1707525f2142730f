"""Training configuration: defaults, validation and flat key=value files.

The file format is one ``key = value`` per line with ``#`` comments and a
mandatory ``schema_version``. Unknown keys are hard errors so a typo in a
loss-weight name cannot silently invalidate an experiment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class TrainingConfig:
    """All weights, rates, iteration counts and thresholds for the pipeline."""

    seed: int = 0
    iters_stage1: int = 3000
    iters_stage2: int = 2500
    iters_stage3: int = 5000
    batch_size: int = 4
    prune_threshold: float = 0.1
    subdivision: int = 1
    texture_resolution: int = 256
    knn_k: int = 5
    knn_refresh: int = 100
    # the perceptual-loss weight is part of the schema but unsupported here
    lambda_lpips: float = 0.0
    lambda_ssim: float = 0.1
    lambda_sobel: float = 1.0
    lambda_knn: float = 0.01
    lambda_tv: float = 0.01
    lambda_opacity: float = 0.001
    lambda_dice: float = 0.1
    lr_color: float = 0.005
    lr_scaling: float = 0.005
    lr_rotation: float = 0.005
    lr_xyz_start: float = 0.00016
    lr_xyz_end: float = 0.0000016
    lr_pose: float = 0.0002
    lr_texture: float = 0.01
    lr_opacity: float = 0.05

    def validate(self) -> None:
        if self.iters_stage1 <= 0 or self.iters_stage2 <= 0 or self.iters_stage3 <= 0:
            raise ConfigError("iteration counts must be positive")
        if not (0.0 < self.prune_threshold < 1.0):
            raise ConfigError("prune_threshold must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.subdivision not in (1, 4):
            raise ConfigError("subdivision must be 1 or 4")
        for f in dataclasses.fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be >= 0")
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be > 0")
        if self.lambda_lpips != 0.0:
            raise ConfigError("lambda_lpips must stay 0 (perceptual loss is unsupported)")
        if self.lr_xyz_end > self.lr_xyz_start:
            raise ConfigError("lr_xyz schedule must not increase")

    def lambdas(self) -> dict[str, float]:
        return {
            "ssim": self.lambda_ssim,
            "sobel": self.lambda_sobel,
            "knn": self.lambda_knn,
            "tv": self.lambda_tv,
            "opacity": self.lambda_opacity,
            "dice": self.lambda_dice,
        }


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("true", "1"):
                return True
            if raw.lower() in ("false", "0"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for '{name}': {raw!r}") from exc


def parse_flat_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from the flat format; duplicate keys error."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in out:
            raise ConfigError(f"duplicate key '{key}'")
        out[key] = value
    return out


def config_from_text(text: str) -> TrainingConfig:
    raw = parse_flat_text(text)
    version = raw.pop("schema_version", None)
    if version is None:
        raise ConfigError("missing required key 'schema_version'")
    if int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")

    fields = {f.name: f.type for f in dataclasses.fields(TrainingConfig)}
    values = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}'")
        kind = {"int": int, "float": float, "str": str, "bool": bool}[fields[key]]
        values[key] = _coerce(key, kind, value)
    cfg = TrainingConfig(**values)
    cfg.validate()
    return cfg


def config_to_text(cfg: TrainingConfig) -> str:
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> TrainingConfig:
    return config_from_text(Path(path).read_text())


def save_config(path: str | Path, cfg: TrainingConfig) -> None:
    Path(path).write_text(config_to_text(cfg))
