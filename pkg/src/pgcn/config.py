"""Configuration schema, presets, TOML loading and ``--section.key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from pgcn.errors import ConfigurationError

LOSS_VARIANTS = ("corrected", "paper_verbatim", "paper_verbatim_hinge_logit")


@dataclass
class ModelConfig:
    c: int = 24
    window_m: int = 7
    encoder_depths: tuple[int, ...] = (2, 2, 6, 2)
    decoder_depths: tuple[int, ...] = (2, 2, 6, 2)
    tile_resolution: int = 224
    share_encoders: bool = False
    relative_bias: bool = True
    cmp_widths: tuple[int, ...] = (64, 128, 256)
    cmp_fc_hidden: int = 64


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 8
    steps: int = 1000
    loss_variant: str = "corrected"
    mask_l1: str = "mean"
    cmp_learning_rate: float = 1e-3
    cmp_batch_size: int = 16
    cmp_steps: int = 300
    cmp_pairs: int = 256
    checkpoint_every: int = 0


@dataclass
class InferConfig:
    grid_n: int = 4
    tau: float = 0.5


@dataclass
class DataConfig:
    root: str = "data"
    category: str = "texture"
    work_dir: str = "runs"
    image_size: int = 256
    n_train: int = 32
    n_test_good: int = 10
    n_test_defect: int = 10
    textures: list[dict[str, Any]] = field(default_factory=lambda: [
        {"family": "sine_grating", "period": 32, "orientation": 0.0,
         "palette": [[0.2, 0.3, 0.5], [0.8, 0.7, 0.4]], "noise_sigma": 0.0},
    ])
    defect_kinds: tuple[str, ...] = ("blotch", "scratch")
    defect_size: tuple[int, int] = (12, 24)
    defect_intensity: float = 0.6


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "Config":
        m = self.model
        r = m.tile_resolution
        if r <= 0 or r % 32 or m.window_m <= 0 or (r // 32) % m.window_m:
            raise ConfigurationError(
                f"model.tile_resolution={r} and model.window_m={m.window_m} are incompatible: "
                "tile_resolution must be divisible by 32 and tile_resolution/32 by window_m"
            )
        if len(m.encoder_depths) != 4 or len(m.decoder_depths) != 4:
            raise ConfigurationError("model.encoder_depths and model.decoder_depths need four stages")
        if any(d % 2 or d < 0 for d in m.encoder_depths):
            raise ConfigurationError(f"model.encoder_depths must be even, got {list(m.encoder_depths)}")
        if m.c <= 0 or m.c % 8:
            raise ConfigurationError(f"model.c={m.c} must be a positive multiple of the head size 8")
        if len(m.cmp_widths) != 3 or min(m.cmp_widths) <= 0:
            raise ConfigurationError("model.cmp_widths needs three positive widths")
        if self.infer.grid_n < 3:
            raise ConfigurationError(f"infer.grid_n={self.infer.grid_n} must be at least 3")
        if not 0.0 < self.infer.tau < 1.0:
            raise ConfigurationError(f"infer.tau={self.infer.tau} must lie in (0, 1)")
        if self.train.loss_variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"train.loss_variant={self.train.loss_variant!r} not in {LOSS_VARIANTS}")
        if self.train.mask_l1 not in ("sum", "mean"):
            raise ConfigurationError(f"train.mask_l1={self.train.mask_l1!r} must be 'sum' or 'mean'")
        if self.train.learning_rate < 0 or self.train.cmp_learning_rate < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.train.batch_size < 1 or self.train.cmp_batch_size < 1 or self.train.steps < 0:
            raise ConfigurationError("batch sizes must be positive and steps non-negative")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {},
    # CPU-sized profile; the window shrinks with the tile so every stage stays a multiple of it
    "desk": {
        "model": {"c": 16, "window_m": 2, "tile_resolution": 64, "encoder_depths": (2, 2, 2, 2),
                  "decoder_depths": (2, 2, 2, 2), "cmp_widths": (16, 32, 64), "cmp_fc_hidden": 32},
        "train": {"learning_rate": 2e-3, "batch_size": 8, "steps": 600, "cmp_steps": 300},
    },
}


def _coerce(current: Any, value: Any, name: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else value.split(",")
            kind = type(current[0]) if current else str
            return tuple(kind(v) if not isinstance(v, list) else tuple(v) for v in value)
        if isinstance(current, list):
            return json.loads(value) if isinstance(value, str) else list(value)
        return str(value) if not isinstance(value, str) else value
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigurationError(f"{name}: cannot interpret {value!r} as {type(current).__name__}") from None


def apply_overrides(cfg: Config, values: dict[str, dict[str, Any]]) -> Config:
    for section, entries in values.items():
        sec = getattr(cfg, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise ConfigurationError(f"unknown config section {section!r}")
        for key, value in entries.items():
            if not hasattr(sec, key):
                raise ConfigurationError(f"unknown config field {section}.{key}")
            setattr(sec, key, _coerce(getattr(sec, key), value, f"{section}.{key}"))
    return cfg


def parse_flag_overrides(flags: list[str]) -> dict[str, dict[str, Any]]:
    """``["--model.c=16", "--infer.tau=0.3"]`` → nested dict."""
    out: dict[str, dict[str, Any]] = {}
    for flag in flags:
        body = flag[2:] if flag.startswith("--") else flag
        if "=" not in body or "." not in body.split("=", 1)[0]:
            raise ConfigurationError(f"override {flag!r} must look like --section.key=value")
        key, value = body.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        preset_name = raw.pop("preset", None)
        if preset_name and not preset:
            cfg = load_config(preset=preset_name)
        apply_overrides(cfg, raw)
    if overrides:
        apply_overrides(cfg, parse_flag_overrides(overrides))
    return cfg.validate()


def config_from_dict(d: dict[str, Any]) -> Config:
    return apply_overrides(Config(), d).validate()
