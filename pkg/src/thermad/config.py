"""Experiment configuration: one JSON tree drives every stage."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .simulator import GAIN_VALUES, PHASE_VALUES

DEFAULT_VARIANTS = ("PCVAE", "CVAE", "0.01CVAE", "AE")
VARIANT_KINDS = {"PCVAE": "PCVAE", "CVAE": "CVAE", "0.01CVAE": "BetaCVAE", "AE": "AE"}


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` lists offending key paths."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ConstantsConfig(_Strict):
    k1: float = Field(1.0, gt=0)
    k2: float = 0.1
    k3: float = 0.0
    tau: float = Field(20.0, gt=0)
    ambient: float = Field(7000.0, ge=0)
    noise_sd: float = Field(15.0, ge=0)


class SimulatorConfig(_Strict):
    shape: tuple[int, int] = (32, 32)
    n_frames: int = Field(100, ge=2)
    kernel_width: Optional[float] = Field(None, gt=0)
    constants: ConstantsConfig = ConstantsConfig()

    @field_validator("shape")
    @classmethod
    def _shape(cls, v):
        if min(v) < 8 or v[0] % 2 or v[1] % 2:
            raise ValueError("frame shape must be even and at least 8x8")
        return v


class DatasetConfig(_Strict):
    n_normal: int = Field(340, ge=10)
    n_anomalous: int = Field(34, ge=0)
    n_calibration: int = Field(34, ge=1)
    attenuation_db: tuple[float, float] = (6.0, 12.0)
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    gain_values: list[int] = list(GAIN_VALUES)
    phase_values: list[int] = list(PHASE_VALUES)
    window_length: int = Field(10, ge=1)
    window_offset: int = Field(5, ge=1)

    @field_validator("gain_values")
    @classmethod
    def _gains(cls, v):
        bad = [g for g in v if g not in GAIN_VALUES]
        if bad or not v:
            raise ValueError(f"gain values must be drawn from {list(GAIN_VALUES)}, got {bad or v}")
        return v

    @field_validator("phase_values")
    @classmethod
    def _phases(cls, v):
        bad = [p for p in v if p not in PHASE_VALUES]
        if bad or not v:
            raise ValueError(f"phase values must be multiples of 45 in [0, 180], got {bad or v}")
        return v

    @field_validator("attenuation_db")
    @classmethod
    def _att(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("attenuation range must satisfy 0 < low <= high")
        return v


class ModelConfig(_Strict):
    variants: list[Literal["PCVAE", "CVAE", "0.01CVAE", "AE"]] = list(DEFAULT_VARIANTS)
    betas: dict[str, float] = {"CVAE": 1.0, "0.01CVAE": 1e-4}
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = Field(3, ge=1)
    hidden: int = Field(128, ge=1)
    latent: int = Field(8, ge=1)

    @field_validator("betas")
    @classmethod
    def _betas(cls, v):
        for name, beta in v.items():
            if name not in ("CVAE", "0.01CVAE"):
                raise ValueError(f"beta only applies to CVAE and 0.01CVAE, got {name!r}")
            if not beta > 0:
                raise ValueError(f"beta for {name} must be > 0, got {beta}")
        return v


class TrainerConfig(_Strict):
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(4, ge=1)
    clip_norm: float = Field(5.0, gt=0)


class DetectorConfig(_Strict):
    k: int = Field(5000, ge=1)
    native_pixels: int = Field(640 * 480, ge=1)
    residual_floor: float = Field(1e-3, ge=0)
    epsilon: Union[Literal["calibrate"], float] = "calibrate"
    vote_scope: Literal["sequence", "window"] = "sequence"
    recon_samples: int = Field(10, ge=1)


class EvaluationConfig(_Strict):
    roc_statistic: Literal["median", "vote_fraction"] = "median"
    plots: bool = True


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = 0
    output_dir: Optional[str] = None
    simulator: SimulatorConfig = SimulatorConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    trainer: TrainerConfig = TrainerConfig()
    detector: DetectorConfig = DetectorConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @model_validator(mode="after")
    def _shape_vs_model(self):
        scale = 2 ** len(self.model.channels)
        h, w = self.simulator.shape
        if h % scale or w % scale:
            raise ValueError(f"simulator.shape {self.simulator.shape} must be divisible by {scale} "
                             f"for {len(self.model.channels)} conv layers")
        if self.dataset.window_length > self.simulator.n_frames - 1:
            raise ValueError("dataset.window_length exceeds the processed sequence length")
        return self

    def beta(self, variant):
        return self.model.betas.get(variant, {"CVAE": 1.0, "0.01CVAE": 1e-4}.get(variant, 1.0))


def _format_errors(exc):
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_override(text):
    """``a.b.c=value`` -> (["a","b","c"], value); values parse as JSON, else as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(tree, overrides):
    tree = json.loads(json.dumps(tree))
    for item in overrides or ():
        path, value = parse_override(item)
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{'.'.join(path)}: {part} is not a section")
        node[path[-1]] = value
    return tree


def validate_config(source=None, overrides=None):
    """Load, override and validate a config; returns a fully defaulted ExperimentConfig.

    ``source`` may be a path, a dict or None (all defaults).
    """
    if source is None:
        tree = {}
    elif isinstance(source, dict):
        tree = source
    else:
        path = Path(source)
        try:
            tree = json.loads(path.read_text()) if path.read_text().strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    if not isinstance(tree, dict):
        raise ConfigError("<root>: config must be a JSON object")
    tree = apply_overrides(tree, overrides)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def dump_config(cfg):
    return json.dumps(cfg.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"


def bundled_config(name):
    """Path of a config shipped with the package (``demo`` or ``benchmark``)."""
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
