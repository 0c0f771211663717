"""Experiment configuration: one JSON file per experiment, with dotted overrides."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SamplerConfig(_Model):
    sq: int = Field(1, ge=1)
    max_skip: int = Field(0, ge=0)
    offset_enabled: bool = False
    shuffle: bool = True
    seed: int | None = None
    batch_size: int = Field(4, ge=1)


class GridSpec(_Model):
    x_min: float = -20.0
    x_max: float = 20.0
    y_min: float = -20.0
    y_max: float = 20.0
    z_min: float = -3.0
    z_max: float = 3.0
    pillar_dx: float = Field(1.25, gt=0)
    pillar_dy: float = Field(1.25, gt=0)
    max_points_per_pillar: int = Field(16, ge=1)
    max_pillars: int = Field(1024, ge=1)
    truncation: Literal["first", "random"] = "first"

    @model_validator(mode="after")
    def _check_extent(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not self.y_max > self.y_min:
            raise ValueError("y_max must exceed y_min")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        return self

    @property
    def nx(self) -> int:
        return max(1, math.ceil((self.x_max - self.x_min) / self.pillar_dx - 1e-9))

    @property
    def ny(self) -> int:
        return max(1, math.ceil((self.y_max - self.y_min) / self.pillar_dy - 1e-9))

    def cell_center(self, ix, iy):
        return (self.x_min + (ix + 0.5) * self.pillar_dx, self.y_min + (iy + 0.5) * self.pillar_dy)


class NetConfig(_Model):
    filter_factor: int = Field(1, ge=1)
    pillar_channels: int = Field(32, ge=1)
    backbone_channels: list[int] = Field(default_factory=lambda: [32, 32])
    lstm_layers: int = Field(2, ge=1)
    n_classes: int = Field(1, ge=1)
    cylindrical: bool | None = None
    n_azimuth: int = Field(32, ge=1)
    n_z: int = Field(4, ge=1)
    lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    grad_clip: float | None = 5.0
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    epochs: int = Field(10, ge=1)
    pos_weight: float = Field(20.0, gt=0)
    box_loss_weight: float = Field(1.0, ge=0)
    prior_dims: list[list[float]] = Field(default_factory=lambda: [[4.0, 1.8, 1.5]])
    prior_z: float = -0.9
    seed: int | None = None

    @model_validator(mode="after")
    def _check(self):
        if len(self.prior_dims) != self.n_classes:
            raise ValueError("prior_dims needs one [l, w, h] per class")
        if any(len(d) != 3 or min(d) <= 0 for d in self.prior_dims):
            raise ValueError("prior_dims entries must be three positive numbers")
        if not self.backbone_channels:
            raise ValueError("backbone_channels must not be empty")
        return self


class WeatherParams(_Model):
    backscatter_rate: float = Field(0.0, ge=0)
    backscatter_range: float = Field(0.0, ge=0)
    dropout_prob_at_max_range: float = Field(0.0, ge=0, le=1)
    max_range: float = Field(30.0, gt=0)
    intensity_noise_sigma: float = Field(0.0, ge=0)
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int | None = None


class SynthSceneParams(_Model):
    n_frames: int = Field(20, ge=1)
    frame_dt: float = Field(0.1, gt=0)
    max_interval_multiple: int = Field(1, ge=1)
    n_objects: int = Field(6, ge=0)
    speed_range: tuple[float, float] = (4.0, 8.0)
    heading_range: tuple[float, float] = (-0.3, 0.3)
    object_dims: tuple[float, float, float] = (4.0, 1.8, 1.5)
    class_id: int = 0
    points_per_object: int = Field(80, ge=1)
    ground_density: float = Field(0.3, gt=0)
    ground_z: float = -1.7
    extent: tuple[float, float, float, float] = (-18.0, 18.0, -18.0, 18.0)
    min_sensor_distance: float = Field(4.0, ge=0)
    wrap: bool = True
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("speed_range", "heading_range")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError("range lower bound exceeds upper bound")
        return v


class EvalConfig(_Model):
    iou_thresholds: list[float] = Field(default_factory=lambda: [0.5, 0.75])
    classes: list[int] = Field(default_factory=lambda: [0])
    max_range: float | None = None
    iou_mode: Literal["bev", "3d"] = "bev"
    interpolation: Literal["all_point", "11_point"] = "all_point"
    score_threshold: float = Field(0.3, ge=0, le=1)
    nms_iou: float = Field(0.1, gt=0, le=1)
    bench_warmup: int = Field(3, ge=0)
    bench_iters: int = Field(20, ge=1)

    @field_validator("iou_thresholds")
    @classmethod
    def _thresholds(cls, v):
        if not v or any(not 0 < t <= 1 for t in v) or list(v) != sorted(v):
            raise ValueError("thresholds must be non-empty, sorted, each in (0, 1]")
        return v


class DatasetConfig(_Model):
    manifest: Path | None = None
    synth: SynthSceneParams | None = None
    name: str = "Synthetic"


TABLE_LABELS = {
    "PBOD": ("Baseline", False),
    "IC": ("IC", False),
    "IC+": ("ICPlus", False),
    "FC": ("FC", False),
    "FC+": ("FCPlus", False),
    "FC*": ("FC", True),
    "FC+*": ("FCPlus", True),
    "LSTM": ("Lstm", False),
    "LSTM Net": ("LstmNet", False),
    "LSTM*": ("Lstm", True),
    "LSTM Net*": ("LstmNet", True),
}


class ExperimentConfig(_Model):
    model: str = "PBOD"
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    eval_manifest: Path | None = None
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    grid: GridSpec = Field(default_factory=GridSpec)
    net: NetConfig = Field(default_factory=NetConfig)
    weather: WeatherParams | None = None
    eval: EvalConfig = Field(default_factory=EvalConfig)
    out_dir: Path = Path("runs/default")

    @field_validator("model")
    @classmethod
    def _label(cls, v):
        if v not in TABLE_LABELS:
            raise ValueError(f"unknown model label {v!r}; expected one of {sorted(TABLE_LABELS)}")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        kind, offset = TABLE_LABELS[self.model]
        if "offset_enabled" in self.sampler.model_fields_set and self.sampler.offset_enabled != offset:
            raise ValueError(
                f"sampler.offset_enabled={self.sampler.offset_enabled} contradicts model {self.model!r}; "
                "use the starred label to enable temporal offsets"
            )
        # bypass validate_assignment to avoid re-entering this validator
        object.__setattr__(self.sampler, "offset_enabled", offset)
        if kind == "Baseline" and self.sampler.sq != 1:
            raise ValueError("PBOD requires sampler.sq == 1")
        if kind != "Baseline" and self.sampler.sq < 2:
            raise ValueError(f"{self.model} requires sampler.sq >= 2")
        for sub in (self.sampler, self.net):
            if sub.seed is None:
                object.__setattr__(sub, "seed", self.seed)
        if self.weather is not None and self.weather.seed is None:
            object.__setattr__(self.weather, "seed", self.seed)
        return self

    @property
    def kind(self) -> str:
        return TABLE_LABELS[self.model][0]

    def resolved(self) -> dict[str, Any]:
        return json.loads(self.model_dump_json())


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"{key}: cannot descend into non-object field {p!r}")
        node = nxt
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value``; value parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(doc: dict | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc = json.loads(json.dumps(doc or {}))
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base = path.parent
        for key in ("manifest",):
            ds = doc.get("dataset") or {}
            if isinstance(ds, dict) and isinstance(ds.get(key), str) and not Path(ds[key]).is_absolute():
                ds[key] = str(base / ds[key])
        if isinstance(doc.get("eval_manifest"), str) and not Path(doc["eval_manifest"]).is_absolute():
            doc["eval_manifest"] = str(base / doc["eval_manifest"])
    return build_config(doc, overrides)
