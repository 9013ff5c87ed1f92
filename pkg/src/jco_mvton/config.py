"""Run configuration: one JSON document, strict keys, content-hashed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ContractError
from .model import POLICIES, ModelConfig


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    policy: str = "full"
    subset: int | None = None
    unconditional: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ContractError(f"unknown policy {self.policy!r}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    thresholds: tuple[float, float, float] = (0.9, 0.9, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        if len(self.thresholds) != 3:
            raise ContractError("thresholds must have three entries (garment, person, realism)")


@dataclass(frozen=True)
class SampleConfig:
    seed: int = 0
    steps: int | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "data": {"seed": self.data.seed, "thresholds": list(self.data.thresholds)},
            "sample": asdict(self.sample),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ContractError("run config must be a JSON object")
        unknown = set(d) - {"model", "train", "data", "sample"}
        if unknown:
            raise ContractError(f"run config: unknown keys {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=_strict(TrainConfig, d.get("train", {}), "train"),
            data=_strict(DataConfig, d.get("data", {}), "data"),
            sample=_strict(SampleConfig, d.get("sample", {}), "sample"),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(train={"policy": "full"})`` style updates."""
        out = self
        for name, values in sections.items():
            if values:
                out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


# JSON schemas for emitted documents; the CLI validates its reports against these.

METRIC_SCHEMA = {
    "type": "object",
    "required": ["metric", "value", "config_hash"],
    "properties": {
        "metric": {"type": "string"},
        "value": {"type": ["number", "string"]},
        "config_hash": {"type": "string"},
    },
}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["config_hash", "checkpoint", "n_samples", "sampler_steps", "metrics", "per_sample"],
    "properties": {
        "config_hash": {"type": "string"},
        "checkpoint": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 1},
        "sampler_steps": {"type": "integer", "minimum": 1},
        "metrics": {"type": "array", "items": METRIC_SCHEMA, "minItems": 3},
        "per_sample": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "ssim", "psnr"],
                "properties": {
                    "id": {"type": "integer"},
                    "ssim": {"type": "number"},
                    "psnr": {"type": ["number", "string"]},
                },
            },
        },
    },
}

INDEX_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["id", "seed", "region", "scores", "provenance"],
        "properties": {
            "id": {"type": "integer"},
            "seed": {"type": "integer"},
            "region": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
            "scores": {
                "type": "object",
                "required": ["g", "p", "r"],
                "properties": {k: {"type": "number"} for k in "gpr"},
            },
            "provenance": {"enum": ["stage1", "regenerated", "style_expanded"]},
        },
    },
}
