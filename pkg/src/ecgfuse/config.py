"""Pipeline configuration with canonical hashing.

The full config serializes to canonical JSON (sorted keys, no whitespace);
config_hash digests that serialization. Each pipeline stage also gets a
stage hash over just the fields that determine its artifact's content, so a
feature cache stays valid across model/fusion sweeps but goes stale when
ingest, dsp, or backend settings change.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

__all__ = [
    "IngestConfig",
    "DspConfig",
    "TrainConfig",
    "PipelineConfig",
    "canonical_json",
    "digest",
]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass
class IngestConfig:
    format: str = "csv"
    rate: int = 500
    seconds: float = 10.0
    flatline_eps: float = 0.01
    range_limit: float = 25.0


@dataclass
class DspConfig:
    window_s: float = 1.0
    overlap: float = 0.5
    chunk_s: float = 0.1
    chunk_overlap: float = 0.9
    hp_cutoff: float = 0.5
    gauss_sigma: float = 0.002
    floor_eps: float = 1e-6
    colormap: str = "viridis"


@dataclass
class TrainConfig:
    fusion: str = "feature_concat"
    model: str = "dense-lstm"
    task: str = "onset"
    folds: int = 10
    seed: int = 0
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.2
    kappa: int = 16
    nu: int = 16


@dataclass
class PipelineConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    backend: str = "fallback:64:7"
    fusion_input: str = "per-lead"
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        return digest(self.to_dict())

    def stage_hash(self, stage: str) -> str:
        """Digest of the config subset that determines a stage's artifact."""
        d = self.to_dict()
        subsets = {
            "ingest": ["ingest"],
            "dsp": ["ingest", "dsp"],
            "encode": ["ingest", "dsp", "backend", "fusion_input"],
            "train": ["ingest", "dsp", "backend", "fusion_input", "train"],
        }
        if stage not in subsets:
            raise ValueError(f"unknown stage {stage!r}")
        return digest({k: d[k] for k in subsets[stage]})

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        def build(dc_type, payload):
            known = {f.name for f in fields(dc_type)}
            unknown = set(payload) - known
            if unknown:
                raise ValueError(f"unknown {dc_type.__name__} keys: {sorted(unknown)}")
            return dc_type(**payload)

        cfg = cls()
        if "ingest" in data:
            cfg.ingest = build(IngestConfig, data["ingest"])
        if "dsp" in data:
            cfg.dsp = build(DspConfig, data["dsp"])
        if "backend" in data:
            cfg.backend = data["backend"]
        if "fusion_input" in data:
            cfg.fusion_input = data["fusion_input"]
        if "train" in data:
            cfg.train = build(TrainConfig, data["train"])
        extra = set(data) - {"ingest", "dsp", "backend", "fusion_input", "train"}
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cfg
