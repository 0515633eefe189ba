"""Pipeline configuration: one versioned JSON document for every stage.

Parsing is strict (unknown keys are rejected) and cross-stage consistency
is validated at load so mismatches fail before any training starts.
DEFAULT_PROVENANCE records whether each default follows the published
method settings ("reference") or is a desk-scale choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, fields

from .container import config_hash
from .retriever import RetrieverConfig
from .rvq import RvqConfig
from .transformers import GenTransformerConfig

CONFIG_VERSION = 1

DEFAULT_PROVENANCE = {
    "retriever.momentum": "reference",        # 0.99
    "retriever.tau": "reference",             # 0.07
    "retriever.queue_capacity": "desk-scale", # reference uses 65536
    "retriever.lr": "reference",              # 2e-4
    "rvq.levels": "reference",                # 5 residual layers
    "rvq.codebook_size": "reference",         # 256 codes
    "rvq.code_dim": "desk-scale",             # reference dimension 1024
    "rvq.gamma": "desk-scale",
    "masked.layers": "reference",             # 6 layers
    "masked.heads": "reference",              # 8 heads
    "masked.dim": "desk-scale",               # reference width 512
    "residual.layers": "reference",
    "residual.heads": "reference",            # 6 heads
    "residual.dim": "desk-scale",             # reference width 384
    "decode.guidance_scale": "reference",     # 4
    "masked.cond_dropout": "reference",       # 10% unconditional
    "decode.iterations": "desk-scale",
    "data.*": "desk-scale",
    "train.*": "desk-scale",
}


@dataclass
class DataConfig:
    per_class: int = 32
    t_min: int = 48
    t_max: int = 72
    fps: float = 20.0

    def validate(self):
        if self.per_class < 2:
            raise ValueError("per_class must be >= 2")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("need 1 <= t_min <= t_max")
        return self


@dataclass
class DecodeConfig:
    iterations: int = 10
    guidance_scale: float = 4.0
    temperature: float = 1.0
    retrieval_k: int = 1
    score_mode: str = "text"

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1")
        if self.score_mode not in ("text", "max"):
            raise ValueError(f"unknown score_mode '{self.score_mode}'")
        return self


@dataclass
class TrainConfig:
    retriever_steps: int = 300
    rvq_steps: int = 500
    masked_steps: int = 600
    residual_steps: int = 500

    def validate(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        return self


@dataclass
class EvalConfig:
    rprecision_pool: int = 32
    diversity_subset: int = 300
    n_generate: int = 48
    mm_texts: int = 4
    mm_repeats: int = 4

    def validate(self):
        if self.rprecision_pool < 2:
            raise ValueError("rprecision_pool must be >= 2")
        return self


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    rvq: RvqConfig = field(default_factory=RvqConfig)
    masked: GenTransformerConfig = field(default_factory=lambda: GenTransformerConfig(
        layers=6, heads=8, dim=64, ffn=256, cond_dim=32, codebook_size=256,
        code_dim=32, levels=5, with_retrieval=True))
    residual: GenTransformerConfig = field(default_factory=lambda: GenTransformerConfig(
        layers=6, heads=6, dim=48, ffn=192, cond_dim=32, codebook_size=256,
        code_dim=32, levels=5, with_retrieval=False))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        self.data.validate()
        self.retriever.validate()
        self.rvq.validate()
        self.masked.validate()
        self.residual.validate()
        self.decode.validate()
        self.train.validate()
        self.eval.validate()
        # cross-stage consistency
        problems = []
        if not self.masked.with_retrieval:
            problems.append("masked model must use retrieval conditioning")
        if self.residual.with_retrieval:
            problems.append("residual model conditions on text only")
        if self.masked.cond_dim != self.retriever.dim:
            problems.append(f"masked.cond_dim {self.masked.cond_dim} != retriever.dim {self.retriever.dim}")
        if self.residual.cond_dim != self.retriever.dim:
            problems.append(f"residual.cond_dim {self.residual.cond_dim} != retriever.dim {self.retriever.dim}")
        for name, gen in (("masked", self.masked), ("residual", self.residual)):
            if gen.codebook_size != self.rvq.codebook_size:
                problems.append(f"{name}.codebook_size {gen.codebook_size} != rvq {self.rvq.codebook_size}")
            if gen.code_dim != self.rvq.code_dim:
                problems.append(f"{name}.code_dim {gen.code_dim} != rvq.code_dim {self.rvq.code_dim}")
            if gen.levels != self.rvq.levels:
                problems.append(f"{name}.levels {gen.levels} != rvq.levels {self.rvq.levels}")
        if self.data.t_min < self.rvq.temporal_stride:
            problems.append("t_min shorter than the codec temporal stride")
        if problems:
            raise ValueError("inconsistent config: " + "; ".join(problems))
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        spec = {
            "data": DataConfig, "retriever": RetrieverConfig, "rvq": RvqConfig,
            "masked": GenTransformerConfig, "residual": GenTransformerConfig,
            "decode": DecodeConfig, "train": TrainConfig, "eval": EvalConfig,
        }
        known_top = {"version", "seed", *spec}
        unknown = set(d) - known_top
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "version" in d:
            kwargs["version"] = d["version"]
        if "seed" in d:
            kwargs["seed"] = d["seed"]
        for key, cls in spec.items():
            if key not in d:
                continue
            sub = d[key]
            allowed = {f.name for f in fields(cls)}
            bad = set(sub) - allowed
            if bad:
                raise ValueError(f"unknown keys in '{key}': {sorted(bad)}")
            kwargs[key] = cls(**sub)
        cfg = PipelineConfig(**kwargs)
        return cfg.validate()


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def desk_config(seed=0) -> PipelineConfig:
    """Defaults sized for a complete CPU run in minutes, not hours."""
    cfg = PipelineConfig(seed=seed)
    return cfg.validate()
