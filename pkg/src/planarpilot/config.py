"""Run configuration: one JSON file carrying every tunable section."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .expert import CurationConfig
from .latent import AEConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .sim import SimParams
from .tasks import GuidanceWeights


@dataclass
class EvalConfig:
    goal_episodes: int = 100
    obstacle_episodes: int = 50
    robustness_episodes: int = 150
    robustness_cap: int = 3000
    mcg_goal_episodes: int = 50
    mcg_counts: tuple[int, ...] = (1, 3, 5)
    base_seed: int = 7000

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["mcg_counts"] = list(self.mcg_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "mcg_counts" in d:
            d["mcg_counts"] = tuple(d["mcg_counts"])
        return cls(**d)


@dataclass
class RunConfig:
    sim: SimParams = field(default_factory=SimParams)
    curation: CurationConfig = field(default_factory=CurationConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # per-task sampler overrides (merged onto the battery presets)
    task_samplers: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "curation": self.curation.to_dict(),
            "ae": self.ae.to_dict(),
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "weights": self.weights.to_dict(),
            "eval": self.eval.to_dict(),
            "task_samplers": self.task_samplers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            sim=SimParams.from_dict(d["sim"]) if "sim" in d else SimParams(),
            curation=CurationConfig.from_dict(d["curation"]) if "curation" in d else CurationConfig(),
            ae=AEConfig.from_dict(d["ae"]) if "ae" in d else AEConfig(),
            model=ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig(),
            sampler=SamplerConfig.from_dict(d["sampler"]) if "sampler" in d else SamplerConfig(),
            weights=GuidanceWeights.from_dict(d["weights"]) if "weights" in d else GuidanceWeights(),
            eval=EvalConfig.from_dict(d["eval"]) if "eval" in d else EvalConfig(),
            task_samplers=d.get("task_samplers", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))
