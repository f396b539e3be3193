"""Experiment configuration: dataclasses <-> YAML, dotted overrides, and stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .baselines import BaselineConfig
from .data import IngestionConfig
from .model import TrainConfig
from .shield import ShieldConfig
from .stresstest import StressConfig

OUTPUT_ROOT_ENV = "AEGIS_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def stable_hash(obj, n: int = 16) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:n]


@dataclass
class EvalConfig:
    n_eval: int = 200  # correctly classified clean samples attacked per cell
    tnr: float = 0.9
    calibration: str = "split"  # "split": first half of test split; "test": the evaluated clean scores
    conventional_steps: int = 50
    adaptive_steps: int = 100
    linf_eps: float = 16 / 256
    l2_eps: float = 8 / 256
    l2_convention: str = "rms"
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str = "toy"
    ingestion: IngestionConfig = field(default_factory=IngestionConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    substitute: TrainConfig = field(default_factory=lambda: TrainConfig(seed=1))
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    shield_train_samples: int = 3000
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    stress: StressConfig = field(default_factory=StressConfig)
    cushion: str = "JPEG-80"  # Aegis cushion
    stress_cushions: list = field(default_factory=lambda: ["JPEG-90", "JPEG-70"])
    attacks: list = field(default_factory=list)
    detectors: list = field(default_factory=list)
    metrics: list = field(default_factory=lambda: ["auroc", "tpr"])
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: Optional[str] = None
    artifact_dir: Optional[str] = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shield"] = self.shield.to_dict()
        d["baselines"] = self.baselines.to_dict()
        d["classifier"]["widths"] = list(self.classifier.widths)
        d["substitute"]["widths"] = list(self.substitute.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = cls()
        sub = {"ingestion": IngestionConfig, "classifier": TrainConfig, "substitute": TrainConfig,
               "stress": StressConfig, "eval": EvalConfig}
        for k, v in d.items():
            if k in sub:
                base = dataclasses.asdict(getattr(out, k))
                base.update(v or {})
                if "widths" in base:
                    base["widths"] = tuple(base["widths"])
                setattr(out, k, sub[k](**base))
            elif k == "shield":
                base = out.shield.to_dict()
                base.update(v or {})
                out.shield = ShieldConfig.from_dict(base)
            elif k == "baselines":
                base = out.baselines.to_dict()
                base.update(v or {})
                out.baselines = BaselineConfig.from_dict(base)
            else:
                setattr(out, k, v)
        return out

    def digest(self) -> str:
        return stable_hash(self.to_dict())

    def pipeline_dict(self) -> dict:
        """The parts that determine trained artifacts (classifier, shields, baselines)."""
        d = self.to_dict()
        return {k: d[k] for k in ("dataset", "ingestion", "classifier", "substitute", "shield",
                                  "shield_train_samples", "baselines", "cushion", "seed")}

    def out_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else output_root() / self.name

    def art_dir(self) -> Path:
        return Path(self.artifact_dir) if self.artifact_dir else output_root() / "artifacts"


def parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply 'a.b.c=value' overrides (values parsed as YAML) to a nested dict."""
    d = json.loads(json.dumps(d, default=str))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} must look like key=value")
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(value)
    return d


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    base = ExperimentConfig.from_dict(raw).to_dict()
    return ExperimentConfig.from_dict(apply_overrides(base, overrides or []))


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
