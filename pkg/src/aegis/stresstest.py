"""Layer stress test: push each tap's mean activation up or down with BIM and measure how far it moves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .attacks import pgd
from .cushion import CushionOp, apply as cushion_apply, straight_through
from .data import ImageBatch

CSV_FIELDS = ("layer", "direction", "cushion", "clean_mean", "attacked_mean", "rel_change_pct", "epsilon", "n")


class StressError(ValueError):
    pass


@dataclass
class StressConfig:
    epsilon: float = 4 / 256
    steps: int = 40
    step_size: float = 0.5 / 256
    batch_size: int = 250
    max_samples: Optional[int] = None
    # "uncushioned": every row is relative to the plain clean input (a single clean row per tap);
    # "cushioned": a cushioned row is relative to the cushioned clean input (attack-only effect)
    reference: str = "uncushioned"


@dataclass
class StressCell:
    layer: str
    direction: str  # "up" or "down"
    cushion: str
    clean_mean: float
    attacked_mean: float
    epsilon: float
    n: int
    cushioned_clean_mean: Optional[float] = None  # clean input behind this row's cushion

    @property
    def rel_change(self) -> float:
        return relative_change(self.clean_mean, self.attacked_mean)

    def row(self) -> dict:
        return {"layer": self.layer, "direction": self.direction, "cushion": self.cushion,
                "clean_mean": f"{self.clean_mean:.6g}", "attacked_mean": f"{self.attacked_mean:.6g}",
                "rel_change_pct": f"{100 * self.rel_change:.4g}", "epsilon": f"{self.epsilon:.6g}", "n": self.n}


def relative_change(clean: float, attacked: float) -> float:
    return (attacked - clean) / clean


@dataclass
class StressReport:
    cells: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    epsilon: float = 4 / 256
    n: int = 0

    def get(self, layer: str, direction: str, cushion: str = "none") -> StressCell:
        for c in self.cells:
            if (c.layer, c.direction, c.cushion) == (layer, direction, cushion):
                return c
        raise KeyError((layer, direction, cushion))

    def rel_changes(self, direction: str, cushion: str = "none") -> list[float]:
        return [self.get(l, direction, cushion).rel_change for l in self.layers]

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for c in self.cells:
                w.writerow(c.row())

    def render(self) -> str:
        cushions = list(dict.fromkeys(c.cushion for c in self.cells))
        lines = ["| setting | " + " | ".join(self.layers) + " |", "|---" * (len(self.layers) + 1) + "|"]
        clean = [self.get(l, "up", "none").clean_mean for l in self.layers]
        lines.append("| clean | " + " | ".join(f"{v:.3f}" for v in clean) + " |")
        for d, arrow in (("up", "↑"), ("down", "↓")):
            for cu in cushions:
                vals = [self.get(l, d, cu) for l in self.layers]
                lines.append(f"| {cu} ({arrow}) | " + " | ".join(
                    f"{v.attacked_mean:.3f}({100 * v.rel_change:+.3g}%)" for v in vals) + " |")
        return "\n".join(lines)


def layer_mean(model, pixels, layer: int, cushion=None) -> torch.Tensor:
    """Per-sample mean over all elements of a tap activation."""
    with torch.no_grad():
        inp = pixels if cushion is None else cushion_apply(cushion, pixels)
        return model.record(inp).features[layer].flatten(1).mean(1)


def stress_attack(model, x, layer, direction: str, eps: float, cushion: Optional[CushionOp] = None,
                  config: StressConfig = StressConfig()) -> torch.Tensor:
    """BIM on +mean (down) or -mean (up) of one tap; gradients pass the cushion straight through."""
    pixels = getattr(x, "pixels", x)
    if isinstance(layer, str):
        if layer not in model.tap_layers:
            raise StressError(f"unknown layer {layer!r}")
        layer = model.tap_layers.index(layer)
    if not 0 <= layer < len(model.tap_layers):
        raise StressError(f"unknown layer index {layer}")
    if direction not in ("up", "down"):
        raise StressError("direction must be 'up' or 'down'")
    sign = -1.0 if direction == "up" else 1.0
    fwd = straight_through(cushion)

    def loss(a):
        return sign * model.record(fwd(a)).features[layer].flatten(1).mean(1)

    return pgd(loss, pixels, eps=eps, alpha=config.step_size, steps=config.steps, random_init=False)


def run_stress_suite(model, test_data: ImageBatch, eps: float = 4 / 256,
                     cushion_list: Sequence[CushionOp] = (), config: Optional[StressConfig] = None) -> StressReport:
    """Every tap x {up, down} x ({no cushion} + cushion_list).

    ``config.reference`` picks the clean mean a row's relative change is taken
    against; the cushioned clean mean is recorded on every cell either way.
    """
    config = config or StressConfig(epsilon=eps)
    if len(test_data) == 0:
        raise StressError("empty test data")
    if config.reference not in ("uncushioned", "cushioned"):
        raise StressError(f"unknown reference {config.reference!r}")
    data = test_data if config.max_samples is None else test_data[:config.max_samples]
    settings = [("none", None)] + [(c.name, c) for c in cushion_list]
    report = StressReport(layers=list(model.tap_layers), epsilon=eps, n=len(data))
    plain = {}
    for cname, cushion in settings:
        for li, lname in enumerate(model.tap_layers):
            clean_sum = 0.0
            sums = {"up": 0.0, "down": 0.0}
            for b in data.batches(config.batch_size):
                clean_sum += layer_mean(model, b.pixels, li, cushion).sum().item()
                for d in ("up", "down"):
                    adv = stress_attack(model, b.pixels, li, d, eps, cushion, config)
                    sums[d] += layer_mean(model, adv, li, cushion).sum().item()
            clean = clean_sum / len(data)
            if cushion is None:
                plain[li] = clean
            ref = plain[li] if config.reference == "uncushioned" else clean
            for d in ("up", "down"):
                report.cells.append(StressCell(lname, d, cname, ref, sums[d] / len(data), eps, len(data), clean))
    return report
