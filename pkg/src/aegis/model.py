"""Tapped CNN classifier: training, forward records, input gradients, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch

log = logging.getLogger(__name__)

TAP_NAMES = ("stage1", "stage2", "stage3", "stage4", "penultimate")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ForwardRecord:
    logits: torch.Tensor
    features: list[torch.Tensor]

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(dim=1)

    @property
    def predicted(self) -> torch.Tensor:
        return self.logits.argmax(dim=1)


class TappedCNN(nn.Module):
    """Four conv-norm-relu-pool stages; taps after each activation plus the pooled vector."""

    def __init__(self, in_channels=1, num_classes=3, widths=(8, 16, 32, 32), image_size=32):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.arch = dict(in_channels=in_channels, num_classes=num_classes,
                         widths=list(widths), image_size=image_size)
        self.num_classes = num_classes
        self.tap_layers = list(TAP_NAMES)
        self.metadata: dict = {}
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, padding=1, bias=False),
                                        nn.BatchNorm2d(w), nn.ReLU()))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(prev, num_classes)

    @property
    def input_shape(self):
        a = self.arch
        return (a["in_channels"], a["image_size"], a["image_size"])

    def record(self, x: torch.Tensor) -> ForwardRecord:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} != model input {self.input_shape}")
        feats = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.stages) - 1:
                h = F.max_pool2d(h, 2)
        pooled = h.mean(dim=(2, 3))
        feats.append(pooled)
        return ForwardRecord(self.head(pooled), feats)

    def forward(self, x):
        return self.record(x).logits


TappedClassifier = TappedCNN


def forward(model: TappedCNN, x) -> ForwardRecord:
    pixels = x.pixels if isinstance(x, ImageBatch) else x
    with torch.no_grad():
        return model.record(pixels)


def pooled(feature: torch.Tensor) -> torch.Tensor:
    """Global-average-pool a tap activation into [N, C]."""
    return feature.mean(dim=(2, 3)) if feature.dim() == 4 else feature


def input_gradient(model: TappedCNN, x, loss: Callable[[ForwardRecord], torch.Tensor]) -> torch.Tensor:
    """Gradient of the batch-mean of a per-sample loss w.r.t. the pixels.

    ``loss`` maps a ForwardRecord to a per-sample vector [N].
    """
    pixels = (x.pixels if isinstance(x, ImageBatch) else x).detach().clone().requires_grad_(True)
    value = loss(model.record(pixels))
    if value.dim() != 1 or value.shape[0] != pixels.shape[0]:
        raise ValueError("loss must return one value per sample")
    if not value.requires_grad:
        return torch.zeros_like(pixels)
    (grad,) = torch.autograd.grad(value.mean(), pixels, allow_unused=True)
    return torch.zeros_like(pixels) if grad is None else grad


def cross_entropy_loss(labels):
    return lambda rec: F.cross_entropy(rec.logits, labels, reduction="none")


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    widths: tuple = (8, 16, 32, 32)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=list).encode()).hexdigest()[:16]


def accuracy(model: TappedCNN, data: ImageBatch, transform=None, batch_size=500) -> float:
    correct = 0
    for b in data.batches(batch_size):
        px = b.pixels if transform is None else transform(b.pixels)
        correct += (forward(model, px).predicted == b.labels).sum().item()
    return correct / max(len(data), 1)


def train_classifier(train: ImageBatch, config: TrainConfig = TrainConfig(),
                     test: ImageBatch | None = None, checkpoint: str | Path | None = None) -> TappedCNN:
    num_classes = train.num_classes or int(train.labels.max()) + 1
    if len(torch.unique(train.labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    torch.manual_seed(config.seed)
    model = TappedCNN(train.pixels.shape[1], num_classes, config.widths, train.pixels.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    g = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(train), generator=g)
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss = F.cross_entropy(model(train.pixels[idx]), train.labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(train))
        log.info("epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    model.metadata = {"train_config": asdict(config), "config_hash": config.digest(),
                      "loss_history": history}
    if test is not None:
        model.metadata["test_accuracy"] = accuracy(model, test)
    if checkpoint is not None:
        save_classifier(model, checkpoint)
    return model


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_classifier(model: TappedCNN, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "aegis-classifier/1", "arch": model.arch, "tap_layers": model.tap_layers,
                "state_dict": model.state_dict(), "metadata": model.metadata,
                "checksum": parameter_checksum(model)}, path)


def load_classifier(path) -> TappedCNN:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "aegis-classifier/1":
        raise ValueError(f"{path} is not a classifier checkpoint")
    a = blob["arch"]
    model = TappedCNN(a["in_channels"], a["num_classes"], tuple(a["widths"]), a["image_size"])
    model.load_state_dict(blob["state_dict"])
    model.tap_layers = list(blob["tap_layers"])
    model.metadata = blob["metadata"]
    model.eval()
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
