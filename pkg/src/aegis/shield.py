"""Per-class adversarially trained feature detectors and the cushioned two-tier pipeline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import cw_margin_loss, pgd
from .cushion import CushionOp, apply as cushion_apply, straight_through
from .data import ImageBatch
from .model import ForwardRecord, parameter_checksum, pooled

log = logging.getLogger(__name__)


class ShieldError(ValueError):
    pass


class ShieldDetector(nn.Module):
    """Per-tap GAP -> dense(hidden) -> relu heads, concatenated into a dense trunk emitting one logit."""

    def __init__(self, class_id: int, taps: Sequence[int], tap_channels: Sequence[int], hidden: int = 64):
        super().__init__()
        self.class_id = int(class_id)
        self._taps = tuple(int(t) for t in taps)
        self.tap_channels = [int(c) for c in tap_channels]
        self.hidden = hidden
        self.heads = nn.ModuleList(nn.Sequential(nn.Linear(c, hidden), nn.ReLU()) for c in self.tap_channels)
        self.trunk = nn.Sequential(nn.Linear(hidden * len(self._taps), hidden), nn.ReLU(), nn.Linear(hidden, 1))

    @property
    def taps(self) -> tuple:
        return self._taps

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if max(self._taps) >= len(features):
            raise ShieldError(f"detector consumes taps {self._taps}, record has {len(features)}")
        parts = []
        for head, t, c in zip(self.heads, self._taps, self.tap_channels):
            f = pooled(features[t])
            if f.shape[1] != c:
                raise ShieldError(f"tap {t} has {f.shape[1]} channels, detector expects {c}")
            parts.append(head(f))
        return self.trunk(torch.cat(parts, dim=1)).squeeze(1)


def detector_logit(shield: ShieldDetector, features) -> torch.Tensor:
    feats = features.features if isinstance(features, ForwardRecord) else features
    return shield(feats)


@dataclass
class ShieldConfig:
    taps: Optional[list] = None  # None: every model tap
    epochs: int = 25
    eps_start: float = 1 / 256
    eps_end: float = 16 / 256
    inner_steps: int = 10
    inner_cls_term: bool = True  # add J_cw(target y) so negatives are routed to detector y
    batch_size: int = 64
    batches_per_epoch: int = 8
    lr: float = 1e-3
    hidden: int = 64
    cushion: Optional[CushionOp] = None
    probe_eps: float = 16 / 256
    probe_size: int = 64
    seed: int = 0

    def schedule(self) -> list[float]:
        """Linear per-epoch budget from eps_start to eps_end."""
        if self.epochs == 1:
            return [self.eps_end]
        return [self.eps_start + (self.eps_end - self.eps_start) * e / (self.epochs - 1) for e in range(self.epochs)]

    def to_dict(self):
        d = asdict(self)
        d["cushion"] = self.cushion.to_dict() if self.cushion is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("cushion") is not None:
            d["cushion"] = CushionOp.from_dict(d["cushion"])
        return cls(**d)


class ShieldSet:
    """One detector per class plus the cushion they were trained behind and a calibrated threshold."""

    def __init__(self, detectors: dict, cushion: Optional[CushionOp] = None, config: Optional[ShieldConfig] = None,
                 classifier_checksum: str = "", tau: Optional[float] = None):
        self.detectors = {int(k): v for k, v in detectors.items()}
        self.cushion = cushion
        self.config = config
        self.classifier_checksum = classifier_checksum
        self.tau = tau
        self.history: dict = {}

    @property
    def taps(self):
        return next(iter(self.detectors.values())).taps

    def has_class(self, c: int) -> bool:
        return int(c) in self.detectors

    def routed_logit(self, record: ForwardRecord, classes: torch.Tensor) -> torch.Tensor:
        """Logit of the detector belonging to each sample's class."""
        out = torch.zeros(record.logits.shape[0], dtype=record.logits.dtype)
        for c in classes.unique().tolist():
            if c not in self.detectors:
                raise ShieldError(f"missing detector for class {c}")
            rows = classes == c
            feats = [f[rows] for f in record.features]
            out = out.index_put((rows.nonzero().squeeze(1),), self.detectors[c](feats))
        return out

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": "aegis-shield/1",
                    "detectors": {c: {"state_dict": d.state_dict(), "taps": list(d.taps),
                                      "tap_channels": d.tap_channels, "hidden": d.hidden}
                                  for c, d in self.detectors.items()},
                    "cushion": self.cushion.to_dict() if self.cushion else None,
                    "config": self.config.to_dict() if self.config else None,
                    "eps_schedule": self.config.schedule() if self.config else None,
                    "classifier_checksum": self.classifier_checksum, "tau": self.tau,
                    "history": self.history}, path)

    @classmethod
    def load(cls, path, model=None) -> "ShieldSet":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != "aegis-shield/1":
            raise ShieldError(f"{path} is not a shield checkpoint")
        if model is not None and blob["classifier_checksum"] != parameter_checksum(model):
            raise ShieldError("shield was trained against a different classifier")
        dets = {}
        for c, d in blob["detectors"].items():
            det = ShieldDetector(c, d["taps"], d["tap_channels"], d["hidden"])
            det.load_state_dict(d["state_dict"])
            det.eval()
            dets[c] = det
        out = cls(dets, CushionOp.from_dict(blob["cushion"]) if blob["cushion"] else None,
                  ShieldConfig.from_dict(blob["config"]) if blob["config"] else None,
                  blob["classifier_checksum"], blob["tau"])
        out.history = blob.get("history", {})
        return out


# ---------------------------------------------------------------------------
# inner attack and training

def inner_attack(model, shield: ShieldDetector, x_other: ImageBatch, eps: float, cushion: Optional[CushionOp] = None,
                 steps: int = 10, cls_term: bool = True, seed: int = 0, alpha: Optional[float] = None,
                 random_init: bool = True) -> torch.Tensor:
    """PGD on -S_y[f(C(x))] (+ J_cw toward y) starting from other-class samples."""
    if eps < 0:
        raise ShieldError("inner-attack budget must be non-negative")
    if eps == 0:
        return x_other.pixels.clone()
    fwd = straight_through(cushion)
    y = torch.full((len(x_other),), shield.class_id, dtype=torch.int64)

    def loss(a):
        rec = model.record(fwd(a))
        out = -shield(rec.features)
        if cls_term:
            out = out + cw_margin_loss(rec.logits, y)
        return out

    return pgd(loss, x_other.pixels, eps=eps, alpha=alpha if alpha is not None else 2.5 * eps / steps,
               steps=steps, random_init=random_init, seed=seed)


def eq3_terms(shield: ShieldDetector, clean_feats, adv_feats):
    """(log sigma(S(clean)), log(1 - sigma(S(adv)))) as batch means; their sum is the objective maximized."""
    s_clean = shield(clean_feats)
    s_adv = shield(adv_feats)
    return F.logsigmoid(s_clean).mean(), F.logsigmoid(-s_adv).mean()


def _features(model, px, cushion):
    with torch.no_grad():
        return model.record(px if cushion is None else cushion_apply(cushion, px)).features


def train_detector(model, class_id: int, clean: ImageBatch, others: ImageBatch, config: ShieldConfig,
                   freeze_eps: Optional[float] = None) -> tuple[ShieldDetector, dict]:
    if len(clean) == 0:
        raise ShieldError(f"class {class_id} has no clean samples")
    if len(others) == 0:
        raise ShieldError(f"no samples from classes other than {class_id}")
    taps = config.taps if config.taps is not None else list(range(len(model.tap_layers)))
    with torch.no_grad():
        probe_rec = model.record(clean.pixels[:1])
    channels = [pooled(probe_rec.features[t]).shape[1] for t in taps]
    torch.manual_seed(config.seed * 1000 + class_id)
    det = ShieldDetector(class_id, taps, channels, config.hidden)
    opt = torch.optim.Adam(det.parameters(), lr=config.lr)
    g = torch.Generator().manual_seed(config.seed * 1000 + class_id)
    schedule = config.schedule()
    probe = others[torch.randperm(len(others), generator=g)[:config.probe_size]]
    hist = {"eps": [], "clean_term": [], "adv_term": [], "probe_adv_term": [], "loss": []}
    bs = config.batch_size
    for epoch in range(config.epochs):
        eps = schedule[epoch] if freeze_eps is None else freeze_eps
        pc = torch.randperm(len(clean), generator=g)
        po = torch.randperm(len(others), generator=g)
        terms = []
        for b in range(config.batches_per_epoch):
            ci = pc[(b * bs) % len(clean):][:bs]
            oi = po[(b * bs) % len(others):][:bs]
            det.eval()
            for p in det.parameters():
                p.requires_grad_(False)
            adv = inner_attack(model, det, others[oi], eps, config.cushion, config.inner_steps,
                               config.inner_cls_term, seed=config.seed + 7919 * epoch + b)
            for p in det.parameters():
                p.requires_grad_(True)
            det.train()
            clean_term, adv_term = eq3_terms(det, _features(model, clean.pixels[ci], config.cushion),
                                             _features(model, adv, config.cushion))
            loss = -(clean_term + adv_term)
            if not torch.isfinite(loss):
                raise ShieldError(f"non-finite detector loss for class {class_id} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            terms.append((clean_term.item(), adv_term.item(), loss.item()))
        det.eval()
        hist["eps"].append(eps)
        hist["clean_term"].append(sum(t[0] for t in terms) / len(terms))
        hist["adv_term"].append(sum(t[1] for t in terms) / len(terms))
        hist["loss"].append(sum(t[2] for t in terms) / len(terms))
        hist["probe_adv_term"].append(probe_adversarial_term(model, det, probe, config))
        log.info("class %d epoch %d eps %.4f loss %.4f probe %.4f", class_id, epoch, eps, hist["loss"][-1],
                 hist["probe_adv_term"][-1])
    for p in det.parameters():
        p.requires_grad_(False)
    return det, hist


def probe_adversarial_term(model, det: ShieldDetector, probe: ImageBatch, config: ShieldConfig) -> float:
    """log(1 - sigma(S)) on fresh inner attacks at a fixed budget against the current detector."""
    req = [p.requires_grad for p in det.parameters()]
    for p in det.parameters():
        p.requires_grad_(False)
    adv = inner_attack(model, det, probe, config.probe_eps, config.cushion, config.inner_steps,
                       config.inner_cls_term, seed=config.seed + 104729)
    for p, r in zip(det.parameters(), req):
        p.requires_grad_(r)
    with torch.no_grad():
        s = det(_features(model, adv, config.cushion))
    return F.logsigmoid(-s).mean().item()


def train_shield(model, train_data: ImageBatch, config: ShieldConfig = ShieldConfig(),
                 classes: Optional[Sequence[int]] = None, freeze_eps: Optional[float] = None) -> ShieldSet:
    """Train one detector per class against inner attacks regenerated on the current detector."""
    classes = range(model.num_classes) if classes is None else classes
    dets, history = {}, {}
    for c in classes:
        clean = train_data.of_class(c)
        others = train_data[train_data.labels != c]
        dets[c], history[c] = train_detector(model, c, clean, others, config, freeze_eps)
    out = ShieldSet(dets, config.cushion, config, parameter_checksum(model))
    out.history = history
    return out


# ---------------------------------------------------------------------------
# inference

def shield_scores(model, shields: ShieldSet, pixels: torch.Tensor, batch_size: int = 500):
    """(predicted class, routed clean-logit) with the shield set's cushion in front of the classifier."""
    preds, logits = [], []
    with torch.no_grad():
        for px in pixels.split(batch_size):
            inp = px if shields.cushion is None else cushion_apply(shields.cushion, px)
            rec = model.record(inp)
            pred = rec.predicted
            preds.append(pred)
            logits.append(shields.routed_logit(rec, pred))
    return torch.cat(preds), torch.cat(logits)


def calibrate_threshold(clean_logits: torch.Tensor, tnr: float = 0.9) -> float:
    """Largest tau accepting (logit >= tau) at least ``tnr`` of the clean logits."""
    s = torch.sort(clean_logits.double()).values
    k = int(math.floor((1 - tnr) * len(s) + 1e-9))
    return float(s[min(k, len(s) - 1)])


def aegis_infer(model, shields: ShieldSet, cushion: Optional[CushionOp], x):
    """cushion -> classifier -> detector of the predicted class; accept iff logit >= tau."""
    if shields.tau is None:
        raise ShieldError("shield set has no calibrated threshold")
    pixels = getattr(x, "pixels", x)
    if cushion is not None and cushion != shields.cushion and shields.cushion is not None:
        log.warning("inference cushion %s differs from training cushion %s", cushion.name, shields.cushion.name)
    saved = shields.cushion
    shields.cushion = cushion
    try:
        pred, logit = shield_scores(model, shields, pixels)
    finally:
        shields.cushion = saved
    return pred, logit, logit >= shields.tau
