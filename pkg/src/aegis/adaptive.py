"""Defense-aware attacks: feature matching (Fea), HFC, and the white-box detector attack (WB / WB_d)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch

from .attacks import (AttackError, AttackResult, AttackSpec, attack_success, cw_margin_loss, engine_kwargs, pgd,
                      resolve_targets)
from .cushion import CushionOp, straight_through
from .data import ImageBatch
from .model import pooled

ADAPTIVE_METHODS = ("FEA", "HFC", "WB", "WB_D")


def adaptive_base(**kw) -> AttackSpec:
    """Adaptive-strength defaults: Linf 16/256, 100 steps, random init."""
    kw.setdefault("method", "CW_LINF")
    kw.setdefault("epsilon", 16 / 256)
    kw.setdefault("steps", 100)
    kw.setdefault("random_init", True)
    return AttackSpec(**kw)


@dataclass
class AdaptiveSpec:
    method: str = "WB"
    base: AttackSpec = field(default_factory=adaptive_base)
    layer_weights: Optional[Sequence[float]] = None
    beta: float = 1.0  # HFC weight on the Mahalanobis term
    cls_weight: float = 1.0  # WB weight on J_cw
    decay_factor: float = 0.1
    decay_after: int = 50
    cushion: Optional[CushionOp] = None
    literal_signs: bool = False  # WB: use +S as printed instead of -S

    def __post_init__(self):
        if self.method not in ADAPTIVE_METHODS:
            raise AttackError(f"unknown adaptive method {self.method!r}")
        if self.method == "WB_D" and not self.decay_after < self.base.steps:
            raise AttackError("decay_after must be smaller than steps")

    def to_dict(self):
        return {"method": self.method, "base": self.base.to_dict(),
                "layer_weights": list(self.layer_weights) if self.layer_weights is not None else None,
                "beta": self.beta, "cls_weight": self.cls_weight, "decay_factor": self.decay_factor,
                "decay_after": self.decay_after,
                "cushion": self.cushion.to_dict() if self.cushion is not None else None,
                "literal_signs": self.literal_signs}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["base"] = AttackSpec.from_dict(d["base"])
        if d.get("cushion") is not None:
            d["cushion"] = CushionOp.from_dict(d["cushion"])
        return cls(**d)


# ---------------------------------------------------------------------------
# feature statistics

class StatisticsError(ValueError):
    pass


@dataclass
class FeatureStatistics:
    tap_layers: list
    means: list  # means[l] : tensor [Y, D_l]
    covariances: list  # [D_l, D_l], shared across classes
    precisions: list
    counts: list  # samples per class
    model_checksum: str = ""

    def to_state(self):
        return {"tap_layers": self.tap_layers, "means": self.means, "covariances": self.covariances,
                "precisions": self.precisions, "counts": self.counts, "model_checksum": self.model_checksum}

    @classmethod
    def from_state(cls, d):
        return cls(**d)


def collect_pooled(model, data: ImageBatch, cushion=None, batch_size=500) -> list[torch.Tensor]:
    from .cushion import apply
    chunks = []
    with torch.no_grad():
        for b in data.batches(batch_size):
            px = b.pixels if cushion is None else apply(cushion, b.pixels)
            chunks.append([pooled(f) for f in model.record(px).features])
    return [torch.cat([c[l] for c in chunks]).double() for l in range(len(chunks[0]))]


def gaussian_fit(feats: list[torch.Tensor], labels: torch.Tensor, num_classes: int, min_per_class=50,
                 loading=1e-6):
    counts = [int((labels == c).sum()) for c in range(num_classes)]
    for c, n in enumerate(counts):
        if n == 0:
            raise StatisticsError(f"class {c} has no samples")
        if n < min_per_class:
            raise StatisticsError(f"class {c} has {n} samples, need at least {min_per_class}")
    means, covs, precs = [], [], []
    for f in feats:
        mu = torch.stack([f[labels == c].mean(0) for c in range(num_classes)])
        centered = f - mu[labels]
        cov = centered.T @ centered / len(f)
        evals, evecs = torch.linalg.eigh(cov)
        evals = evals.clamp_min(0) + loading
        cov = (evecs * evals) @ evecs.T
        cov = (cov + cov.T) / 2
        means.append(mu)
        covs.append(cov)
        precs.append((evecs / evals) @ evecs.T)
    return means, covs, precs, counts


def fit_feature_statistics(model, clean_train: ImageBatch, min_per_class: int = 50) -> FeatureStatistics:
    from .model import parameter_checksum
    feats = collect_pooled(model, clean_train)
    means, covs, precs, counts = gaussian_fit(feats, clean_train.labels, model.num_classes, min_per_class)
    return FeatureStatistics(list(model.tap_layers), means, covs, precs, counts, parameter_checksum(model))


def mahalanobis_sq(feature: torch.Tensor, mean: torch.Tensor, precision: torch.Tensor) -> torch.Tensor:
    """Squared Mahalanobis distance of pooled rows [N, D] to per-row means [N, D]."""
    d = feature.to(precision.dtype) - mean
    return ((d @ precision) * d).sum(1)


def hfc_penalty(features, stats: FeatureStatistics, classes: torch.Tensor, weights) -> torch.Tensor:
    total = 0
    for l, f in enumerate(features):
        p = pooled(f)
        total = total + weights[l] * mahalanobis_sq(p, stats.means[l][classes], stats.precisions[l])
    return total.to(features[0].dtype)


# ---------------------------------------------------------------------------
# attacks

def _weights(spec: AdaptiveSpec, k: int):
    return list(spec.layer_weights) if spec.layer_weights is not None else [1.0] * k


def _finish(model, x, adv, targets, spec, trace, cushion):
    success = attack_success(model, adv, targets, False, x.labels, cushion)
    return AttackResult(x.with_pixels(adv), success, trace, spec, targets)


def _targets(model, x, spec: AdaptiveSpec, targets):
    tgt, untargeted = resolve_targets(spec.base, x.labels, model.num_classes, targets)
    if untargeted:
        raise AttackError("adaptive attacks are targeted")
    return tgt


def select_guides(model, x: ImageBatch, targets: torch.Tensor, guide_pool: ImageBatch, cushion=None):
    """Nearest target-class pool sample in penultimate feature space, per attacked sample."""
    if len(guide_pool) == 0:
        raise AttackError("empty guide pool")
    from .cushion import apply
    with torch.no_grad():
        q = model.record(x.pixels if cushion is None else apply(cushion, x.pixels)).features[-1]
        pool_px = guide_pool.pixels if cushion is None else apply(cushion, guide_pool.pixels)
        bank = torch.cat([model.record(b).features[-1] for b in pool_px.split(500)])
    idx = torch.empty(len(x), dtype=torch.int64)
    for c in targets.unique():
        members = (guide_pool.labels == c).nonzero().squeeze(1)
        if len(members) == 0:
            raise AttackError(f"guide pool has no samples of class {int(c)}")
        rows = (targets == c).nonzero().squeeze(1)
        d = torch.cdist(q[rows], bank[members])
        idx[rows] = members[d.argmin(1)]
    return guide_pool[idx]


def run_feature_attack(model, x: ImageBatch, spec: AdaptiveSpec, guide_pool: ImageBatch, targets=None,
                       guides: Optional[ImageBatch] = None) -> AttackResult:
    tgt = _targets(model, x, spec, targets)
    if guides is None:
        guides = select_guides(model, x, tgt, guide_pool, spec.cushion)
    fwd = straight_through(spec.cushion)
    with torch.no_grad():
        from .cushion import apply
        gpx = guides.pixels if spec.cushion is None else apply(spec.cushion, guides.pixels)
        guide_feats = model.record(gpx).features
    # per-layer weights default to 1/numel so wide shallow maps do not swamp the sum
    weights = spec.layer_weights or [1.0 / g[0].numel() for g in guide_feats]

    def loss(a):
        feats = model.record(fwd(a)).features
        return sum(w * ((f - g) ** 2).flatten(1).sum(1) for w, f, g in zip(weights, feats, guide_feats))

    trace = []
    adv = pgd(loss, x.pixels, trace=trace, **engine_kwargs(spec.base, x.pixels))
    return _finish(model, x, adv, tgt, spec, trace, spec.cushion)


def run_hfc_attack(model, x: ImageBatch, stats: FeatureStatistics, spec: AdaptiveSpec, targets=None) -> AttackResult:
    if list(stats.tap_layers) != list(model.tap_layers):
        raise AttackError("feature statistics were fitted on different taps")
    tgt = _targets(model, x, spec, targets)
    fwd = straight_through(spec.cushion)
    weights = _weights(spec, len(stats.means))

    def loss(a):
        rec = model.record(fwd(a))
        out = cw_margin_loss(rec.logits, tgt, spec.base.kappa)
        if spec.beta:
            out = out + spec.beta * hfc_penalty(rec.features, stats, tgt, weights)
        return out

    trace = []
    adv = pgd(loss, x.pixels, trace=trace, **engine_kwargs(spec.base, x.pixels))
    return _finish(model, x, adv, tgt, spec, trace, spec.cushion)


def whitebox_loss(model, detector_logit, targets, spec: AdaptiveSpec):
    """J_wba = -S_target[f(C(x))] + J_cw(target); ``detector_logit(record, classes)`` gives S."""
    fwd = straight_through(spec.cushion)
    sign = 1.0 if spec.literal_signs else -1.0

    def loss(a):
        rec = model.record(fwd(a))
        s = detector_logit(rec, targets)
        return sign * s + spec.cls_weight * cw_margin_loss(rec.logits, targets, spec.base.kappa)

    return loss


def run_whitebox_attack(model, x: ImageBatch, shield, spec: AdaptiveSpec, targets=None) -> AttackResult:
    """WB / WB_D against a shield set (anything with ``routed_logit(record, classes)``)."""
    if shield is None:
        raise AttackError("white-box attack needs a detector")
    tgt = _targets(model, x, spec, targets)
    for c in tgt.unique().tolist():
        if not shield.has_class(c):
            raise AttackError(f"no detector for target class {c}")
    loss = whitebox_loss(model, shield.routed_logit, tgt, spec)
    kw = engine_kwargs(spec.base, x.pixels)
    if spec.method == "WB_D":
        kw["step_schedule"] = lambda t: spec.decay_factor if t >= spec.decay_after else 1.0
    trace = []
    adv = pgd(loss, x.pixels, trace=trace, **kw)
    return _finish(model, x, adv, tgt, spec, trace, spec.cushion)


def run_adaptive(model, x, spec: AdaptiveSpec, *, stats=None, shield=None, guide_pool=None, targets=None):
    if spec.method == "FEA":
        return run_feature_attack(model, x, spec, guide_pool, targets)
    if spec.method == "HFC":
        return run_hfc_attack(model, x, stats, spec, targets)
    return run_whitebox_attack(model, x, shield, spec, targets)
