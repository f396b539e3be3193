"""Reactive baseline detectors over pooled tap features: KD, LID, MAHA and per-layer DNN.

Every score is oriented so that larger means more anomalous.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import logsumexp

from .adaptive import collect_pooled, gaussian_fit
from .attacks import AttackSpec, run_attack
from .cushion import CushionOp
from .data import ImageBatch
from .model import ForwardRecord, parameter_checksum, pooled

log = logging.getLogger(__name__)

KINDS = ("KD", "LID", "MAHA", "DNN")


class BaselineError(ValueError):
    pass


@dataclass
class BaselineConfig:
    kd_bank_per_class: int = 500
    lid_k: int = 20
    lid_reference: int = 100
    maha_loading: float = 1e-6
    min_per_class: int = 20
    dnn_attack: dict = field(default_factory=lambda: {"method": "PGD", "epsilon": 16 / 256, "steps": 20})
    dnn_samples: int = 1500
    dnn_epochs: int = 30
    dnn_hidden: int = 64
    layer_normalize: bool = False  # z-normalize per-layer scores (clean calibration) before averaging
    cushion: Optional[CushionOp] = None
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["cushion"] = self.cushion.to_dict() if self.cushion else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("cushion"):
            d["cushion"] = CushionOp.from_dict(d["cushion"])
        return cls(**d)


# ---------------------------------------------------------------------------
# per-layer scorers on numpy feature matrices

def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(sq, 0))


def median_bandwidth(bank: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    pts = bank if len(bank) <= max_points else bank[rng.choice(len(bank), max_points, replace=False)]
    d = pairwise_distances(pts, pts)
    iu = np.triu_indices(len(pts), 1)
    h = float(np.median(d[iu]))
    return h if h > 0 else 1.0


def kd_score(x: np.ndarray, bank: np.ndarray, bandwidth: float) -> np.ndarray:
    """-log of the mean Gaussian kernel density of the bank at x."""
    d2 = pairwise_distances(x, bank) ** 2
    return -(logsumexp(-d2 / (2 * bandwidth ** 2), axis=1) - np.log(len(bank)))


def lid_mle(x: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """LID = -(1/k sum_i log(r_i / r_k))^-1 over the k nearest non-identical references."""
    d = np.sqrt(((x[:, None, :] - reference[None, :, :]) ** 2).sum(-1))
    out = np.empty(len(x))
    for i, row in enumerate(d):
        r = np.sort(row[row > 0])[:k]
        if len(r) < k:
            raise BaselineError(f"need at least {k} distinct reference points")
        with np.errstate(divide="ignore"):
            m = np.log(r / r[-1]).mean()
        out[i] = -1.0 / m if m < 0 else 0.0
    return out


def mahalanobis(x: np.ndarray, mean: np.ndarray, precision: np.ndarray) -> np.ndarray:
    d = x - mean
    return np.sqrt(np.maximum(((d @ precision) * d).sum(1), 0))


class LayerDNN(nn.Module):
    def __init__(self, dim, hidden=64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, f):
        return self.net(f).squeeze(1)


# ---------------------------------------------------------------------------

@dataclass
class BaselineModel:
    kind: str
    state: dict
    config: BaselineConfig
    classifier_checksum: str = ""

    @property
    def cushion(self):
        return self.config.cushion

    @property
    def num_layers(self) -> int:
        return len(self.state["layers"])

    def layer_scores(self, pooled_feats: list[np.ndarray], predicted: np.ndarray) -> np.ndarray:
        """[num_layers, N] raw per-layer anomaly scores."""
        if len(pooled_feats) < self.num_layers:
            raise BaselineError("record has fewer layers than the fitted baseline")
        rows = []
        for l, st in enumerate(self.state["layers"]):
            if st is None:
                raise BaselineError(f"layer {l} is not fitted")
            f = pooled_feats[l]
            if self.kind == "KD":
                s = np.empty(len(f))
                for c in np.unique(predicted):
                    m = predicted == c
                    s[m] = kd_score(f[m], st["banks"][int(c)], st["bandwidth"])
            elif self.kind == "LID":
                s = lid_mle(f, st["reference"], self.config.lid_k)
            elif self.kind == "MAHA":
                s = mahalanobis(f, st["means"][predicted], st["precision"])
            else:
                with torch.no_grad():
                    s = -st["net"](torch.from_numpy(f).float()).double().numpy()
            rows.append(s)
        return np.stack(rows)

    def combine(self, per_layer: np.ndarray) -> np.ndarray:
        if self.kind == "DNN":
            return per_layer.sum(0)  # -(sum of per-layer clean logits)
        if self.config.layer_normalize:
            mu, sd = self.state["norm"]
            per_layer = (per_layer - mu[:, None]) / sd[:, None]
        return per_layer.mean(0)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        state = dict(self.state)
        if self.kind == "DNN":
            state["layers"] = [{"dim": s["dim"], "net": s["net"].state_dict()} for s in state["layers"]]
        torch.save({"format": "aegis-baseline/1", "kind": self.kind, "state": state,
                    "config": self.config.to_dict(), "classifier_checksum": self.classifier_checksum}, path)

    @classmethod
    def load(cls, path, model=None):
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != "aegis-baseline/1":
            raise BaselineError(f"{path} is not a baseline checkpoint")
        if model is not None and blob["classifier_checksum"] != parameter_checksum(model):
            raise BaselineError("baseline was fitted on a different classifier")
        cfg = BaselineConfig.from_dict(blob["config"])
        state = blob["state"]
        if blob["kind"] == "DNN":
            layers = []
            for s in state["layers"]:
                net = LayerDNN(s["dim"], cfg.dnn_hidden)
                net.load_state_dict(s["net"])
                net.eval()
                layers.append({"dim": s["dim"], "net": net})
            state["layers"] = layers
        return cls(blob["kind"], state, cfg, blob["classifier_checksum"])


def _pooled_np(features) -> list[np.ndarray]:
    return [np.asarray(f, dtype=np.float64) if isinstance(f, np.ndarray) else pooled(f).detach().double().numpy()
            for f in features]


def score(baseline: BaselineModel, features, predicted_class) -> np.ndarray:
    feats = features.features if isinstance(features, ForwardRecord) else features
    pred = np.asarray(predicted_class if not torch.is_tensor(predicted_class) else predicted_class.numpy())
    return baseline.combine(baseline.layer_scores(_pooled_np(feats), pred))


def score_pixels(model, baseline: BaselineModel, pixels: torch.Tensor, batch_size=500) -> np.ndarray:
    from .cushion import apply
    out = []
    with torch.no_grad():
        for px in pixels.split(batch_size):
            inp = px if baseline.cushion is None else apply(baseline.cushion, px)
            rec = model.record(inp)
            out.append(score(baseline, rec, rec.predicted))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------

def fit_baseline(kind: str, model, train_data: ImageBatch, config: BaselineConfig = BaselineConfig(),
                 features: Optional[list] = None) -> BaselineModel:
    """Fit on clean training features; ``features`` (list of [N, D] arrays) bypasses the model (stub use)."""
    if kind not in KINDS:
        raise BaselineError(f"unknown baseline {kind!r}")
    labels = train_data.labels.numpy() if isinstance(train_data, ImageBatch) else np.asarray(train_data)
    num_classes = int(labels.max()) + 1 if model is None else model.num_classes
    for c in range(num_classes):
        if (labels == c).sum() < config.min_per_class:
            raise BaselineError(f"class {c} has fewer than {config.min_per_class} samples")
    if features is None:
        features = [f.numpy() for f in collect_pooled(model, train_data, config.cushion)]
    features = [np.asarray(f, dtype=np.float64) for f in features]
    rng = np.random.default_rng(config.seed)
    layers = []
    if kind == "KD":
        for f in features:
            banks = {}
            for c in range(num_classes):
                idx = np.flatnonzero(labels == c)
                if len(idx) > config.kd_bank_per_class:
                    idx = np.sort(rng.choice(idx, config.kd_bank_per_class, replace=False))
                banks[c] = f[idx]
            layers.append({"banks": banks,
                           "bandwidth": median_bandwidth(np.concatenate(list(banks.values())), seed=config.seed)})
    elif kind == "LID":
        for f in features:
            idx = np.sort(rng.choice(len(f), min(config.lid_reference, len(f)), replace=False))
            layers.append({"reference": f[idx]})
    elif kind == "MAHA":
        tens = [torch.from_numpy(f) for f in features]
        means, covs, precs, _ = gaussian_fit(tens, torch.from_numpy(labels), num_classes, config.min_per_class,
                                             config.maha_loading)
        for mu, cov, prec in zip(means, covs, precs):
            layers.append({"means": mu.numpy(), "covariance": cov.numpy(), "precision": prec.numpy()})
    else:
        layers = _fit_dnn(model, train_data, features, config)
    checksum = parameter_checksum(model) if model is not None else ""
    out = BaselineModel(kind, {"layers": layers}, config, checksum)
    if config.layer_normalize and kind != "DNN":
        per = out.layer_scores(features, labels)
        out.state["norm"] = (per.mean(1), per.std(1) + 1e-12)
    return out


def _fit_dnn(model, train_data: ImageBatch, clean_feats, config: BaselineConfig):
    """Per-layer clean-vs-adversarial MLPs; negatives are generated once, not adversarially retrained."""
    if model is None:
        raise BaselineError("DNN baseline needs a classifier to generate negatives")
    g = torch.Generator().manual_seed(config.seed)
    idx = torch.randperm(len(train_data), generator=g)[:config.dnn_samples]
    subset = train_data[idx]
    spec = AttackSpec(**{**config.dnn_attack, "seed": config.seed})
    advs = [run_attack(model, b, spec, cushion=config.cushion) for b in subset.batches(250)]
    adv_px = torch.cat([r.adversarial.pixels[r.success] for r in advs])
    adv_feats = [f.numpy() for f in collect_pooled(model, ImageBatch(adv_px, torch.zeros(len(adv_px), dtype=torch.int64)),
                                                  config.cushion)]
    layers = []
    torch.manual_seed(config.seed)
    for l, (fc, fa) in enumerate(zip(clean_feats, adv_feats)):
        fc = fc[idx.numpy()]
        x = torch.from_numpy(np.concatenate([fc, fa])).float()
        y = torch.cat([torch.ones(len(fc)), torch.zeros(len(fa))])
        net = LayerDNN(x.shape[1], config.dnn_hidden)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        for _ in range(config.dnn_epochs):
            perm = torch.randperm(len(x), generator=g)
            for s in range(0, len(x), 128):
                b = perm[s:s + 128]
                loss = F.binary_cross_entropy_with_logits(net(x[b]), y[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        layers.append({"dim": x.shape[1], "net": net})
    return layers
