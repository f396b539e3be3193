"""Grid evaluation: (detector x attack) cells with cached results and JSON/CSV/Markdown reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .adaptive import ADAPTIVE_METHODS, AdaptiveSpec, adaptive_base, run_adaptive
from .attacks import METHODS, AttackSpec, random_targets, run_attack
from .baselines import KINDS as BASELINE_KINDS, score_pixels
from .config import ExperimentConfig, dump_config, stable_hash
from .cushion import CushionOp, apply as cushion_apply, codec_info
from .data import ImageBatch
from .metrics import ScoreSet, auroc, threshold_at_tnr, tpr_at_tnr
from .model import accuracy
from .pipeline import Pipeline
from .shield import ShieldSet, shield_scores

log = logging.getLogger(__name__)

REPORT_SCHEMA = "aegis-eval-report/1"


# ---------------------------------------------------------------------------
# roster parsing

def parse_entry(entry) -> tuple[str, dict]:
    """'Name' | 'Name:k=v,k=v' | {'name': ..., **options} -> (name, options)."""
    if isinstance(entry, dict):
        opts = dict(entry)
        name = opts.pop("name", None) or opts.pop("method", None)
        return str(name), opts
    name, _, rest = str(entry).partition(":")
    opts = {}
    for kv in filter(None, rest.split(",")):
        k, _, v = kv.partition("=")
        opts[k.strip()] = v.strip()
    return name.strip(), opts


def _taps(value):
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).replace("+", " ").split()]


@dataclass
class Detector:
    label: str
    kind: str  # baseline kind, "Shield" or "Aegis"
    cushion: Optional[CushionOp]
    baseline: object = None
    shields: Optional[ShieldSet] = None

    def scores(self, model, pixels: torch.Tensor) -> np.ndarray:
        """Anomaly-oriented scores; shield logits are negated."""
        if self.shields is not None:
            _, logit = shield_scores(model, self.shields, pixels)
            return -logit.double().numpy()
        return score_pixels(model, self.baseline, pixels)


def build_detector(pipe: Pipeline, entry) -> Detector:
    name, opts = parse_entry(entry)
    label = entry if isinstance(entry, str) else name
    cushion = CushionOp.parse(opts["cushion"]) if opts.get("cushion") else None
    if name in BASELINE_KINDS:
        return Detector(label, name, cushion, baseline=pipe.baseline(name, cushion))
    if name == "Shield":
        s = pipe.shields(_taps(opts.get("taps")), cushion)
        return Detector(label, name, cushion, shields=s)
    if name == "Aegis":
        cushion = cushion or pipe.aegis_cushion
        s = pipe.shields(_taps(opts.get("taps")), cushion)
        return Detector(label, name, cushion, shields=s)
    raise ValueError(f"unknown detector {name!r}")


def build_attack(entry, ev, cushion: Optional[CushionOp]):
    name, opts = parse_entry(entry)
    opts = {k: _coerce(v) for k, v in opts.items()}
    seed = opts.pop("seed", ev.seed)
    if name in ADAPTIVE_METHODS:
        base_kw = {k: opts.pop(k) for k in list(opts) if k in AttackSpec.__dataclass_fields__}
        base_kw.setdefault("epsilon", ev.linf_eps)
        base_kw.setdefault("steps", ev.adaptive_steps)
        base = adaptive_base(seed=seed, **base_kw)
        return AdaptiveSpec(method=name, base=base, cushion=cushion, **opts)
    if name not in METHODS:
        raise ValueError(f"unknown attack {name!r}")
    kw = dict(method=name, seed=seed, steps=ev.conventional_steps, l2_convention=ev.l2_convention,
              epsilon=ev.l2_eps if name in ("PGD_L2", "CW_L2") else ev.linf_eps)
    kw.update(opts)
    return AttackSpec(**kw)


def _coerce(v):
    if not isinstance(v, str):
        return v
    for t in (int, float):
        try:
            return t(v)
        except ValueError:
            pass
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    if "/" in v:
        a, b = v.split("/")
        return float(a) / float(b)
    return v


# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    config_hash: str
    cells: dict = field(default_factory=dict)  # "detector|attack" -> cell dict
    detectors: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    clean: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def cell(self, detector: str, attack: str) -> dict:
        return self.cells[f"{detector}|{attack}"]

    def auroc(self, detector: str, attack: str) -> float:
        c = self.cell(detector, attack)
        if c["status"] != "ok":
            raise RuntimeError(f"cell {detector}|{attack} failed: {c.get('reason')}")
        return c["auroc"]

    @property
    def failed(self) -> list:
        return [k for k, c in self.cells.items() if c["status"] != "ok"]

    def to_dict(self):
        return {"schema": REPORT_SCHEMA, "config_hash": self.config_hash, "detectors": self.detectors,
                "attacks": self.attacks, "cells": self.cells, "clean": self.clean, "accuracy": self.accuracy,
                "runtime": self.runtime, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError("unsupported report schema")
        return cls(d["config_hash"], d["cells"], d["detectors"], d["attacks"], d["clean"], d["accuracy"],
                   d["runtime"], d["metadata"])

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["detector"] + [f"{a} {m}" for a in self.attacks for m in ("AUROC", "TPR")])
        for d in self.detectors:
            row = [d]
            for a in self.attacks:
                c = self.cell(d, a)
                if c["status"] == "ok":
                    row += [f"{100 * c['auroc']:.1f}", f"{100 * c['tpr']:.1f}"]
                else:
                    row += ["failed", "failed"]
            w.writerow(row)
        return buf.getvalue()

    def markdown(self) -> str:
        lines = ["| detector | " + " | ".join(f"{a} AUROC / TPR" for a in self.attacks) + " |",
                 "|---" * (len(self.attacks) + 1) + "|"]
        for d in self.detectors:
            vals = []
            for a in self.attacks:
                c = self.cell(d, a)
                vals.append(f"{100 * c['auroc']:.1f} / {100 * c['tpr']:.1f}" if c["status"] == "ok"
                            else f"failed ({c.get('reason', '')[:40]})")
            lines.append(f"| {d} | " + " | ".join(vals) + " |")
        if self.clean:
            lines.append("")
            rates = sorted(self.clean.items())
            lines.append("clean accept rate: " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in rates))
        if self.accuracy:
            accs = sorted(self.accuracy.items())
            lines.append("classifier accuracy: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in accs))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (out / "report.csv").write_text(self.csv_text())
        (out / "report.md").write_text(self.markdown())


class Evaluator:
    """Runs cells against one pipeline; adversarial batches are shared between cells with equal context."""

    def __init__(self, cfg: ExperimentConfig, pipe: Optional[Pipeline] = None):
        self.cfg = cfg
        self.pipe = pipe or Pipeline(cfg)
        self._eval_sets: dict = {}
        self._adv: dict = {}

    @property
    def model(self):
        return self.pipe.classifier

    def eval_set(self, cushion: Optional[CushionOp]) -> tuple[ImageBatch, torch.Tensor]:
        """First n_eval eval-split samples the classifier gets right (behind the cushion), with targets."""
        key = cushion.name if cushion else "none"
        if key not in self._eval_sets:
            data = self.pipe.eval_split
            px = data.pixels if cushion is None else cushion_apply(cushion, data.pixels)
            with torch.no_grad():
                pred = torch.cat([self.model(b) .argmax(1) for b in px.split(500)])
            keep = (pred == data.labels).nonzero().squeeze(1)[: self.cfg.eval.n_eval]
            x = data[keep]
            targets = random_targets(x.labels, self.model.num_classes, self.cfg.eval.seed)
            self._eval_sets[key] = (x, targets)
        return self._eval_sets[key]

    def adversarial(self, attack_entry, det: Detector):
        spec = build_attack(attack_entry, self.cfg.eval, det.cushion)
        x, targets = self.eval_set(det.cushion)
        needs_shield = isinstance(spec, AdaptiveSpec) and spec.method in ("WB", "WB_D")
        if needs_shield and det.shields is None:
            raise ValueError(f"{spec.method} attacks a shield detector; {det.label} has none")
        key = (stable_hash(spec.to_dict()), det.cushion.name if det.cushion else "none",
               id(det.shields) if needs_shield else None)
        if key not in self._adv:
            t0 = time.perf_counter()
            if isinstance(spec, AdaptiveSpec):
                res = run_adaptive(self.model, x, spec, stats=self.pipe.stats, shield=det.shields,
                                   guide_pool=self.pipe.train, targets=targets)
            else:
                res = run_attack(self.model, x, spec, targets=targets, substitute=self.pipe.substitute,
                                 cushion=det.cushion)
            self._adv[key] = (res, time.perf_counter() - t0)
        return spec, x, self._adv[key]

    def cell(self, det: Detector, attack_entry) -> dict:
        spec, x, (res, attack_seconds) = self.adversarial(attack_entry, det)
        t0 = time.perf_counter()
        adv_px = res.adversarial.pixels[res.success]
        if len(adv_px) == 0:
            return {"status": "failed", "reason": "no successful adversarial examples",
                    "success_rate": 0.0, "n_clean": len(x), "n_adv": 0}
        clean = det.scores(self.model, x.pixels)
        adv = det.scores(self.model, adv_px)
        ss = ScoreSet(clean, adv)
        if self.cfg.eval.calibration == "test":
            tau = threshold_at_tnr(clean, self.cfg.eval.tnr)
        else:
            tau = threshold_at_tnr(det.scores(self.model, self.pipe.calibration_split.pixels), self.cfg.eval.tnr)
        return {"status": "ok", "auroc": auroc(ss), "tpr": float(np.mean(adv >= tau)),
                "tpr_test_calibrated": tpr_at_tnr(ss, self.cfg.eval.tnr),
                "success_rate": res.success_rate, "n_clean": len(clean), "n_adv": len(adv),
                "attack_seconds": attack_seconds, "score_seconds": time.perf_counter() - t0,
                "spec": spec.to_dict()}


def _cell_key(cfg: ExperimentConfig, pipe_key: str, det_entry, attack_entry) -> str:
    return stable_hash({"pipeline": pipe_key, "eval": cfg.to_dict()["eval"], "detector": det_entry,
                        "attack": attack_entry})


def run_experiment(cfg: ExperimentConfig, pipe: Optional[Pipeline] = None, write: bool = True) -> EvalReport:
    """Fill every requested (detector, attack) cell, reusing cached cells; failures are recorded, not raised."""
    ev = Evaluator(cfg, pipe)
    out = cfg.out_dir()
    cache = out / "cells"
    cache.mkdir(parents=True, exist_ok=True)
    if write:
        dump_config(cfg, out / "resolved_config.yaml")
    det_labels = [d if isinstance(d, str) else parse_entry(d)[0] for d in cfg.detectors]
    atk_labels = [a if isinstance(a, str) else parse_entry(a)[0] for a in cfg.attacks]
    report = EvalReport(cfg.digest(), detectors=det_labels, attacks=atk_labels)
    detectors = {}
    for d_entry, d_label in zip(cfg.detectors, det_labels):
        for a_entry, a_label in zip(cfg.attacks, atk_labels):
            path = cache / f"{_cell_key(cfg, ev.pipe.key, d_entry, a_entry)}.json"
            if path.exists():
                cell = json.loads(path.read_text())
            else:
                try:
                    if d_label not in detectors:
                        detectors[d_label] = build_detector(ev.pipe, d_entry)
                    cell = ev.cell(detectors[d_label], a_entry)
                except Exception as e:  # record and continue
                    log.warning("cell %s|%s failed: %s", d_label, a_label, e)
                    cell = {"status": "failed", "reason": f"{type(e).__name__}: {e}",
                            "traceback": traceback.format_exc(limit=3)}
                path.write_text(json.dumps(cell, indent=2, sort_keys=True))
            report.cells[f"{d_label}|{a_label}"] = cell
    report.clean, report.accuracy = _clean_summary(ev, cfg, det_labels, detectors)
    report.runtime = {"attack_seconds": sum(c.get("attack_seconds", 0.0) for c in report.cells.values()),
                      "score_seconds": sum(c.get("score_seconds", 0.0) for c in report.cells.values())}
    report.metadata = {"pipeline": ev.pipe.key, "jpeg_codec": codec_info(), "name": cfg.name}
    if write:
        report.write(out)
    return report


def _clean_summary(ev: Evaluator, cfg: ExperimentConfig, det_labels, detectors):
    """Accept rates of shield-type detectors at their calibrated tau and classifier accuracy per cushion."""
    cache = cfg.out_dir() / "cells" / f"clean-{_cell_key(cfg, ev.pipe.key, det_labels, 'clean')}.json"
    if cache.exists():
        d = json.loads(cache.read_text())
        return d["clean"], d["accuracy"]
    model = ev.model
    clean = {}
    for entry, label in zip(cfg.detectors, det_labels):
        if label.split(":")[0] not in ("Shield", "Aegis"):
            continue
        try:
            det = detectors.get(label) or build_detector(ev.pipe, entry)
            x, _ = ev.eval_set(det.cushion)
            _, logit = shield_scores(model, det.shields, x.pixels)
            clean[label] = float((logit >= det.shields.tau).float().mean())
        except Exception as e:
            log.warning("clean accept rate for %s failed: %s", label, e)
    test = ev.pipe.eval_split
    acc = {"none": accuracy(model, test)}
    for name in dict.fromkeys([cfg.cushion, "JPEG-80", "BIT-3", "TVM"]):
        op = CushionOp.parse(name)
        acc[op.name] = accuracy(model, test, lambda p, op=op: cushion_apply(op, p))
    cache.write_text(json.dumps({"clean": clean, "accuracy": acc}, sort_keys=True))
    return clean, acc


def load_report(out_dir) -> EvalReport:
    return EvalReport.from_dict(json.loads((Path(out_dir) / "report.json").read_text()))
