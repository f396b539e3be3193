"""Lazily trained, disk-cached artifacts shared by experiments: classifier, substitute, shields, baselines."""

from __future__ import annotations

import logging
from dataclasses import replace
from functools import cached_property
from pathlib import Path
from typing import Optional

import torch

from .adaptive import FeatureStatistics, fit_feature_statistics
from .baselines import BaselineModel, fit_baseline
from .config import ExperimentConfig, stable_hash
from .cushion import CushionOp
from .data import ImageBatch, load_split
from .model import freeze, load_classifier, parameter_checksum, save_classifier, train_classifier
from .shield import ShieldSet, calibrate_threshold, shield_scores, train_shield

log = logging.getLogger(__name__)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.key = stable_hash(cfg.pipeline_dict())
        self.root = cfg.art_dir() / self.key
        self._shields: dict = {}
        self._baselines: dict = {}

    # -- data --------------------------------------------------------------
    @cached_property
    def train(self) -> ImageBatch:
        return load_split(self.cfg.dataset, "train", self.cfg.ingestion)

    @cached_property
    def test(self) -> ImageBatch:
        return load_split(self.cfg.dataset, "test", self.cfg.ingestion)

    @property
    def calibration_split(self) -> ImageBatch:
        return self.test[: len(self.test) // 2]

    @property
    def eval_split(self) -> ImageBatch:
        return self.test[len(self.test) // 2:]

    @property
    def shield_train(self) -> ImageBatch:
        return self.train[: self.cfg.shield_train_samples]

    @property
    def aegis_cushion(self) -> CushionOp:
        return CushionOp.parse(self.cfg.cushion)

    # -- models --------------------------------------------------------------
    def _classifier(self, name, tcfg):
        path = self.root / f"{name}.pt"
        if path.exists():
            return freeze(load_classifier(path))
        log.info("training %s", name)
        model = train_classifier(self.train, tcfg, test=self.test, checkpoint=path)
        return freeze(model)

    @cached_property
    def classifier(self):
        return self._classifier("classifier", self.cfg.classifier)

    @cached_property
    def substitute(self):
        return self._classifier("substitute", self.cfg.substitute)

    @cached_property
    def checksum(self) -> str:
        return parameter_checksum(self.classifier)

    @cached_property
    def stats(self) -> FeatureStatistics:
        path = self.root / "feature_stats.pt"
        if path.exists():
            st = FeatureStatistics.from_state(torch.load(path, weights_only=False))
            if st.model_checksum == self.checksum:
                return st
        st = fit_feature_statistics(self.classifier, self.train)
        torch.save(st.to_state(), path)
        return st

    # -- detectors -----------------------------------------------------------
    def shield_config(self, taps=None, cushion: Optional[CushionOp] = None):
        return replace(self.cfg.shield, taps=list(taps) if taps is not None else self.cfg.shield.taps,
                       cushion=cushion)

    def shields(self, taps=None, cushion: Optional[CushionOp] = None) -> ShieldSet:
        scfg = self.shield_config(taps, cushion)
        key = stable_hash(scfg.to_dict())
        if key in self._shields:
            return self._shields[key]
        path = self.root / f"shield-{key}.pt"
        if path.exists():
            s = ShieldSet.load(path, self.classifier)
        else:
            log.info("training shields taps=%s cushion=%s", taps, cushion.name if cushion else None)
            s = train_shield(self.classifier, self.shield_train, scfg)
            _, clean = shield_scores(self.classifier, s, self.calibration_split.pixels)
            s.tau = calibrate_threshold(clean, self.cfg.eval.tnr)
            s.save(path)
        self._shields[key] = s
        return s

    def baseline(self, kind: str, cushion: Optional[CushionOp] = None) -> BaselineModel:
        bcfg = replace(self.cfg.baselines, cushion=cushion)
        key = stable_hash({"kind": kind, **bcfg.to_dict()})
        if key in self._baselines:
            return self._baselines[key]
        path = self.root / f"baseline-{kind}-{key}.pt"
        if path.exists():
            b = BaselineModel.load(path, self.classifier)
        else:
            log.info("fitting %s baseline", kind)
            b = fit_baseline(kind, self.classifier, self.train, bcfg)
            b.save(path)
        self._baselines[key] = b
        return b
