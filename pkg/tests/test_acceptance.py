"""Acceptance criteria 1-12 on the frozen toy pipeline.

Trained artifacts are cached under ``runs/acceptance`` (override with
AEGIS_ACCEPTANCE_DIR); the first run trains everything, later runs reuse it.
Each criterion records one PASS/FAIL line, printed in the terminal summary.
"""

from __future__ import annotations

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from aegis.adaptive import (AdaptiveSpec, FeatureStatistics, adaptive_base, gaussian_fit, hfc_penalty,
                            run_feature_attack, run_hfc_attack, run_whitebox_attack)
from aegis.attacks import METHODS, AttackSpec, cw_margin_loss, l2_radius, run_attack
from aegis.baselines import BaselineConfig, fit_baseline, lid_mle, score
from aegis.config import ExperimentConfig
from aegis.cushion import DEFAULTS, CushionOp, apply as cushion_apply
from aegis.data import ImageBatch
from aegis.harness import run_experiment
from aegis.metrics import ScoreSet, auroc, tpr_at_tnr
from aegis.model import TappedCNN, accuracy, freeze
from aegis.pipeline import Pipeline
from aegis.shield import ShieldDetector, ShieldSet
from aegis.stresstest import StressConfig, run_stress_suite, stress_attack

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


ROOT = Path(os.environ.get("AEGIS_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))


@pytest.fixture(scope="module")
def pipe():
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    cfg = ExperimentConfig(name="acceptance", artifact_dir=str(ROOT / "artifacts"), output_dir=str(ROOT))
    return Pipeline(cfg)


def grid(pipe, name, detectors, attacks):
    base = pipe.cfg
    cfg = ExperimentConfig.from_dict({**base.to_dict(), "name": name, "detectors": detectors, "attacks": attacks,
                                      "output_dir": str(ROOT / name)})
    return run_experiment(cfg, pipe)


# ---------------------------------------------------------------------------
# 1. metric oracles

def brute_auroc(clean, adv):
    wins = 0.0
    for a in adv:
        for c in clean:
            wins += 1.0 if a > c else 0.5 if a == c else 0.0
    return wins / (len(clean) * len(adv))


def enumerated_tpr(clean, adv, tnr):
    # candidates: every clean value and just above the largest; keep the smallest meeting the quantile rule
    cands = sorted(set(clean)) + [np.nextafter(max(clean), np.inf)]
    tau = next(t for t in cands if sum(c < t for c in clean) / len(clean) >= tnr)
    return sum(a >= tau for a in adv) / len(adv)


def test_criterion_01_metric_oracles():
    rng = np.random.default_rng(0)
    bad = 0
    for i in range(1000):
        n, m = rng.integers(1, 40, 2)
        if i % 2:  # heavy ties
            clean, adv = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, m).astype(float)
        else:
            clean, adv = rng.normal(size=n), rng.normal(0.5, 1, size=m)
        bad += auroc(ScoreSet(clean, adv)) != brute_auroc(clean, adv)
    bad_tpr = 0
    for i in range(100):
        n, m = rng.integers(1, 60, 2)
        clean = rng.integers(0, 8, n).astype(float) if i % 2 else rng.normal(size=n)
        adv = rng.integers(0, 10, m).astype(float) if i % 2 else rng.normal(1, 1, size=m)
        tnr = float(rng.choice([0.5, 0.8, 0.9, 0.95, 0.99]))
        bad_tpr += tpr_at_tnr(ScoreSet(clean, adv), tnr) != enumerated_tpr(list(clean), list(adv), tnr)
    ok = bad == 0 and bad_tpr == 0
    record(1, ok, f"auroc mismatches {bad}/1000, tpr mismatches {bad_tpr}/100")
    assert ok


# ---------------------------------------------------------------------------
# 2. epsilon-ball fuzz

def _fuzz_fixtures():
    torch.manual_seed(0)
    model = freeze(TappedCNN(widths=(4, 4, 8, 8), image_size=16))
    sub = freeze(TappedCNN(widths=(4, 4, 8, 8), image_size=16))
    g = torch.Generator().manual_seed(1)
    pool = ImageBatch(torch.rand(150, 1, 16, 16, generator=g), torch.arange(150) % 3, 3)
    with torch.no_grad():
        feats = [f.mean(dim=(2, 3)) if f.dim() == 4 else f for f in model.record(pool.pixels).features]
    means, covs, precs, counts = gaussian_fit([f.double() for f in feats], pool.labels, 3)
    stats = FeatureStatistics(list(model.tap_layers), means, covs, precs, counts)
    chans = [f.shape[1] for f in feats]
    shields = ShieldSet({c: freeze(ShieldDetector(c, range(5), chans, 16)) for c in range(3)})
    return model, sub, pool, stats, shields


def _linf(a, b):
    return (a - b).flatten(1).abs().max(1).values


def test_criterion_02_epsilon_ball_fuzz():
    model, sub, pool, stats, shields = _fuzz_fixtures()
    rng = np.random.default_rng(2)
    cushions = [None, CushionOp("IDENTITY"), CushionOp("JPEG", quality=70), CushionOp("BIT", bits=4),
                CushionOp("TVM", tv_iters=5)]
    worst, n_specs, violations = 0.0, 0, 0
    for i in range(510):
        idx = torch.from_numpy(rng.choice(150, 4, replace=False))
        x = pool[idx]
        eps = float(rng.choice([0.0, 1 / 256, 4 / 256, 16 / 256, 0.2]))
        steps = int(rng.integers(1, 5))
        seed = int(rng.integers(0, 10_000))
        cushion = cushions[rng.integers(len(cushions))]
        kind = i % 3
        if kind == 0:
            method = METHODS[rng.integers(len(METHODS))]
            spec = AttackSpec(method, epsilon=eps, steps=steps, seed=seed,
                              target=str(rng.choice(["random", "untargeted"])),
                              l2_convention=str(rng.choice(["rms", "absolute"])))
            adv = run_attack(model, x, spec, substitute=sub, cushion=cushion).adversarial.pixels
            if spec.norm == "L2":
                dist = (adv - x.pixels).flatten(1).norm(dim=1)
                bound = l2_radius(eps, x.pixels[0].numel(), spec.l2_convention)
            else:
                dist, bound = _linf(adv, x.pixels), eps
        elif kind == 1:
            method = ["FEA", "HFC", "WB", "WB_D"][rng.integers(4)]
            base = adaptive_base(epsilon=eps, steps=max(steps, 2), seed=seed)
            spec = AdaptiveSpec(method, base, cushion=cushion, decay_after=1)
            if method == "FEA":
                res = run_feature_attack(model, x, spec, pool)
            elif method == "HFC":
                res = run_hfc_attack(model, x, stats, spec)
            else:
                res = run_whitebox_attack(model, x, shields, spec)
            adv = res.adversarial.pixels
            dist, bound = _linf(adv, x.pixels), eps
        else:
            adv = stress_attack(model, x, int(rng.integers(5)), str(rng.choice(["up", "down"])), eps, cushion,
                                StressConfig(epsilon=eps, steps=steps, step_size=float(rng.choice([0.5, 2])) / 256))
            dist, bound = _linf(adv, x.pixels), eps
        n_specs += 1
        in_range = bool(adv.min() >= 0 and adv.max() <= 1)
        excess = float((dist - bound).max())
        worst = max(worst, excess)
        violations += (excess > 1e-6) or not in_range
    ok = n_specs >= 500 and violations == 0
    record(2, ok, f"{n_specs} random specs, violations {violations}, worst excess {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. gradient checks

def _rel_err(ad, fd, floor):
    return abs(ad - fd) / max(abs(ad), abs(fd), floor)


def _directional_fd(f64, x64, d64, h=1e-6):
    return (f64(x64 + h * d64) - f64(x64 - h * d64)) / (2 * h)


def test_criterion_03_gradient_checks(pipe):
    model = pipe.classifier
    m64 = TappedCNN(**{**model.arch, "widths": tuple(model.arch["widths"])}).double()
    m64.load_state_dict({k: v.double() if v.is_floating_point() else v for k, v in model.state_dict().items()})
    freeze(m64)
    stats = pipe.stats
    dets32 = pipe.shields().detectors
    dets64 = {}
    for c, d in dets32.items():
        d64 = ShieldDetector(c, d.taps, d.tap_channels, d.hidden).double()
        d64.load_state_dict({k: v.double() for k, v in d.state_dict().items()})
        dets64[c] = freeze(d64)
    w = [1.0] * len(stats.means)

    def losses(m, dets, x, y, t):
        rec = m.record(x)
        return {
            "classifier CE": F.cross_entropy(rec.logits, y, reduction="sum"),
            "J_cw": cw_margin_loss(rec.logits, t).sum(),
            "J_shield": dets[int(t)](rec.features).sum(),
            "HFC Mahalanobis": hfc_penalty(rec.features, stats, t, w).sum(),
        }

    rng = np.random.default_rng(3)
    worst = {k: 0.0 for k in ("classifier CE", "J_cw", "J_shield", "HFC Mahalanobis")}
    fails = {k: 0 for k in worst}
    data = pipe.test
    n_probes = 100
    for p in range(n_probes):
        i = int(rng.integers(len(data)))
        x = data.pixels[i:i + 1].clone()
        x = (x + torch.from_numpy(rng.uniform(-8 / 256, 8 / 256, x.shape)).float()).clamp(0, 1)
        y = data.labels[i:i + 1]
        t = (y + int(rng.integers(1, 3))) % 3
        d = torch.from_numpy(rng.normal(size=x.shape))
        d /= d.norm()
        x32 = x.clone().requires_grad_(True)
        l32 = losses(model, dets32, x32, y, t)
        for name, val in l32.items():
            (g,) = torch.autograd.grad(val, x32, retain_graph=True)
            ad = float((g.double() * d).sum())
            fd = _directional_fd(lambda z: float(losses(m64, dets64, z, y, t)[name]), x.double(), d)
            # floor: derivatives far below the gradient scale are compared absolutely
            err = _rel_err(ad, fd, floor=1e-3 * float(g.norm()) + 1e-8)
            worst[name] = max(worst[name], err)
            fails[name] += err >= 1e-2
    ok = all(v == 0 for v in fails.values())
    record(3, ok, f"{n_probes} probes each; worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. BPDA collapse

def test_criterion_04_bpda_identity_collapse():
    model, sub, pool, stats, shields = _fuzz_fixtures()
    x = pool[:6]
    ident = CushionOp("IDENTITY")
    checks = []
    for method in METHODS:
        spec = AttackSpec(method, steps=5, seed=4)
        a = run_attack(model, x, spec, substitute=sub).adversarial.pixels
        b = run_attack(model, x, spec, substitute=sub, cushion=ident).adversarial.pixels
        checks.append((method, torch.equal(a, b)))
    for method in ("FEA", "HFC", "WB", "WB_D"):
        base = adaptive_base(steps=6, seed=4)
        outs = []
        for c in (None, ident):
            spec = AdaptiveSpec(method, base, cushion=c, decay_after=3)
            if method == "FEA":
                outs.append(run_feature_attack(model, x, spec, pool).adversarial.pixels)
            elif method == "HFC":
                outs.append(run_hfc_attack(model, x, stats, spec).adversarial.pixels)
            else:
                outs.append(run_whitebox_attack(model, x, shields, spec).adversarial.pixels)
        checks.append((method, torch.equal(*outs)))
    s = [stress_attack(model, x, 2, "up", 4 / 256, c, StressConfig(steps=5)) for c in (None, ident)]
    checks.append(("stress", torch.equal(*s)))
    bad = [m for m, eq in checks if not eq]
    ok = not bad
    record(4, ok, f"{len(checks)} attack kinds bitwise equal" if ok else f"differs: {bad}")
    assert ok


# ---------------------------------------------------------------------------
# 5. stress-test trends

def _inversions(values):
    return sum(b < a for a, b in zip(values, values[1:]))


def test_criterion_05_stress_trends(pipe):
    t0 = time.perf_counter()
    cushions = [CushionOp.parse(c) for c in ("JPEG-90", "JPEG-70")]
    rep = run_stress_suite(pipe.classifier, pipe.eval_split, 4 / 256, cushions,
                           StressConfig(epsilon=4 / 256, max_samples=500))
    rep.write_csv(ROOT / "stress.csv")
    (ROOT / "stress.md").write_text(rep.render() + "\n")
    seconds = time.perf_counter() - t0
    stages = [l for l in rep.layers if l.startswith("stage")]
    up = [abs(rep.get(l, "up").rel_change) for l in stages]
    a = _inversions(up) <= 1
    b_miss = [f"{l}/{d}" for l in rep.layers for d in ("up", "down")
              if not abs(rep.get(l, d, "JPEG-70").rel_change) < abs(rep.get(l, d).rel_change)]
    b = not b_miss
    inv_c = sum(abs(rep.get(l, d, "JPEG-70").rel_change) > abs(rep.get(l, d, "JPEG-90").rel_change)
                for l in rep.layers for d in ("up",))
    c = inv_c <= 1
    ok = a and b and c and seconds < 600
    record(5, ok, f"(a) up |rel| by depth {[round(100 * v, 1) for v in up]} inversions {_inversions(up)}; "
                  f"(b) JPEG-70 < none everywhere {b} {b_miss or ''}; (c) JPEG-70 > JPEG-90 at {inv_c} taps; {seconds:.0f}s")
    print(rep.render())
    assert ok


# ---------------------------------------------------------------------------
# 6-9. detection grids

CONVENTIONAL = ["FGSM", "BIM", "PGD", "MIM", "CW_LINF", "PGD_L2", "TRANSFER"]


def test_criterion_06_baseline_bypass(pipe):
    rep = grid(pipe, "table2", ["KD", "LID", "MAHA", "DNN", "Shield"], ["PGD", "HFC"])
    lines, ok = [], True
    shield_hfc = rep.auroc("Shield", "HFC")
    for kind in ("KD", "LID", "MAHA", "DNN"):
        pgd, hfc = rep.auroc(kind, "PGD"), rep.auroc(kind, "HFC")
        good = pgd >= 0.80 and pgd - hfc >= 0.20 and shield_hfc > hfc
        ok &= good
        lines.append(f"{kind} {pgd:.3f}->{hfc:.3f}")
    record(6, ok, "; ".join(lines) + f"; Shield HFC {shield_hfc:.3f}")
    assert ok


def test_criterion_07_shield_conventional(pipe):
    rep = grid(pipe, "table3", ["Shield"], CONVENTIONAL)
    vals = {a: rep.auroc("Shield", a) for a in CONVENTIONAL}
    low = [a for a, v in vals.items() if v < 0.95]
    ok = not low
    detail = ", ".join(f"{a} {v:.3f}" for a, v in vals.items())
    record(7, ok, detail + (f"; FLAGGED below 0.95: {low}" if low else ""))
    assert ok


def test_criterion_08_aegis_adaptive(pipe):
    rep = grid(pipe, "table4", ["Shield", "Aegis"], ["FEA", "HFC", "WB", "WB_D"])
    aegis = {a: rep.auroc("Aegis", a) for a in ("FEA", "HFC", "WB", "WB_D")}
    shield = {a: rep.auroc("Shield", a) for a in ("WB", "WB_D")}
    ok = all(v >= 0.95 for v in aegis.values()) and all(aegis[a] >= shield[a] for a in shield)
    record(8, ok, "Aegis " + ", ".join(f"{a} {v:.3f}" for a, v in aegis.items())
           + "; Shield " + ", ".join(f"{a} {v:.3f}" for a, v in shield.items()))
    assert ok


def test_criterion_09_layer_ablation(pipe):
    rep = grid(pipe, "table5", ["Shield", "Shield:taps=4", "Shield:taps=0"], ["WB"])
    multi, deep, shallow = (rep.auroc(d, "WB") for d in ("Shield", "Shield:taps=4", "Shield:taps=0"))
    ok = multi - deep >= 0.15 and shallow >= 0.85 * multi
    record(9, ok, f"WB AUROC multi {multi:.3f}, deepest-only {deep:.3f} (loss {multi - deep:.3f}), "
                  f"shallowest-only {shallow:.3f} ({shallow / multi:.2f} of multi)")
    assert ok


# ---------------------------------------------------------------------------
# 10. cushion cost

def test_criterion_10_cushion_cost(pipe):
    model, test = pipe.classifier, pipe.test
    base = accuracy(model, test)
    drops = {c.name: base - accuracy(model, test, lambda p, c=c: cushion_apply(c, p)) for c in DEFAULTS}
    ok = all(d <= 0.03 for d in drops.values())
    record(10, ok, f"clean acc {100 * base:.2f}%; drops " + ", ".join(f"{k} {100 * v:.2f}pp" for k, v in drops.items()))
    assert ok


# ---------------------------------------------------------------------------
# 11. detector training sanity

def test_criterion_11_training_sanity(pipe):
    shields = pipe.shields()
    parts, ok = [], True
    for c, h in sorted(shields.history.items()):
        finite = all(math.isfinite(v) for k in ("clean_term", "adv_term", "loss") for v in h[k])
        improved = h["probe_adv_term"][-1] > h["probe_adv_term"][0]
        ok &= finite and improved and len(h["eps"]) == 25
        parts.append(f"class {c}: probe {h['probe_adv_term'][0]:.2f}->{h['probe_adv_term'][-1]:.2f}"
                     f"{'' if finite else ' NON-FINITE'}")
    record(11, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 12. synthetic statistics

def test_criterion_12_synthetic_statistics():
    rng = np.random.default_rng(12)
    labels = np.repeat([0, 1, 2], 300)
    A = rng.normal(size=(6, 6))
    f = rng.normal(size=(900, 6)) @ A + labels[:, None] * 2.0
    b = fit_baseline("MAHA", None, labels, BaselineConfig(maha_loading=0.0), features=[f])
    mu = np.stack([f[labels == c].mean(0) for c in range(3)])
    cov = np.cov((f - mu[labels]).T, bias=True)
    q = rng.normal(size=(200, 6)) @ A
    pred = rng.integers(0, 3, 200)
    diff = q - mu[pred]
    closed = np.sqrt(np.einsum("ij,jk,ik->i", diff, np.linalg.inv(cov), diff))
    maha_err = float(np.abs(score(b, [q], pred) - closed).max())

    def ball(n, d):
        v = rng.normal(size=(n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * rng.random((n, 1)) ** (1 / d)

    est = lid_mle(ball(500, 5) * 0.5, ball(5000, 5), 20)
    med = float(np.median(est))
    ok = maha_err <= 1e-6 and abs(med - 5) <= 1.5
    record(12, ok, f"MAHA max abs err {maha_err:.1e}; LID median {med:.2f} on d=5 ball")
    assert ok
