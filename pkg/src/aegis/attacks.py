"""Projected-gradient attack engine and the conventional attack roster.

Every attack minimizes a per-sample loss; targeted cross-entropy and the
targeted CW margin both go down as the target class takes over.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .data import ImageBatch

METHODS = ("FGSM", "BIM", "MIM", "PGD", "DIM", "TIM", "CW_LINF", "PGD_L2", "CW_L2", "TRANSFER")
CW_METHODS = ("CW_LINF", "CW_L2")
L2_METHODS = ("PGD_L2", "CW_L2")
RANDOM_INIT_METHODS = ("PGD", "CW_LINF", "PGD_L2", "CW_L2", "TRANSFER")


class AttackError(ValueError):
    pass


@dataclass
class AttackSpec:
    method: str = "PGD"
    norm: str = "Linf"
    epsilon: float = 16 / 256
    step_size: Optional[float] = None  # default 2*eps/T
    steps: int = 100
    target: object = "random"  # int, "random" or "untargeted"
    random_init: Optional[bool] = None  # default: on for PGD-family methods
    kappa: float = 0.0
    momentum: float = 1.0
    dim_prob: float = 0.5
    dim_min_scale: float = 0.85
    tim_kernel_size: int = 7
    tim_sigma: float = 3.0
    l2_convention: str = "rms"  # "rms": radius eps*sqrt(D); "absolute": radius eps
    transfer_base: str = "PGD"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackError(f"unknown method {self.method!r}")
        if self.method in L2_METHODS:
            self.norm = "L2"
        if self.random_init is None:
            self.random_init = self.method in RANDOM_INIT_METHODS
        if self.method == "FGSM":
            self.steps, self.random_init = 1, False
            if self.step_size is None and self.epsilon > 0:
                self.step_size = self.epsilon
        if self.epsilon < 0 or self.steps < 1 or self.kappa < 0:
            raise AttackError("need epsilon >= 0, steps >= 1, kappa >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError("step size must be positive")
        if self.norm not in ("Linf", "L2"):
            raise AttackError(f"unknown norm {self.norm!r}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2 * self.epsilon / self.steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AttackResult:
    adversarial: ImageBatch
    success: torch.Tensor  # bool [N]
    loss_trace: list = field(default_factory=list)
    spec: object = None
    targets: Optional[torch.Tensor] = None

    @property
    def success_rate(self) -> float:
        return self.success.float().mean().item() if len(self.success) else 0.0

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"adversarial": self.adversarial.pixels, "labels": self.adversarial.labels,
                    "targets": self.targets}, path.with_suffix(".pt"))
        sidecar = {"success": self.success.tolist(), "loss_trace": self.loss_trace,
                   "spec": self.spec.to_dict() if self.spec is not None else None}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "AttackResult":
        path = Path(path)
        blob = torch.load(path.with_suffix(".pt"), weights_only=False)
        side = json.loads(path.with_suffix(".json").read_text())
        spec = AttackSpec.from_dict(side["spec"]) if side["spec"] else None
        return cls(ImageBatch(blob["adversarial"], blob["labels"]), torch.tensor(side["success"], dtype=torch.bool),
                   side["loss_trace"], spec, blob["targets"])


# ---------------------------------------------------------------------------
# primitives

def l2_radius(epsilon: float, dim: int, convention: str = "rms") -> float:
    if convention == "rms":
        return epsilon * math.sqrt(dim)
    if convention == "absolute":
        return epsilon
    raise AttackError(f"unknown L2 convention {convention!r}")


def project_ball(x_star: torch.Tensor, x: torch.Tensor, norm: str, eps: float) -> torch.Tensor:
    """Project onto the eps-ball around x (radius in the norm's own units), then into [0, 1]."""
    if x_star.shape != x.shape:
        raise AttackError("shape mismatch")
    if norm == "Linf":
        out = torch.max(torch.min(x_star, x + eps), x - eps)
        return out.clamp(0.0, 1.0)
    if norm != "L2":
        raise AttackError(f"unknown norm {norm!r}")
    delta = x_star - x
    n = delta.flatten(1).norm(dim=1).view(-1, *[1] * (x.dim() - 1))
    factor = torch.where(n > eps, eps / n.clamp_min(1e-12), torch.ones_like(n))
    out = (x + delta * factor).clamp(0.0, 1.0)
    # clipping to [0,1] moves toward x coordinate-wise, so it cannot leave the ball
    return out


def cw_margin_loss(logits: torch.Tensor, target: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """max(best other logit - target logit, -kappa) per sample."""
    if logits.shape[1] < 2:
        raise AttackError("CW margin needs at least two classes")
    target = _as_targets(target, logits.shape[0], logits.shape[1])
    target_logit = logits.gather(1, target[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(target, logits.shape[1]).bool(), float("-inf"))
    return torch.clamp(others.max(dim=1).values - target_logit, min=-kappa)


def _as_targets(target, n, num_classes) -> torch.Tensor:
    t = torch.as_tensor(target, dtype=torch.int64)
    if t.dim() == 0:
        t = t.expand(n)
    if t.numel() and (t.min() < 0 or t.max() >= num_classes):
        raise AttackError("target class out of range")
    return t


def random_targets(labels: torch.Tensor, num_classes: int, seed: int) -> torch.Tensor:
    """Uniform target among the classes other than each sample's label."""
    g = torch.Generator().manual_seed(seed)
    offset = torch.randint(1, num_classes, (len(labels),), generator=g)
    return (labels + offset) % num_classes


def gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    k1 = torch.exp(-ax ** 2 / (2 * sigma ** 2))
    k = torch.outer(k1, k1)
    return k / k.sum()


def diverse_input(x: torch.Tensor, prob: float, min_scale: float, g: torch.Generator) -> torch.Tensor:
    """Random shrink-and-pad, applied per sample with probability ``prob``."""
    n, _, h, w = x.shape
    new = int(torch.randint(int(math.ceil(min_scale * h)), h + 1, (1,), generator=g))
    if new >= h:
        return x
    small = F.interpolate(x, size=(new, new), mode="bilinear", align_corners=False)
    top = int(torch.randint(0, h - new + 1, (1,), generator=g))
    left = int(torch.randint(0, w - new + 1, (1,), generator=g))
    padded = F.pad(small, (left, w - new - left, top, h - new - top))
    mask = (torch.rand(n, generator=g) < prob).view(n, 1, 1, 1)
    return torch.where(mask, padded, x)


# ---------------------------------------------------------------------------
# engine

LossFn = Callable[[torch.Tensor], torch.Tensor]


def pgd(loss_fn: LossFn, x: torch.Tensor, *, eps: float, alpha: float, steps: int, norm: str = "Linf",
        random_init: bool = False, momentum: Optional[float] = None, grad_filter=None, input_transform=None,
        step_schedule: Optional[Callable[[int], float]] = None, seed: int = 0, trace: Optional[list] = None,
        keep_best: bool = False) -> torch.Tensor:
    """Minimize ``loss_fn`` (per-sample, [N]) over the eps-ball around x.

    ``eps`` is the radius in the norm's own units. ``step_schedule(t)``
    multiplies alpha at step t. ``input_transform(x, gen)`` is applied before
    each gradient evaluation (DIM).
    """
    x = x.detach()
    if eps == 0:
        return x.clone()
    g = torch.Generator().manual_seed(seed)
    if random_init:
        if norm == "Linf":
            noise = (torch.rand(x.shape, generator=g) * 2 - 1) * eps
        else:
            d = torch.randn(x.shape, generator=g)
            d = d / d.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
            r = torch.rand(x.shape[0], generator=g).view(-1, 1, 1, 1) * eps
            noise = d * r
        adv = project_ball(x + noise, x, norm, eps)
    else:
        adv = x.clone()
    accum = torch.zeros_like(x)
    for t in range(steps):
        adv.requires_grad_(True)
        inp = adv if input_transform is None else input_transform(adv, g)
        loss = loss_fn(inp)
        (grad,) = torch.autograd.grad(loss.sum(), adv)
        if trace is not None:
            trace.append(loss.detach().mean().item())
        with torch.no_grad():
            if grad_filter is not None:
                grad = grad_filter(grad)
            if momentum is not None:
                l1 = grad.abs().flatten(1).sum(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
                accum = momentum * accum + grad / l1
                grad = accum
            a = alpha * (step_schedule(t) if step_schedule is not None else 1.0)
            if norm == "Linf":
                step = a * grad.sign()
            else:
                gn = grad.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)
                step = a * grad / gn
            adv = project_ball(adv.detach() - step, x, norm, eps)
    return adv.detach()


def classifier_loss(model, method: str, targets: torch.Tensor, kappa: float, untargeted: bool,
                    labels: torch.Tensor, transform=None) -> LossFn:
    """Attack objective on the model's logits; ``transform`` is an input transform (e.g. BPDA cushion)."""
    use_cw = method in CW_METHODS

    def loss(x):
        logits = model(x if transform is None else transform(x))
        if untargeted:
            if use_cw:
                return -cw_margin_loss(logits, labels, kappa)
            return -F.cross_entropy(logits, labels, reduction="none")
        if use_cw:
            return cw_margin_loss(logits, targets, kappa)
        return F.cross_entropy(logits, targets, reduction="none")

    return loss


def resolve_targets(spec: AttackSpec, labels: torch.Tensor, num_classes: int, targets=None):
    if targets is not None:
        return _as_targets(targets, len(labels), num_classes), False
    if spec.target == "untargeted":
        return labels.clone(), True
    if spec.target == "random":
        return random_targets(labels, num_classes, spec.seed), False
    return _as_targets(int(spec.target), len(labels), num_classes), False


def engine_kwargs(spec: AttackSpec, x: torch.Tensor) -> dict:
    """pgd() keyword arguments encoding a method's step rule and projection."""
    method = spec.method
    if spec.norm == "L2":
        radius = l2_radius(spec.epsilon, x[0].numel(), spec.l2_convention)
        alpha = spec.step_size if spec.step_size is not None else 2 * radius / spec.steps
    else:
        radius, alpha = spec.epsilon, spec.alpha
    kw = dict(eps=radius, alpha=alpha, steps=spec.steps, norm=spec.norm, seed=spec.seed,
              random_init=spec.random_init)
    if method == "MIM":
        kw["momentum"] = spec.momentum
    elif method == "DIM":
        kw["input_transform"] = lambda a, g: diverse_input(a, spec.dim_prob, spec.dim_min_scale, g)
    elif method == "TIM":
        kernel = gaussian_kernel(spec.tim_kernel_size, spec.tim_sigma)
        c = x.shape[1]
        weight = kernel.expand(c, 1, *kernel.shape).contiguous()
        kw["grad_filter"] = lambda gr: F.conv2d(gr, weight, padding=spec.tim_kernel_size // 2, groups=c)
    return kw


def run_attack(model, x: ImageBatch, spec: AttackSpec, *, targets=None, substitute=None,
               cushion=None) -> AttackResult:
    """Run one conventional attack; with ``cushion`` the gradient passes the transform straight through."""
    from .cushion import straight_through

    num_classes = model.num_classes
    tgt, untargeted = resolve_targets(spec, x.labels, num_classes, targets)
    transform = straight_through(cushion) if cushion is not None else None

    if spec.method == "TRANSFER":
        if substitute is None:
            raise AttackError("TRANSFER needs a substitute classifier")
        base = replace(spec, method=spec.transfer_base)
        inner = run_attack(substitute, x, base, targets=tgt if not untargeted else None, cushion=cushion)
        adv, trace = inner.adversarial.pixels, inner.loss_trace
    else:
        trace = []
        loss = classifier_loss(model, spec.method, tgt, spec.kappa, untargeted, x.labels, transform)
        adv = pgd(loss, x.pixels, trace=trace, **engine_kwargs(spec, x.pixels))

    success = attack_success(model, adv, tgt, untargeted, x.labels, cushion)
    return AttackResult(x.with_pixels(adv), success, trace, spec, tgt)


def attack_success(model, adv, targets, untargeted, labels, cushion=None) -> torch.Tensor:
    from .cushion import apply as cushion_apply
    with torch.no_grad():
        inp = adv if cushion is None else cushion_apply(cushion, adv)
        pred = model(inp).argmax(1)
    return pred != labels if untargeted else pred == targets
