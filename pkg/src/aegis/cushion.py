"""Input-smoothing transforms and the straight-through backward rule used to attack through them."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np
import PIL
import torch
from PIL import Image, features

KINDS = ("IDENTITY", "JPEG", "BIT", "TVM")


class CushionError(ValueError):
    pass


@dataclass(frozen=True)
class CushionOp:
    kind: str = "JPEG"
    quality: int = 80  # JPEG
    bits: int = 5  # BIT: kept bits
    tv_weight: float = 0.1  # TVM
    tv_iters: int = 30
    tv_step: float = 0.125
    backward_rule: str = "STRAIGHT_THROUGH"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CushionError(f"unknown cushion kind {self.kind!r}")
        if self.kind == "JPEG" and not 1 <= self.quality <= 100:
            raise CushionError("JPEG quality must be in 1..100")
        if self.kind == "BIT" and not 1 <= self.bits <= 8:
            raise CushionError("kept bits must be in 1..8")
        if self.kind == "TVM" and (self.tv_weight < 0 or self.tv_iters < 0 or self.tv_step <= 0):
            raise CushionError("invalid TVM parameters")
        if self.backward_rule != "STRAIGHT_THROUGH":
            raise CushionError(f"unsupported backward rule {self.backward_rule!r}")

    @property
    def name(self) -> str:
        # BIT-k names the number of dropped low-order bits
        return {"IDENTITY": "identity", "JPEG": f"JPEG-{self.quality}", "BIT": f"BIT-{8 - self.bits}",
                "TVM": f"TVM-{self.tv_weight:g}"}[self.kind]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> "CushionOp":
        """'JPEG-80', 'BIT-3' (drop the last 3 bits), 'KEEP-3' (keep 3 bits), 'TVM', 'TVM-0.05', 'identity'."""
        head, _, arg = text.partition("-")
        head = head.upper()
        if head in ("IDENTITY", "NONE"):
            return cls("IDENTITY")
        if head == "JPEG":
            return cls("JPEG", quality=int(arg or 80))
        if head == "BIT":
            return cls("BIT", bits=8 - int(arg or 3))
        if head == "KEEP":
            return cls("BIT", bits=int(arg))
        if head == "TVM":
            return cls("TVM", tv_weight=float(arg) if arg else 0.1)
        raise CushionError(f"cannot parse cushion {text!r}")


def codec_info() -> dict:
    return {"codec": "Pillow/libjpeg", "pillow": PIL.__version__, "libjpeg": features.version("jpg")}


# ---------------------------------------------------------------------------
# transforms

def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _jpeg_roundtrip(arr: np.ndarray, mode: str, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    kw = {"subsampling": 2} if mode == "RGB" else {}  # 4:2:0
    Image.fromarray(arr, mode=mode).save(buf, format="JPEG", quality=quality, **kw)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert(mode))


def _jpeg_mosaic(planes: np.ndarray, quality: int, max_tiles: int = 1024) -> np.ndarray:
    """Round-trip many grayscale planes at once by tiling them into one image.

    Grayscale JPEG codes each 8x8 block independently (only the lossless entropy
    stage links blocks), so with block-aligned tiles this equals per-image coding.
    """
    k, h, w = planes.shape
    out = np.empty_like(planes)
    for start in range(0, k, max_tiles):
        chunk = planes[start:start + max_tiles]
        m = len(chunk)
        cols = int(np.ceil(np.sqrt(m)))
        rows = int(np.ceil(m / cols))
        padded = np.zeros((rows * cols, h, w), dtype=np.uint8)
        padded[:m] = chunk
        mosaic = padded.reshape(rows, cols, h, w).transpose(0, 2, 1, 3).reshape(rows * h, cols * w)
        back = _jpeg_roundtrip(mosaic, "L", quality)
        out[start:start + m] = back.reshape(rows, h, cols, w).transpose(0, 2, 1, 3).reshape(-1, h, w)[:m]
    return out


def jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    data = _to_uint8(x.detach().cpu().numpy())
    n, c, h, w = data.shape
    if c == 3:
        out = np.empty_like(data)
        for i in range(n):
            out[i] = _jpeg_roundtrip(data[i].transpose(1, 2, 0), "RGB", quality).transpose(2, 0, 1)
    elif h % 8 == 0 and w % 8 == 0:
        out = _jpeg_mosaic(data.reshape(n * c, h, w), quality).reshape(data.shape)
    else:
        out = np.stack([[_jpeg_roundtrip(data[i, ch], "L", quality) for ch in range(c)] for i in range(n)])
    return torch.from_numpy(out.astype(np.float32) / 255.0).to(x.dtype)


def bit_depth(x: torch.Tensor, bits: int) -> torch.Tensor:
    levels = 2 ** bits - 1
    # tiny offset keeps k/levels inputs on their own level despite rounding in x*levels
    return torch.floor(x * levels + 1e-4) / levels


def _grad(z):
    """Forward differences with Neumann boundary, returns (dy, dx)."""
    dy = torch.zeros_like(z)
    dx = torch.zeros_like(z)
    dy[..., :-1, :] = z[..., 1:, :] - z[..., :-1, :]
    dx[..., :, :-1] = z[..., :, 1:] - z[..., :, :-1]
    return dy, dx


def _div(py, px):
    """Negative adjoint of _grad."""
    dy = torch.zeros_like(py)
    dx = torch.zeros_like(px)
    dy[..., 0, :] = py[..., 0, :]
    dy[..., 1:-1, :] = py[..., 1:-1, :] - py[..., :-2, :]
    dy[..., -1, :] = -py[..., -2, :]
    dx[..., :, 0] = px[..., :, 0]
    dx[..., :, 1:-1] = px[..., :, 1:-1] - px[..., :, :-2]
    dx[..., :, -1] = -px[..., :, -2]
    return dy + dx


def tv_objective(z, x, weight):
    """Per-image 0.5*||z - x||^2 + weight * anisotropic TV(z)."""
    dy, dx = _grad(z)
    return 0.5 * ((z - x) ** 2).flatten(1).sum(1) + weight * (dy.abs() + dx.abs()).flatten(1).sum(1)


def tv_denoise(x: torch.Tensor, weight: float, iters: int, step: float, history: list | None = None):
    """Anisotropic ROF denoising by projected gradient on the dual.

    The primal iterate is z = x + weight * div(p) with |p| <= 1 componentwise.
    A dual step that would raise an image's primal objective is rejected and
    that image's step halved, so the objective never increases.
    """
    x = x.detach().to(torch.float64)
    shape = (-1,) + (1,) * (x.dim() - 1)
    py = torch.zeros_like(x)
    px = torch.zeros_like(x)
    z = x.clone()
    best = tv_objective(z, x, weight)
    if history is not None:
        history.append(best.clone())
    if weight == 0:
        return z.clamp(0, 1).float()
    tau = torch.full((x.shape[0],), step / weight, dtype=torch.float64).view(shape)
    for _ in range(iters):
        gy, gx = _grad(z)
        ny = (py + tau * gy).clamp(-1, 1)
        nx = (px + tau * gx).clamp(-1, 1)
        cand = x + weight * _div(ny, nx)
        obj = tv_objective(cand, x, weight)
        keep = (obj <= best).view(shape)
        py, px = torch.where(keep, ny, py), torch.where(keep, nx, px)
        z = torch.where(keep, cand, z)
        tau = torch.where(keep, tau, tau / 2)
        best = torch.minimum(obj, best)
        if history is not None:
            history.append(best.clone())
    return z.clamp(0, 1).float()


def apply(c: CushionOp, x: torch.Tensor) -> torch.Tensor:
    """Deterministic transform of a pixel tensor [N,C,H,W] in [0,1]."""
    pixels = getattr(x, "pixels", x)
    with torch.no_grad():
        if c.kind == "IDENTITY":
            out = pixels
        elif c.kind == "JPEG":
            out = jpeg(pixels, c.quality)
        elif c.kind == "BIT":
            out = bit_depth(pixels, c.bits)
        else:
            out = tv_denoise(pixels, c.tv_weight, c.tv_iters, c.tv_step)
    if hasattr(x, "with_pixels"):
        return x.with_pixels(out)
    return out


def bpda_gradient(c: CushionOp, upstream_grad: torch.Tensor) -> torch.Tensor:
    """Backward rule of the cushion: identity, i.e. dC/dx ~ I."""
    return upstream_grad


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, op):
        ctx.op = op
        return apply(op, x)

    @staticmethod
    def backward(ctx, grad):
        return bpda_gradient(ctx.op, grad), None


def straight_through(c: CushionOp | None):
    """Differentiable wrapper: forward runs the cushion, backward passes the gradient through."""
    if c is None or c.kind == "IDENTITY":
        return lambda x: x
    return lambda x: _StraightThrough.apply(x, c)


DEFAULTS = (CushionOp("JPEG", quality=80), CushionOp("BIT", bits=5), CushionOp("TVM"))
