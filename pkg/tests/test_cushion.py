import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aegis.cushion import (DEFAULTS, CushionError, CushionOp, apply, bit_depth, jpeg, straight_through, tv_denoise,
                           tv_objective)


def test_parse_and_names():
    assert CushionOp.parse("JPEG-70") == CushionOp("JPEG", quality=70)
    assert CushionOp.parse("BIT-3").bits == 5
    assert CushionOp.parse("BIT-3").name == "BIT-3"
    assert CushionOp.parse("KEEP-3").bits == 3
    assert CushionOp.parse("TVM").tv_weight == 0.1
    assert CushionOp.parse("identity").kind == "IDENTITY"
    with pytest.raises(CushionError):
        CushionOp.parse("BLUR-2")
    with pytest.raises(CushionError):
        CushionOp("JPEG", quality=0)
    with pytest.raises(CushionError):
        CushionOp("BIT", backward_rule="EXPECTATION")


def test_identity_returns_input():
    x = torch.rand(2, 1, 8, 8)
    assert apply(CushionOp("IDENTITY"), x) is x


@pytest.mark.parametrize("op", DEFAULTS, ids=lambda o: o.name)
def test_defaults_are_deterministic_and_in_range(op):
    x = torch.rand(3, 1, 16, 16)
    a, b = apply(op, x), apply(op, x)
    assert torch.equal(a, b)
    assert a.shape == x.shape and a.min() >= 0 and a.max() <= 1


def test_jpeg_is_close_and_smooths():
    yy, xx = torch.meshgrid(torch.arange(32.0), torch.arange(32.0), indexing="ij")
    smooth = (0.5 + 0.3 * torch.sin(xx / 6) * torch.cos(yy / 5))[None, None]
    noisy = (smooth + 0.05 * torch.randn(1, 1, 32, 32, generator=torch.Generator().manual_seed(0))).clamp(0, 1)
    out = jpeg(noisy, 50)
    assert (out - noisy).abs().mean() < 0.05
    assert (out - smooth).pow(2).mean() < (noisy - smooth).pow(2).mean()


def test_jpeg_rgb():
    x = torch.rand(2, 3, 16, 16)
    assert jpeg(x, 80).shape == x.shape


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 255))
def test_bit_depth_levels(bits, v):
    x = torch.full((1, 1, 2, 2), v / 255.0)
    out = bit_depth(x, bits)
    levels = 2 ** bits - 1
    k = out * levels
    assert torch.allclose(k, k.round(), atol=1e-4)
    assert (out <= x + 1e-6).all()
    if bits == 8:
        assert torch.allclose(out, x, atol=1e-6)


def test_bit_depth_idempotent():
    x = torch.rand(4, 1, 8, 8)
    once = bit_depth(x, 3)
    assert torch.equal(bit_depth(once, 3), once)


def test_tv_objective_never_increases():
    x = torch.rand(3, 1, 16, 16, generator=torch.Generator().manual_seed(2))
    hist = []
    z = tv_denoise(x, 0.1, 50, 0.25, history=hist)
    objs = torch.stack(hist)
    assert (objs[1:] <= objs[:-1] + 1e-12).all()
    assert (tv_objective(z.double(), x.double(), 0.1) < tv_objective(x.double(), x.double(), 0.1)).all()


def test_tv_zero_weight_is_identity():
    x = torch.rand(1, 1, 8, 8)
    assert torch.allclose(tv_denoise(x, 0.0, 10, 0.125), x)


def test_tv_constant_image_fixed_point():
    x = torch.full((1, 1, 8, 8), 0.3)
    assert torch.allclose(tv_denoise(x, 0.1, 20, 0.125), x, atol=1e-6)


@pytest.mark.parametrize("op", DEFAULTS, ids=lambda o: o.name)
def test_straight_through_gradient_is_identity(op):
    x = torch.rand(2, 1, 8, 8, requires_grad=True)
    w = torch.randn(2, 1, 8, 8)
    (g,) = torch.autograd.grad((straight_through(op)(x) * w).sum(), x)
    assert torch.equal(g, w)
    assert torch.equal(straight_through(op)(x).detach(), apply(op, x.detach()))


@pytest.mark.parametrize("n", [1, 7, 1100])
def test_jpeg_mosaic_equals_per_image_coding(n):
    from aegis.cushion import _jpeg_roundtrip, _to_uint8
    x = torch.rand(n, 1, 16, 24, generator=torch.Generator().manual_seed(n))
    fast = jpeg(x, 75)
    data = _to_uint8(x.numpy())
    slow = np.stack([_jpeg_roundtrip(d[0], "L", 75) for d in data])[:, None]
    assert torch.equal(fast, torch.from_numpy(slow.astype(np.float32) / 255.0))


def test_jpeg_unaligned_size():
    x = torch.rand(2, 1, 13, 13)
    assert jpeg(x, 80).shape == x.shape
