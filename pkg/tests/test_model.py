import numpy as np
import pytest
import torch

from uasnet.errors import InvalidInputError
from uasnet.model import (ArchConfig, FACat, FaCatParams, UASNet, fa_cat, normalize_hu, parse_placement,
                          predict, sa_block, se_block)

SMALL = dict(widths=(16, 16, 32, 32, 32))


def make_params(c, method="sobel", dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    s = c // 16
    return FaCatParams(
        torch.randn(c, s, generator=g, dtype=dtype, requires_grad=True),
        torch.randn(s, c, generator=g, dtype=dtype, requires_grad=True),
        torch.randn(s, c, generator=g, dtype=dtype),
        method,
    )


@pytest.mark.parametrize("c", [16, 32, 64])
@pytest.mark.parametrize("method", ["sobel", "otsu"])
def test_fa_cat_output_channels(c, method):
    x = torch.randn(2, c, 8, 8, dtype=torch.float64)
    y = fa_cat(x, make_params(c, method))
    assert y.shape == (2, c + c // 16, 8, 8)


def test_fa_cat_unbatched():
    y = fa_cat(torch.randn(32, 5, 5, dtype=torch.float64), make_params(32))
    assert y.shape == (34, 5, 5)


def test_fa_cat_rejects_indivisible_channels():
    with pytest.raises(InvalidInputError):
        FACat(24, "sobel")
    with pytest.raises(InvalidInputError):
        sa_block(torch.randn(1, 24, 4, 4), torch.randn(1, 24), "sobel")


def test_se_gate_bounds():
    x = torch.ones(1, 16, 4, 4, dtype=torch.float64)
    p = make_params(16)
    y = se_block(x, p.w1, p.w2)
    assert torch.all(y > 0) and torch.all(y < 1)


@pytest.mark.parametrize("method", ["sobel", "otsu"])
def test_se_gradcheck(method):
    x = torch.randn(1, 16, 6, 6, dtype=torch.float64)
    p = make_params(16, method)

    def f(w1, w2):
        return fa_cat(x, FaCatParams(w1, w2, p.compress, method))[:, :16].sum()

    assert torch.autograd.gradcheck(f, (p.w1, p.w2), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_no_gradient_through_filter():
    x = torch.randn(1, 16, 6, 6, dtype=torch.float64, requires_grad=True)
    p = make_params(16)
    p.compress.requires_grad_(True)
    y = fa_cat(x, p)
    y[:, 16:].sum().backward()
    assert p.compress.grad is None or torch.all(p.compress.grad == 0)
    assert x.grad is None or torch.all(x.grad == 0)


def test_compress_is_buffer_unless_masked():
    assert "compress" not in dict(FACat(16, "sobel").named_parameters())
    assert "compress" in dict(FACat(16, "otsu", "masked").named_parameters())


def test_masked_otsu_passes_gradient():
    block = FACat(16, "otsu", "masked")
    block(torch.randn(1, 16, 6, 6))[:, 16:].sum().backward()
    assert block.compress.grad is not None


def test_normalize_hu():
    np.testing.assert_allclose(normalize_hu(np.array([-2000.0, -1000.0, -300.0, 400.0, 900.0])),
                               [-1, -1, 0, 1, 1], atol=1e-6)
    t = normalize_hu(torch.tensor([-1000.0, 400.0]))
    assert torch.allclose(t, torch.tensor([-1.0, 1.0]))


def test_parse_placement():
    assert parse_placement("high") == (0, 1)
    assert parse_placement("low") == (3, 4)
    assert parse_placement("none") == ()
    assert parse_placement("0,2") == (0, 2)
    with pytest.raises(InvalidInputError):
        parse_placement("middle")


def test_arch_config_validation():
    with pytest.raises(InvalidInputError):
        ArchConfig(widths=(16, 32))
    with pytest.raises(InvalidInputError):
        ArchConfig(fa_cat_levels=(7,))
    with pytest.raises(InvalidInputError):
        ArchConfig(widths=(8, 16, 32, 64, 128))


def test_forward_shapes_and_ranges():
    torch.manual_seed(0)
    net = UASNet(ArchConfig(**SMALL))
    out = net(torch.randn(2, 1, 64, 64))
    for t in (out.union_pred, out.inter_pred, out.r_pred, out.mcm_soft):
        assert t.shape == (2, 1, 64, 64)
        assert torch.all((t >= 0) & (t <= 1))
    assert torch.allclose(out.mcm_soft, (out.union_pred + out.inter_pred) / 2)
    assert set(np.unique(out.mcm(1).discrete)) <= {0.0, 0.5, 1.0}


def test_forward_rejects_bad_size():
    net = UASNet(ArchConfig(**SMALL))
    with pytest.raises(InvalidInputError):
        net(torch.zeros(1, 1, 48, 40))
    with pytest.raises(InvalidInputError):
        net(torch.zeros(1, 64, 64))


@pytest.mark.parametrize("placement", ["high", "low", "none"])
def test_channel_trace(placement):
    net = UASNet(ArchConfig(fa_cat_levels=parse_placement(placement), **SMALL))
    records = net.channel_trace(64, 64)
    assert len(records) == 15
    for rec in records:
        assert rec["actual"] == rec["expected"]
        if rec["branch"] == "plain":
            assert not rec["fa_cat"]
    with_block = {(r["branch"], r["level"]) for r in records if r["fa_cat"]}
    expected = {(b, lvl) for b in ("union", "inter") for lvl in parse_placement(placement)}
    assert with_block == expected


def test_fa_cat_tags():
    net = UASNet(ArchConfig(**SMALL))
    assert net.fa_cat_tags() == ["union.fa_cat0", "union.fa_cat1", "inter.fa_cat0", "inter.fa_cat1"]
    assert net.fa_cat_module("inter.fa_cat1").adaptive_method == "otsu"
    with pytest.raises(InvalidInputError):
        net.fa_cat_module("plain.fa_cat0")


def test_gradient_reaches_all_branches():
    torch.manual_seed(1)
    net = UASNet(ArchConfig(**SMALL))
    out = net(torch.randn(2, 1, 32, 32))
    (out.union_pred.mean() + out.inter_pred.mean() + out.r_pred.mean()).backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name


def test_deterministic_construction():
    torch.manual_seed(3)
    a = UASNet(ArchConfig(**SMALL))
    torch.manual_seed(3)
    b = UASNet(ArchConfig(**SMALL))
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    a.eval()
    b.eval()
    x = torch.randn(1, 1, 32, 32)
    assert torch.equal(a(x).r_pred, b(x).r_pred)


def test_predict_returns_numpy_maps():
    net = UASNet(ArchConfig(**SMALL))
    out = predict(net, np.full((32, 32), -800.0))
    assert out["r"].shape == (32, 32) and out["mcm"].soft.shape == (32, 32)
    assert net.training
