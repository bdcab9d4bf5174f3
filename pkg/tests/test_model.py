import math

import numpy as np
import pytest
import torch

from gazestab import checkpoint
from gazestab.core import GazeError, InsufficientDataError
from gazestab.model import (Embedding, FusedProjection, GazeForecaster, HorizonExtension,
                            Inception, ModelConfig, PeriodBlock, dominant_periods, fold,
                            parameter_group, positional_encoding, standardize, destandardize,
                            unfold)

SMALL = ModelConfig(d_model=8, n_heads=2, d_ff=8, hist_len=16, horizon=8)


def test_standardize_hand_values():
    x = torch.tensor([[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]], dtype=torch.float64)
    xn, stats = standardize(x)
    np.testing.assert_allclose(xn[0, :, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-6)
    np.testing.assert_array_equal(xn[0, :, 1], [0.0, 0.0, 0.0])
    assert stats.sigma[0, 1] == pytest.approx(1e-5)


def test_standardize_roundtrip():
    x = torch.randn(3, 20, 4, dtype=torch.float64) * 5 + 2
    xn, stats = standardize(x)
    torch.testing.assert_close(destandardize(xn, stats), x, atol=1e-9, rtol=0)


def test_standardize_scale_free():
    x = torch.randn(2, 10, 4, dtype=torch.float64)
    y = x.clone()
    y[..., 1] *= 10
    torch.testing.assert_close(standardize(x)[0], standardize(y)[0])


def test_standardize_needs_two_steps():
    with pytest.raises(InsufficientDataError):
        standardize(torch.zeros(1, 1, 4))


def test_positional_encoding_values():
    pe = positional_encoding(64, 16)
    assert pe[0, 0] == pytest.approx(math.sin(1.0))
    assert pe[0, 1] == pytest.approx(math.cos(1.0))
    assert pe.shape == (64, 16)


def test_embedding_zero_input_is_positional_encoding():
    cfg = ModelConfig()
    emb = Embedding(cfg)
    z = emb(torch.zeros(2, 64, 4), torch.zeros(2, 64))
    assert z.shape == (2, 64, 16)
    torch.testing.assert_close(z, positional_encoding(64, 16).float().expand(2, -1, -1))


def test_embedding_channel_mismatch():
    with pytest.raises(GazeError):
        Embedding(ModelConfig())(torch.zeros(1, 64, 3), torch.zeros(1, 64))


def test_horizon_extension_init():
    ext = HorizonExtension(64, 64)
    z = torch.randn(2, 64, 16)
    out = ext(z)
    assert out.shape == (2, 128, 16)
    torch.testing.assert_close(out[:, :64], z)
    torch.testing.assert_close(out[:, 64:], z[:, -1:].expand(-1, 64, -1))
    with pytest.raises(GazeError):
        ext(torch.randn(1, 32, 16))


def test_horizon_extension_gradient_reaches_every_step():
    m = GazeForecaster(SMALL)
    x = torch.randn(2, 16, 4)
    m(x).pow(2).sum().backward()
    grad = m.extend.linear.weight.grad
    assert torch.all(grad.abs().sum(dim=1) > 0)


def test_inception_merged_matches_branches():
    inc = Inception(4, 6, (1, 3, 5)).double()
    x = torch.randn(2, 4, 5, 7, dtype=torch.float64)
    torch.testing.assert_close(inc(x), inc.forward_branches(x))


def test_dominant_period_of_sinusoid():
    t = torch.arange(128, dtype=torch.float64)
    x = torch.sin(2 * math.pi * t / 16)[None, :, None].repeat(1, 1, 3)
    periods, amps = dominant_periods(x, 2)
    assert periods[0, 0].item() == 16
    assert amps[0, 0] >= amps[0, 1]


def test_fold_unfold_lossless():
    x = torch.randn(3, 37, 5)
    for p in (1, 4, 10, 37, 50):
        torch.testing.assert_close(unfold(fold(x, p), 37), x)


def test_period_block_zero_conv_is_identity():
    block = PeriodBlock(SMALL)
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.randn(3, 24, 8)
    torch.testing.assert_close(block(x), x)


def test_period_block_independent_of_batch_mates():
    torch.manual_seed(0)
    block = PeriodBlock(SMALL)
    x = torch.randn(5, 24, 8)
    full = block(x)
    torch.testing.assert_close(block(x[2:3]), full[2:3], atol=1e-6, rtol=1e-5)


def test_projection_endpoints_and_mix():
    cfg = ModelConfig(d_model=8, n_heads=2)
    proj = FusedProjection(cfg)
    y = torch.randn(2, 10, 8)
    attn, lin = proj.branches(y)
    with torch.no_grad():
        proj.raw_alpha.fill_(-60.0)
        torch.testing.assert_close(proj(y), lin)
        proj.raw_alpha.fill_(60.0)
        torch.testing.assert_close(proj(y), attn)
        proj.raw_alpha.fill_(math.log(0.4 / 0.6))
        torch.testing.assert_close(proj(y), 0.4 * attn + 0.6 * lin)


def test_projection_modes():
    y = torch.randn(1, 6, 8)
    for mode in ("attention", "linear"):
        proj = FusedProjection(ModelConfig(d_model=8, n_heads=2, projection=mode))
        attn, lin = proj.branches(y)
        torch.testing.assert_close(proj(y), attn if mode == "attention" else lin)


def test_forward_shape_and_determinism():
    m = GazeForecaster()
    x = torch.randn(1, 64, 4)
    out = m(x)
    assert out.shape == (1, 64, 4)
    torch.testing.assert_close(m(x), out, rtol=0, atol=0)


def test_forward_finite_on_random_input():
    m = GazeForecaster(SMALL)
    gen = torch.Generator().manual_seed(3)
    for _ in range(10):
        x = torch.randn(4, 16, 4, generator=gen) * 10
        out = m(x, torch.randn(4, 16, generator=gen))
        assert out.shape[0] == 4 and torch.isfinite(out).all()


def test_alpha_in_unit_interval():
    m = GazeForecaster(SMALL)
    for raw in (-100.0, -1.0, 0.0, 3.0, 100.0):
        with torch.no_grad():
            m.project.raw_alpha.fill_(raw)
        assert 0.0 <= m.alpha <= 1.0


def test_config_validation():
    with pytest.raises(GazeError):
        ModelConfig(d_model=16, n_heads=3)
    with pytest.raises(GazeError):
        ModelConfig(inception_kernels=(1, 2))
    with pytest.raises(GazeError):
        ModelConfig(projection="conv")


def test_parameter_groups_cover_everything():
    m = GazeForecaster(SMALL)
    groups = {parameter_group(n) for n, _ in m.named_parameters()}
    assert groups == {"token_conv", "time_proj", "predict_linear", "backbone", "mha",
                      "linear_proj", "alpha"}


def test_weight_tensors_exclude_bias_and_alpha():
    m = GazeForecaster(SMALL)
    names = {id(p): n for n, p in m.named_parameters()}
    picked = [names[id(p)] for p in m.weight_tensors()]
    assert not any(n.endswith("bias") or n.endswith("raw_alpha") for n in picked)
    assert "extend.linear.weight" in picked


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    torch.manual_seed(1)
    m = GazeForecaster(SMALL)
    path = tmp_path / "m.tgzr"
    checkpoint.save(path, m, {"note": "x"})
    assert path.read_bytes()[:5] == b"TGZR1"
    m2, meta = checkpoint.load(path)
    assert meta == {"note": "x"} and m2.cfg == m.cfg
    x = torch.randn(2, 16, 4)
    assert torch.equal(m(x), m2(x))
    assert checkpoint.to_bytes(m2, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(b"NOPE" + bytes(20))
    good = checkpoint.to_bytes(GazeForecaster(SMALL))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(good[:-40])
