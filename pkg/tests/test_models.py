import numpy as np
import pytest
import torch

from morestyle.errors import ValidationError
from morestyle.models import (NoiseEncoder, ReconDecoder, SegNetwork, StyleParams, generate_styled,
                              style_mix_layer)


def test_mix_neutral_params_instance_normalize():
    f = torch.randn(2, 3, 5, 5)
    out = style_mix_layer(f, torch.zeros(2, 3), torch.zeros(2, 3), True)
    torch.testing.assert_close(out.mean(dim=(2, 3)), torch.zeros(2, 3), atol=1e-6, rtol=0)
    torch.testing.assert_close(out.var(dim=(2, 3), unbiased=False), torch.ones(2, 3), atol=1e-3, rtol=0)


def test_mix_inactive_is_identity():
    f = torch.randn(1, 2, 4, 4)
    assert style_mix_layer(f, torch.ones(1, 2), torch.ones(1, 2), False) is f


def test_mix_2x2_hand_computation():
    f = torch.tensor([[[[1.0, 2.0], [3.0, 6.0]]]], dtype=torch.float64)
    mu = 3.0
    var = ((1 - 3) ** 2 + (2 - 3) ** 2 + 0 + (6 - 3) ** 2) / 4  # 3.5
    expected = [(v - mu) / np.sqrt(var + 1e-5) * 2 + 0.5 for v in (1.0, 2.0, 3.0, 6.0)]
    out = style_mix_layer(f, torch.ones(1, 1, dtype=torch.float64), torch.full((1, 1), 0.5, dtype=torch.float64), True)
    np.testing.assert_allclose(out.flatten().numpy(), expected, atol=1e-12)


def test_mix_dimension_mismatch():
    with pytest.raises(ValidationError):
        style_mix_layer(torch.randn(1, 3, 4, 4), torch.zeros(1, 2), torch.zeros(1, 2), True)


@pytest.mark.parametrize("size", [8, 16, 24])
def test_seg_shapes_and_probabilities(size):
    torch.manual_seed(0)
    net = SegNetwork(widths=(4, 8, 16))
    p = net(torch.rand(2, 1, size, size))
    assert p.shape == (2, 3, size, size)
    torch.testing.assert_close(p.sum(dim=1), torch.ones(2, size, size), atol=1e-5, rtol=0)
    assert torch.all(p >= 0) and torch.all(p <= 1)


def test_seg_rejects_indivisible_size():
    with pytest.raises(ValidationError):
        SegNetwork(widths=(4, 8, 16))(torch.rand(1, 1, 10, 10))


def test_decoder_shape_and_range():
    dec = ReconDecoder(widths=(4, 8, 16))
    enc = NoiseEncoder(dec.mix_channels, noise_dim=8)
    x = torch.rand(3, 1, 16, 16)
    out = generate_styled(dec, enc, x, torch.randn(3, 8), active=[True, True, True])
    assert out.shape == x.shape
    assert torch.all(out >= 0) and torch.all(out <= 1)


def test_noise_encoder_shapes():
    enc = NoiseEncoder([4, 8, 16], noise_dim=12)
    params = enc(torch.randn(5, 12))
    assert [g.shape for g in params.gamma] == [(5, 4), (5, 8), (5, 16)]
    assert [b.shape for b in params.beta] == [(5, 4), (5, 8), (5, 16)]
    with pytest.raises(ValidationError):
        enc(torch.randn(5, 11))


def test_inactive_mix_equals_plain_reconstruction():
    torch.manual_seed(0)
    dec = ReconDecoder(widths=(4, 8, 16))
    enc = NoiseEncoder(dec.mix_channels, noise_dim=8)
    x = torch.rand(2, 1, 16, 16)
    styled = generate_styled(dec, enc, x, torch.randn(2, 8), active=[False] * 3)
    assert torch.equal(styled, dec(x))


def test_generate_styled_deterministic_under_seed():
    torch.manual_seed(0)
    dec = ReconDecoder(widths=(4, 8, 16))
    enc = NoiseEncoder(dec.mix_channels, noise_dim=8)
    x = torch.rand(2, 1, 16, 16)
    n = torch.randn(2, 8)
    outs = [generate_styled(dec, enc, x, n, generator=torch.Generator().manual_seed(5)) for _ in range(2)]
    assert torch.equal(*outs)


def test_generate_styled_needs_noise_per_image():
    dec = ReconDecoder(widths=(4, 8, 16))
    enc = NoiseEncoder(dec.mix_channels, noise_dim=8)
    with pytest.raises(ValidationError):
        generate_styled(dec, enc, torch.rand(2, 1, 16, 16), torch.randn(3, 8))


def test_mix_probability_is_respected():
    dec = ReconDecoder(widths=(4, 8, 16), p_mix=0.5)
    from morestyle.models import sample_active
    g = torch.Generator().manual_seed(0)
    draws = np.array([sample_active(3, 0.5, g) for _ in range(2000)])
    assert abs(draws.mean() - 0.5) < 0.03
