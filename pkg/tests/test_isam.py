import pytest
import torch

from octpad.errors import ConfigError, ShapeMismatchError
from octpad.isam import (
    AttentionConfig,
    IsamNet,
    apply_attention,
    foreground_map,
    isam_forward,
)


class TestAttentionConfig:
    def test_defaults(self):
        cfg = AttentionConfig()
        assert cfg.w1 == 1.0 and cfg.w2 == 0.5

    def test_ordering_enforced(self):
        with pytest.raises(ConfigError):
            AttentionConfig(w1=0.5, w2=1.0)
        with pytest.raises(ConfigError):
            AttentionConfig(w2=-0.1)


class TestForegroundMap:
    def test_one_hot_gland_pixel(self):
        seg = torch.zeros(4, 8, 8)
        seg[3, 2, 5] = 1.0
        assert foreground_map(seg)[2, 5] == 1.0

    def test_max_rule(self):
        seg = torch.zeros(4, 1, 1)
        seg[1, 0, 0], seg[2, 0, 0], seg[3, 0, 0] = 0.2, 0.7, 0.4
        assert foreground_map(seg)[0, 0] == pytest.approx(0.7)

    def test_all_background_zero(self):
        seg = torch.zeros(4, 8, 8)
        seg[0] = 1.0
        assert not foreground_map(seg).any()

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeMismatchError):
            foreground_map(torch.zeros(3, 8, 8))


class TestApplyAttention:
    def test_full_foreground_is_identity_bit_exact(self):
        x = torch.rand(64, 64)
        out = apply_attention(x, torch.ones_like(x))
        assert torch.equal(out, x)

    def test_full_background_halves(self):
        x = torch.rand(64, 64)
        out = apply_attention(x, torch.zeros_like(x))
        assert torch.allclose(out, 0.5 * x, atol=1e-7)

    def test_half_foreground_interpolates(self):
        x = torch.rand(16, 16)
        out = apply_attention(x, torch.full_like(x, 0.5))
        assert torch.allclose(out, 0.75 * x, atol=1e-6)

    def test_linearity_in_x(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            x = torch.rand(32, 32, generator=g, dtype=torch.float64)
            s = torch.rand(32, 32, generator=g, dtype=torch.float64)
            a = float(torch.rand((), generator=g)) * 9.9 + 0.1
            lhs = apply_attention(a * x, s)
            rhs = a * apply_attention(x, s)
            assert torch.allclose(lhs, rhs, atol=1e-6, rtol=1e-6)

    def test_monotone_in_s(self):
        g = torch.Generator().manual_seed(1)
        x = torch.rand(16, 16, generator=g)
        s1 = torch.rand(16, 16, generator=g)
        s2 = torch.clamp(s1 + torch.rand(16, 16, generator=g) * 0.3, max=1.0)
        assert (apply_attention(x, s2) >= apply_attention(x, s1) - 1e-7).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_attention(torch.rand(8, 8), torch.rand(8, 9))

    def test_custom_weights(self):
        cfg = AttentionConfig(w1=1.0, w2=0.0)
        x = torch.rand(8, 8)
        assert not apply_attention(x, torch.zeros_like(x), cfg).any()


@pytest.fixture(scope="module")
def tiny_isam():
    torch.manual_seed(0)
    return IsamNet(base_width=2)


class TestIsamNet:
    def test_output_contract(self, tiny_isam):
        x = torch.rand(1, 1, 256, 256)
        tiny_isam.eval()
        with torch.no_grad():
            out = tiny_isam(x)
        assert out.shape == (1, 4, 256, 256)
        assert (out > 0).all() and (out < 1).all()

    def test_inference_deterministic(self, tiny_isam):
        x = torch.rand(1, 1, 256, 256)
        a = isam_forward(tiny_isam, x[0])
        b = isam_forward(tiny_isam, x[0])
        assert torch.equal(a, b)

    def test_wrong_input_size(self, tiny_isam):
        with pytest.raises(ShapeMismatchError):
            tiny_isam(torch.rand(1, 1, 250, 250))
        with pytest.raises(ShapeMismatchError):
            tiny_isam(torch.rand(1, 3, 256, 256))

    def test_spatial_size_preserved_at_other_multiples(self, tiny_isam):
        x = torch.rand(1, 1, 64, 96)
        tiny_isam.eval()
        with torch.no_grad():
            out = tiny_isam(x)
        assert out.shape == (1, 4, 64, 96)

    def test_width_scales_channel_counts(self):
        wide = IsamNet(base_width=16)
        narrow = IsamNet(base_width=4)
        n_wide = sum(p.numel() for p in wide.parameters())
        n_narrow = sum(p.numel() for p in narrow.parameters())
        assert n_wide > n_narrow
