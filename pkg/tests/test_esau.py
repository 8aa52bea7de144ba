import numpy as np
import pytest
import torch

from ctdenoise.esau import ChannelAttention, ConvBlock, EsauLevel, EsauNet, denoise_image
from ctdenoise.imaging import NormalizedImage
from ctdenoise.params import all_grads_nonzero

from conftest import assert_grads_match, fd_gradient, fd_gradient_entries


def tiny_attention(channels=4, heads=2, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    attn = ChannelAttention(channels, heads).to(dtype)
    return attn


class TestChannelAttention:
    def test_shape_preserved(self):
        attn = tiny_attention()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert attn(x).shape == x.shape

    def test_head_count_must_divide_channels(self):
        with pytest.raises(ValueError, match="divide"):
            ChannelAttention(6, 4)

    def test_softmax_rows_sum_to_one(self):
        attn = tiny_attention(seed=3)
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64)

        captured = {}
        orig_softmax = torch.softmax

        def capture(t, dim=-1):
            out = orig_softmax(t, dim=dim)
            captured["map"] = out
            return out

        torch.softmax = capture
        try:
            attn(x)
        finally:
            torch.softmax = orig_softmax
        rows = captured["map"].sum(dim=-1)
        assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)

    def test_map_size_independent_of_resolution(self):
        attn = ChannelAttention(64, heads=4)
        for hw in (32, 64):
            attn(torch.randn(1, 64, hw, hw))
            assert attn.last_map_shape == (1, 4, 16, 16)

    def test_zero_value_path_gives_identity(self):
        attn = tiny_attention(seed=5)
        with torch.no_grad():
            for conv in attn.to_v:
                conv.weight.zero_()
                conv.bias.zero_()
            attn.project_out.weight.zero_()
            attn.project_out.bias.zero_()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        assert torch.equal(attn(x), x)

    def test_gradients_match_finite_differences(self):
        attn = tiny_attention(seed=7)
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        weights = torch.randn(1, 4, 8, 8, dtype=torch.float64)

        def loss_fn():
            return (attn(x) * weights).sum()

        loss = loss_fn()
        loss.backward()
        for name, p in attn.named_parameters():
            fd = fd_gradient(loss_fn, p)
            assert_grads_match(p.grad, fd)


class TestEsauLevel:
    def test_downsampling_doubles_channels_halves_space(self):
        torch.manual_seed(0)
        level = EsauLevel(4, 4, heads=2, resample="down", c_next=8)
        out, pre = level(torch.randn(1, 4, 16, 16))
        assert out.shape == (1, 8, 8, 8)
        assert pre.shape == (1, 4, 16, 16)

    def test_upsampling(self):
        torch.manual_seed(0)
        level = EsauLevel(8, 4, heads=2, resample="up", c_next=2)
        out, pre = level(torch.randn(1, 8, 8, 8))
        assert out.shape == (1, 2, 16, 16)
        assert pre.shape == (1, 4, 8, 8)

    def test_zero_conv_identity_iden_reduces_to_resample(self):
        torch.manual_seed(1)
        level = EsauLevel(3, 3, heads=1, resample="none")
        with torch.no_grad():
            level.conv.conv1.weight.zero_()
            level.conv.conv1.bias.zero_()
            level.conv.conv2.weight.zero_()
            level.conv.conv2.bias.zero_()
            level.iden.weight.zero_()
            for c in range(3):
                level.iden.weight[c, c, 0, 0] = 1.0
            level.iden.bias.zero_()
        x = torch.randn(2, 3, 8, 8)
        out, pre = level(x)
        assert torch.equal(out, x)
        assert torch.equal(pre, x)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        level = EsauLevel(2, 2, heads=2, resample="none").to(torch.float64)
        x = torch.randn(1, 2, 8, 8, dtype=torch.float64)

        def loss_fn():
            out, _ = level(x)
            return out.sum()

        loss_fn().backward()
        for name, p in level.named_parameters():
            fd = fd_gradient(loss_fn, p)
            assert_grads_match(p.grad, fd)


class TestEsauNet:
    def test_shape_preserved(self):
        net = EsauNet(base_width=8, heads=4)
        net.reset_parameters(0)
        x = torch.randn(1, 1, 64, 64)
        assert net(x).shape == (1, 1, 64, 64)

    def test_rejects_indivisible_dims(self):
        net = EsauNet(base_width=8)
        with pytest.raises(ValueError, match="divisible by 16"):
            net(torch.randn(1, 1, 60, 60))

    def test_deterministic(self):
        net = EsauNet(base_width=8)
        net.reset_parameters(1)
        x = torch.randn(1, 1, 32, 32)
        assert torch.equal(net(x), net(x))

    def test_reset_parameters_reproducible(self):
        n1 = EsauNet(base_width=8)
        n1.reset_parameters(5)
        n2 = EsauNet(base_width=8)
        n2.reset_parameters(5)
        for p1, p2 in zip(n1.parameters(), n2.parameters()):
            assert torch.equal(p1, p2)

    def test_features_shape(self):
        net = EsauNet(base_width=8)
        net.reset_parameters(0)
        feats = net.features(torch.randn(1, 1, 64, 64))
        assert feats.shape == (1, 8, 64, 64)

    def test_no_dead_parameters(self):
        net = EsauNet(base_width=8, heads=4)
        net.reset_parameters(3)
        x = torch.randn(2, 1, 32, 32)
        (net(x) ** 2).sum().backward()
        assert all_grads_nonzero(net) == []

    def test_gradients_match_finite_differences_on_subset(self):
        torch.manual_seed(4)
        net = EsauNet(base_width=8, heads=4).to(torch.float64)
        net.reset_parameters(4)
        net = net.to(torch.float64)
        x = torch.rand(1, 1, 32, 32, dtype=torch.float64)
        y = torch.rand(1, 1, 32, 32, dtype=torch.float64)

        def loss_fn():
            return ((net(x) - y) ** 2).mean()

        loss_fn().backward()
        rng = np.random.default_rng(0)
        params = [p for p in net.parameters() if p.numel() > 1]
        for _ in range(16):
            p = params[int(rng.integers(len(params)))]
            idx = int(rng.integers(p.numel()))
            (fd,) = fd_gradient_entries(loss_fn, p, [idx])
            analytic = p.grad.view(-1)[idx].item()
            scale = max(abs(analytic), abs(fd), 1e-8)
            assert abs(analytic - fd) / scale <= 1e-3

    def test_denoise_image_clamps_and_preserves_shape(self):
        net = EsauNet(base_width=8)
        net.reset_parameters(9)
        img = NormalizedImage(np.random.default_rng(0).uniform(0, 1, (32, 32)))
        out = denoise_image(net, img)
        assert out.values.shape == (32, 32)
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0
