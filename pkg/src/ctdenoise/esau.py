"""Denoising U-Net whose every level carries channel-wise multi-head
self-attention plus a two-layer conv block with an identity mapping.

The attention affinity matrix is computed across feature channels, so its
size is (C/heads)^2 per head regardless of image resolution.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .imaging import NormalizedImage
from .params import seed_parameters_


class ChannelAttention(nn.Module):
    """Multi-head attention over channels.

    Q, K, V are produced per path by a 1x1 point-wise convolution followed by
    a 3x3 depth-wise convolution, reshaped to (C/heads) x HW per head.  The
    affinity map softmax(K Q^T / alpha) has shape (C/heads) x (C/heads) with
    rows summing to one; alpha is a learnable per-head temperature.  The
    output projection result is added residually to the input.
    """

    def __init__(self, channels: int, heads: int = 4, bias: bool = True):
        super().__init__()
        if channels % heads:
            raise ValueError(f"head count {heads} must divide channel count {channels}")
        self.channels = channels
        self.heads = heads
        self.to_q = self._qkv_path(channels, bias)
        self.to_k = self._qkv_path(channels, bias)
        self.to_v = self._qkv_path(channels, bias)
        self.alpha = nn.Parameter(torch.ones(heads, 1, 1))
        self.project_out = nn.Conv2d(channels, channels, kernel_size=1, bias=bias)
        # shape of the most recently allocated affinity map, for inspection
        self.last_map_shape: tuple[int, ...] | None = None

    @staticmethod
    def _qkv_path(channels: int, bias: bool) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=1, bias=bias),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1, groups=channels, bias=bias),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W) input, got {tuple(x.shape)}")
        b, c, h, w = x.shape
        ch = c // self.heads
        q = self.to_q(x).reshape(b, self.heads, ch, h * w)
        k = self.to_k(x).reshape(b, self.heads, ch, h * w)
        v = self.to_v(x).reshape(b, self.heads, ch, h * w)

        attn = torch.softmax(k @ q.transpose(-2, -1) / self.alpha, dim=-1)
        self.last_map_shape = tuple(attn.shape)

        out = (v.transpose(-2, -1) @ attn).transpose(-2, -1).reshape(b, c, h, w)
        return self.project_out(out) + x


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with a leaky rectifier (slope 0.2) between them."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.leaky_relu(self.conv1(x), negative_slope=0.2))


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class EsauLevel(nn.Module):
    """One U-Net level: channel attention, then Conv(F') + Iden(F), then an
    optional resampling operator.

    forward returns (resampled output, pre-resample feature); the latter is
    what skip connections consume.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        heads: int = 4,
        resample: str = "none",
        c_next: int | None = None,
    ):
        super().__init__()
        if resample not in ("none", "down", "up"):
            raise ValueError(f"unknown resample mode {resample!r}")
        if resample != "none" and c_next is None:
            raise ValueError("resampling levels need c_next")
        self.attention = ChannelAttention(c_in, heads)
        self.conv = ConvBlock(c_in, c_out)
        self.iden = nn.Conv2d(c_in, c_out, kernel_size=1)
        if resample == "down":
            self.resample: nn.Module | None = Downsample(c_out, c_next)
        elif resample == "up":
            self.resample = Upsample(c_out, c_next)
        else:
            self.resample = None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attended = self.attention(x)
        pre = self.conv(attended) + self.iden(x)
        out = self.resample(pre) if self.resample is not None else pre
        return out, pre


class EsauNet(nn.Module):
    """Four down-sampling levels, a bottleneck, and four up-sampling levels
    with concatenation skips; width doubles per down-sampling.

    Input and output are single-channel (B, 1, H, W) with H and W divisible
    by 16.  No normalization layers and no output activation.
    """

    def __init__(self, base_width: int = 64, heads: int = 4):
        super().__init__()
        w = base_width
        self.base_width = w
        self.heads = heads
        self.input_proj = nn.Conv2d(1, w, kernel_size=1)
        self.encoder = nn.ModuleList(
            [
                EsauLevel(w, w, heads, "down", 2 * w),
                EsauLevel(2 * w, 2 * w, heads, "down", 4 * w),
                EsauLevel(4 * w, 4 * w, heads, "down", 8 * w),
                EsauLevel(8 * w, 8 * w, heads, "down", 16 * w),
            ]
        )
        self.bottleneck = EsauLevel(16 * w, 16 * w, heads, "up", 8 * w)
        self.decoder = nn.ModuleList(
            [
                EsauLevel(16 * w, 8 * w, heads, "up", 4 * w),
                EsauLevel(8 * w, 4 * w, heads, "up", 2 * w),
                EsauLevel(4 * w, 2 * w, heads, "up", w),
                EsauLevel(2 * w, w, heads, "none"),
            ]
        )
        self.output_proj = nn.Conv2d(w, 1, kernel_size=1)

    def reset_parameters(self, seed: int) -> None:
        seed_parameters_(self, seed)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial dims must be divisible by 16, got {h}x{w}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Activation entering the final output projection: (B, base_width, H, W)."""
        self._check_input(x)
        h = self.input_proj(x)
        skips = []
        for level in self.encoder:
            h, pre = level(h)
            skips.append(pre)
        h, _ = self.bottleneck(h)
        for level, skip in zip(self.decoder, reversed(skips)):
            h, _ = level(torch.cat([h, skip], dim=1))
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output_proj(self.features(x))


def denoise_image(net: EsauNet, img: NormalizedImage) -> NormalizedImage:
    """Denoise one windowed image.  The network output is unconstrained, so
    it is clamped into [0, 1] at this boundary."""
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(img.values).to(dtype)[None, None]
    with torch.no_grad():
        y = net(x)
    return NormalizedImage(y[0, 0].clamp(0.0, 1.0).numpy())
