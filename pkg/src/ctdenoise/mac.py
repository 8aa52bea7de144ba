"""Anatomical contrastive network: a U-shaped encoder producing a global
(512 x H/16 x W/16) and a local (64 x H x W) representation, instantiated as
an online network (trained by gradient) and a target network (an exponential
moving average of the online parameters).

The connection between the coarsest encoder feature and the decoder is cut,
so the local head never depends on the deepest stage.
"""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch import nn

from .esau import ConvBlock, Downsample, Upsample
from .params import seed_parameters_, set_requires_grad_

GLOBAL_CHANNELS = 512
LOCAL_CHANNELS = 64


class MacEncoder(nn.Module):
    """Disentangled U-shape.

    Encoder widths run 64 at full resolution, then 64/128/256/512 over the
    four down-samplings; the decoder restarts from the 256-channel H/8 stage
    (not from the coarsest feature) and ends at 64 channels at full
    resolution with no output projection.
    """

    def __init__(self):
        super().__init__()
        self.stem = ConvBlock(1, 64)
        self.down1 = nn.Sequential(Downsample(64, 64), ConvBlock(64, 64))
        self.down2 = nn.Sequential(Downsample(64, 128), ConvBlock(128, 128))
        self.down3 = nn.Sequential(Downsample(128, 256), ConvBlock(256, 256))
        # feeds only the global head; the decoder does not see it
        self.down4 = nn.Sequential(Downsample(256, 512), ConvBlock(512, 512))
        self.up3 = Upsample(256, 128)
        self.dec3 = ConvBlock(256, 128)
        self.up2 = Upsample(128, 64)
        self.dec2 = ConvBlock(128, 64)
        self.up1 = Upsample(64, 64)
        self.dec1 = ConvBlock(128, 64)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"spatial dims must be divisible by 16, got {h}x{w}")
        e0 = self.stem(x)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        e3 = self.down3(e2)
        f_g = self.down4(e3)
        d3 = self.dec3(torch.cat([self.up3(e3), e2], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e1], dim=1))
        f_l = self.dec1(torch.cat([self.up1(d2), e0], dim=1))
        return f_g, f_l


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_in, d_hidden),
        nn.LeakyReLU(0.2),
        nn.Linear(d_hidden, d_out),
    )


class MacNet(nn.Module):
    """Online and target encoder/projector pair plus the online-only heads.

    Target parameters never receive gradients; only ema_update moves them.
    The local embedder is a single two-layer perceptron shared by query,
    positive, and negative pixel features.
    """

    def __init__(self, ema_momentum: float = 0.99):
        super().__init__()
        if not 0.0 <= ema_momentum <= 1.0:
            raise ValueError(f"EMA momentum must be in [0, 1], got {ema_momentum}")
        self.ema_momentum = ema_momentum
        self.online_encoder = MacEncoder()
        self.online_projector = _mlp(GLOBAL_CHANNELS, GLOBAL_CHANNELS, 256)
        self.predictor = _mlp(256, 256, 256)
        self.local_embedder = _mlp(LOCAL_CHANNELS, 256, 256)
        self.target_encoder = copy.deepcopy(self.online_encoder)
        self.target_projector = copy.deepcopy(self.online_projector)
        set_requires_grad_(self.target_encoder, False)
        set_requires_grad_(self.target_projector, False)

    def reset_parameters(self, seed: int) -> None:
        """Seed the online branch and copy it into the target branch."""
        for offset, module in enumerate(
            (self.online_encoder, self.online_projector, self.predictor, self.local_embedder)
        ):
            seed_parameters_(module, seed + offset)
        self.copy_online_to_target()

    @torch.no_grad()
    def copy_online_to_target(self) -> None:
        self.target_encoder.load_state_dict(self.online_encoder.state_dict())
        self.target_projector.load_state_dict(self.online_projector.state_dict())

    def online_modules(self) -> tuple[nn.Module, ...]:
        return (self.online_encoder, self.online_projector, self.predictor, self.local_embedder)

    def trainable_parameters(self) -> list[nn.Parameter]:
        params: list[nn.Parameter] = []
        for m in self.online_modules():
            params.extend(m.parameters())
        return params

    def forward_online(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.online_encoder(x)

    def forward_target(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            f_g, f_l = self.target_encoder(x)
        return f_g.detach(), f_l.detach()

    @torch.no_grad()
    def ema_update(self, momentum: float | None = None) -> None:
        """target <- m * target + (1 - m) * online, elementwise over the
        encoder and projector trees; the online branch is untouched."""
        m = self.ema_momentum if momentum is None else momentum
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"EMA momentum must be in [0, 1], got {m}")
        for target, online in (
            (self.target_encoder, self.online_encoder),
            (self.target_projector, self.online_projector),
        ):
            t_params = dict(target.named_parameters())
            o_params = dict(online.named_parameters())
            if t_params.keys() != o_params.keys():
                raise ValueError("online and target parameter trees disagree")
            for name, t in t_params.items():
                o = o_params[name]
                if t.shape != o.shape:
                    raise ValueError(f"shape mismatch for {name}: {t.shape} vs {o.shape}")
                t.mul_(m).add_(o, alpha=1.0 - m)
