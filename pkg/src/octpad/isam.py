"""Internal-structure attention module (ISAM).

A deliberately small encoder-decoder segmentation network that predicts a
4-channel map over a fingertip patch -- background, stratum corneum, viable
epidermis, sweat glands -- plus the attention rule that reweights the input
patch with the predicted foreground:

    attended = S * x * w1 + (1 - S) * x * w2

where S is the pixelwise max over the three foreground channels, w1 = 1 and
w2 = 0.5 by default.  The module is supervised on Bonafide patches only, so
its foreground map characterizes live-skin structure; accuracy of the
segmentation itself is not the goal, the map only has to steer attention.

Inference is read-only on the weights and safe to run concurrently; training
updates must be serialized by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError

N_SEG_CLASSES = 4
N_FOREGROUND = 3  # channels 1..3; channel 0 is background
PATCH_SIDE = 256


@dataclass(frozen=True)
class AttentionConfig:
    w1: float = 1.0  # weight on predicted foreground
    w2: float = 0.5  # weight on predicted background

    def __post_init__(self) -> None:
        if not 0.0 <= self.w2 <= self.w1:
            raise ConfigError(f"need 0 <= w2 <= w1, got w1={self.w1}, w2={self.w2}")


def foreground_map(seg: torch.Tensor) -> torch.Tensor:
    """Collapse a (..., 4, H, W) segmentation map to (..., H, W) foreground
    scores by taking the pixelwise max over the three foreground channels."""
    if seg.shape[-3] != N_SEG_CLASSES:
        raise ShapeMismatchError(f"expected {N_SEG_CLASSES} channels, got {seg.shape}")
    return seg[..., 1:, :, :].max(dim=-3).values


def apply_attention(x: torch.Tensor, s_out: torch.Tensor, cfg: AttentionConfig = AttentionConfig()) -> torch.Tensor:
    """Reweight ``x`` pixelwise: foreground keeps weight w1, background w2."""
    if x.shape != s_out.shape:
        raise ShapeMismatchError(f"patch {tuple(x.shape)} vs map {tuple(s_out.shape)}")
    return s_out * x * cfg.w1 + (1.0 - s_out) * x * cfg.w2


class ConvBlock(nn.Module):
    """Two 3x3 convs + one 1x1 conv, each Conv-BN-ReLU, with a residual path.

    ``stride`` on the first 3x3 conv performs the encoder downsampling.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.shortcut(x)


class DeconvBlock(nn.Module):
    """4x4 transposed conv (x2 upsampling), skip concat, 3x3 conv + 1x1 conv
    with a residual back to the upsampled features."""

    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )
        self.body = nn.Sequential(
            nn.Conv2d(c_out + c_skip, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        u = self.up(x)
        return self.body(torch.cat([u, skip], dim=1)) + u


class IsamNet(nn.Module):
    """Four-level U-Net, base width 16 doubling per level, sigmoid 4-channel head.

    ``base_width`` scales every channel count for cheap CPU runs; the stated
    shape contract holds at any width (output spatial size equals input).
    """

    def __init__(self, base_width: int = 16, in_channels: int = 1):
        super().__init__()
        if base_width < 1:
            raise ConfigError("base_width must be >= 1")
        w = [base_width * (2**i) for i in range(4)]  # 16/32/64/128 at default
        self.stem = ConvBlock(in_channels, w[0], stride=1)
        self.enc1 = ConvBlock(w[0], w[0], stride=2)  # 256 -> 128
        self.enc2 = ConvBlock(w[0], w[1], stride=2)  # 128 -> 64
        self.enc3 = ConvBlock(w[1], w[2], stride=2)  # 64  -> 32
        self.enc4 = ConvBlock(w[2], w[3], stride=2)  # 32  -> 16
        self.dec3 = DeconvBlock(w[3], w[2], w[2])  # 16  -> 32
        self.dec2 = DeconvBlock(w[2], w[1], w[1])  # 32  -> 64
        self.dec1 = DeconvBlock(w[1], w[0], w[0])  # 64  -> 128
        self.dec0 = DeconvBlock(w[0], w[0], w[0])  # 128 -> 256
        self.head = nn.Conv2d(w[0], N_SEG_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x)
        s0 = self.stem(x)
        e1 = self.enc1(s0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)
        d3 = self.dec3(e4, e3)
        d2 = self.dec2(d3, e2)
        d1 = self.dec1(d2, e1)
        d0 = self.dec0(d1, s0)
        return torch.sigmoid(self.head(d0))


def _check_input(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(f"expected (B, 1, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 16 != 0 or w % 16 != 0:
        raise ShapeMismatchError(f"spatial dims must be multiples of 16, got {h}x{w}")


def isam_forward(net: IsamNet, patch: torch.Tensor) -> torch.Tensor:
    """Segment a single (H, W) or (1, H, W) patch; returns (4, H, W) in (0, 1)."""
    if patch.ndim == 2:
        patch = patch.unsqueeze(0)
    if patch.ndim != 3:
        raise ShapeMismatchError(f"expected one patch, got shape {tuple(patch.shape)}")
    net.eval()
    with torch.no_grad():
        return net(patch.unsqueeze(0))[0]
