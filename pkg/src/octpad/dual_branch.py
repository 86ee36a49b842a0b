"""Dual-branch presentation-attack classifier with cross-dense feature exchange.

Two convolutional branches process each 256 x 256 patch: the global branch
sees the raw patch, the local branch sees the attention-reweighted patch
produced by the embedded segmentation module (:mod:`octpad.isam`).  Three
dense blocks with layer counts (4, 8, 12) form the trunk; in the dual
configuration each block's per-branch input is the channel-wise concat of
its own previous features with the other branch's, so the branches exchange
information at every block boundary.  A shared head (3x3 stride-2 conv,
global average pooling, fully connected) yields 2-class logits.

Reference channel plan at width multiplier 1 (halved/quartered multipliers
scale every count):

    stem               128x128x64   per branch
    block1 (L=4,g=32)  128x128x256  per branch
    transition1        64x64x128
    block2 (L=8,g=32)  64x64x512
    transition2        32x32x256
    block3 (L=12,g=32) 32x32x1024   (896 accumulated, projected up)
    transition3        16x16x512
    branch concat      16x16x1024
    head conv          8x8x1024 -> pooled 1024 -> logits 2

Each dense block ends in a 1x1 projection to its declared output count; for
blocks 1-2 the projection is square, for block 3 it widens 896 -> 1024 so the
declared interface holds under a uniform growth rate.

Ablation variants share the head contract: ``BASELINE`` is the single-branch
dense network on the raw patch, ``DUAL_BRANCH_NO_ISAM`` feeds the raw patch
to both branches, ``BASELINE_PLUS_ISAM`` is the single branch on the
attended patch, ``FULL_ISAPAD`` is the complete architecture.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DomainError, ShapeMismatchError
from .isam import AttentionConfig, IsamNet, apply_attention, foreground_map

N_CLASSES = 2  # class 0 = PA, class 1 = Bonafide
PATCH_SIDE = 256
BLOCK_LAYERS = (4, 8, 12)


class AblationVariant(str, Enum):
    BASELINE = "baseline"
    DUAL_BRANCH_NO_ISAM = "dual_branch_no_isam"
    BASELINE_PLUS_ISAM = "baseline_plus_isam"
    FULL_ISAPAD = "full_isapad"


@dataclass(frozen=True)
class NetConfig:
    width_multiplier: float = 1.0
    isam_base_width: int | None = None  # None: 16 scaled by the multiplier, floor 2

    def __post_init__(self) -> None:
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be > 0")
        if self.isam_base_width is not None and self.isam_base_width < 1:
            raise ConfigError("isam_base_width must be >= 1")

    def scaled(self, channels: int) -> int:
        return max(1, round(channels * self.width_multiplier))

    @property
    def isam_width(self) -> int:
        if self.isam_base_width is not None:
            return self.isam_base_width
        return max(2, self.scaled(16))


def _cbr(c_in: int, c_out: int, k: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class DenseLayer(nn.Module):
    """{3x3 conv -> 1x1 conv}, each Conv-BN-ReLU; emits ``growth`` channels."""

    def __init__(self, c_in: int, growth: int):
        super().__init__()
        self.conv3 = _cbr(c_in, growth, 3)
        self.conv1 = _cbr(growth, growth, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv1(self.conv3(x))


class DenseStage(nn.Module):
    """L dense layers on a running concatenation, then a 1x1 projection."""

    def __init__(self, c_in: int, n_layers: int, growth: int, c_out: int):
        super().__init__()
        self.layers = nn.ModuleList(
            DenseLayer(c_in + i * growth, growth) for i in range(n_layers)
        )
        self.project = _cbr(c_in + n_layers * growth, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = x
        for layer in self.layers:
            feats = torch.cat([feats, layer(feats)], dim=1)
        return self.project(feats)


class CrossDenseBlock(nn.Module):
    """Per-branch dense stages whose inputs concat both branches' features."""

    def __init__(self, c_in_per_branch: int, n_layers: int, growth: int, c_out: int):
        super().__init__()
        self.local = DenseStage(2 * c_in_per_branch, n_layers, growth, c_out)
        self.glob = DenseStage(2 * c_in_per_branch, n_layers, growth, c_out)

    def forward(self, x_local: torch.Tensor, x_global: torch.Tensor):
        return (
            self.local(torch.cat([x_local, x_global], dim=1)),
            self.glob(torch.cat([x_global, x_local], dim=1)),
        )


class Transition(nn.Module):
    """1x1 conv halving channels, then 2x2 average pool stride 2."""

    def __init__(self, c_in: int):
        super().__init__()
        self.conv = _cbr(c_in, c_in // 2, 1)
        self.pool = nn.AvgPool2d(2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.conv(x))


class IsapadNet(nn.Module):
    def __init__(
        self,
        variant: AblationVariant = AblationVariant.FULL_ISAPAD,
        cfg: NetConfig = NetConfig(),
        attention: AttentionConfig = AttentionConfig(),
    ):
        super().__init__()
        self.variant = variant
        self.cfg = cfg
        self.attention = attention
        self.dual = variant in (AblationVariant.FULL_ISAPAD, AblationVariant.DUAL_BRANCH_NO_ISAM)
        self.use_isam = variant in (AblationVariant.FULL_ISAPAD, AblationVariant.BASELINE_PLUS_ISAM)

        stem_ch = cfg.scaled(64)
        growth = cfg.scaled(32)
        outs = (cfg.scaled(256), cfg.scaled(512), cfg.scaled(1024))

        self.isam = IsamNet(base_width=cfg.isam_width) if self.use_isam else None

        if self.dual:
            self.stem_local = _cbr(1, stem_ch, 7, stride=2)
            self.stem_global = _cbr(1, stem_ch, 7, stride=2)
            self.block1 = CrossDenseBlock(stem_ch, BLOCK_LAYERS[0], growth, outs[0])
            self.block2 = CrossDenseBlock(outs[0] // 2, BLOCK_LAYERS[1], growth, outs[1])
            self.block3 = CrossDenseBlock(outs[1] // 2, BLOCK_LAYERS[2], growth, outs[2])
            self.trans1_local, self.trans1_global = Transition(outs[0]), Transition(outs[0])
            self.trans2_local, self.trans2_global = Transition(outs[1]), Transition(outs[1])
            self.trans3_local, self.trans3_global = Transition(outs[2]), Transition(outs[2])
            head_ch = 2 * (outs[2] // 2)
        else:
            self.stem = _cbr(1, stem_ch, 7, stride=2)
            self.block1 = DenseStage(stem_ch, BLOCK_LAYERS[0], growth, outs[0])
            self.block2 = DenseStage(outs[0] // 2, BLOCK_LAYERS[1], growth, outs[1])
            self.block3 = DenseStage(outs[1] // 2, BLOCK_LAYERS[2], growth, outs[2])
            self.trans1, self.trans2, self.trans3 = (
                Transition(outs[0]),
                Transition(outs[1]),
                Transition(outs[2]),
            )
            head_ch = outs[2] // 2

        self.head_conv = _cbr(head_ch, head_ch, 3, stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(head_ch, N_CLASSES)
        self.feature_dim = head_ch

    # -- forward ------------------------------------------------------------

    def _attend(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        seg = self.isam(x)
        s = foreground_map(seg).unsqueeze(1)
        return apply_attention(x, s.expand_as(x), self.attention), seg

    def _forward_impl(self, x: torch.Tensor, trace: dict | None = None):
        _check_patch_batch(x)
        seg = None
        if self.dual:
            if self.use_isam:
                attended, seg = self._attend(x)
            else:
                attended = x
            l = self.stem_local(attended)
            g = self.stem_global(x)
            _tr(trace, "stem", l, g)
            l, g = self.block1(l, g)
            _tr(trace, "block1", l, g)
            l, g = self.trans1_local(l), self.trans1_global(g)
            _tr(trace, "transition1", l, g)
            l, g = self.block2(l, g)
            _tr(trace, "block2", l, g)
            l, g = self.trans2_local(l), self.trans2_global(g)
            _tr(trace, "transition2", l, g)
            l, g = self.block3(l, g)
            _tr(trace, "block3", l, g)
            l, g = self.trans3_local(l), self.trans3_global(g)
            _tr(trace, "transition3", l, g)
            h = torch.cat([l, g], dim=1)
        else:
            if self.use_isam:
                attended, seg = self._attend(x)
            else:
                attended = x
            h = self.stem(attended)
            _tr(trace, "stem", h)
            h = self.block1(h)
            _tr(trace, "block1", h)
            h = self.trans1(h)
            _tr(trace, "transition1", h)
            h = self.block2(h)
            _tr(trace, "block2", h)
            h = self.trans2(h)
            _tr(trace, "transition2", h)
            h = self.block3(h)
            _tr(trace, "block3", h)
            h = self.trans3(h)
            _tr(trace, "transition3", h)
        _tr(trace, "concat", h)
        h = self.head_conv(h)
        _tr(trace, "head_conv", h)
        pooled = self.pool(h).flatten(1)
        _tr(trace, "pooled", pooled)
        logits = self.fc(pooled)
        _tr(trace, "logits", logits)
        return logits, pooled, seg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits, _, _ = self._forward_impl(x)
        return logits

    def forward_with_seg(self, x: torch.Tensor):
        """Logits plus the embedded module's segmentation (None without it)."""
        logits, _, seg = self._forward_impl(x)
        return logits, seg

    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        _, pooled, _ = self._forward_impl(x)
        return pooled

    def trace_shapes(self, x: torch.Tensor) -> dict[str, tuple]:
        """Shapes of every named stage for one forward pass (inference mode)."""
        trace: dict[str, tuple] = {}
        self.eval()
        with torch.no_grad():
            self._forward_impl(x, trace)
        return trace


def _tr(trace: dict | None, name: str, *tensors: torch.Tensor) -> None:
    if trace is not None:
        shapes = tuple(tuple(t.shape) for t in tensors)
        trace[name] = shapes if len(shapes) > 1 else shapes[0]


def _check_patch_batch(x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != PATCH_SIDE or x.shape[3] != PATCH_SIDE:
        raise ShapeMismatchError(
            f"expected (B, 1, {PATCH_SIDE}, {PATCH_SIDE}), got {tuple(x.shape)}"
        )


def make_variant(
    variant: AblationVariant,
    cfg: NetConfig = NetConfig(),
    attention: AttentionConfig = AttentionConfig(),
    seed: int | None = None,
) -> IsapadNet:
    """Build a network of the requested topology (seeded init when ``seed`` given)."""
    if seed is not None:
        torch.manual_seed(seed)
    return IsapadNet(variant=variant, cfg=cfg, attention=attention)


def forward_pass(net: IsapadNet, x: torch.Tensor, mode: str = "infer"):
    """Run a batch through the net; returns (logits, probs).

    ``infer`` uses eval mode under no_grad; ``train`` leaves autograd on.
    """
    if mode == "infer":
        net.eval()
        with torch.no_grad():
            logits = net(x)
    elif mode == "train":
        net.train()
        logits = net(x)
    else:
        raise DomainError(f"mode must be 'train' or 'infer', got {mode!r}")
    return logits, torch.softmax(logits, dim=-1)


# ---------------------------------------------------------------------------
# interpretation helpers
# ---------------------------------------------------------------------------

def grad_cam(
    net: nn.Module,
    patch: torch.Tensor,
    target_class: int,
    layer: str = "head_conv",
) -> np.ndarray:
    """Class activation map at the named layer, min-max normalized to [0, 1].

    The map is ReLU(sum_c alpha_c * A_c) where A are the layer's activations
    and alpha_c the spatial mean of d logit[target] / d A_c; identically-zero
    maps stay all-zero.  Returned at the layer's own spatial size.
    """
    if not 0 <= target_class < N_CLASSES:
        raise DomainError(f"target_class must be in [0, {N_CLASSES}), got {target_class}")
    module = dict(net.named_modules()).get(layer)
    if module is None:
        raise DomainError(f"net has no layer named {layer!r}")

    if patch.ndim == 2:
        patch = patch.unsqueeze(0).unsqueeze(0)
    elif patch.ndim == 3:
        patch = patch.unsqueeze(0)

    acts: list[torch.Tensor] = []

    def hook(_mod, _inp, out):
        acts.append(out)

    handle = module.register_forward_hook(hook)
    try:
        net.eval()
        logits = net(patch)
    finally:
        handle.remove()

    a = acts[0]
    grads = torch.autograd.grad(logits[0, target_class], a, allow_unused=False)[0]
    weights = grads.mean(dim=(-2, -1), keepdim=True)
    cam = F.relu((weights * a).sum(dim=1))[0].detach()
    return _minmax(cam.numpy())


def _minmax(cam: np.ndarray) -> np.ndarray:
    hi = float(cam.max(initial=0.0))
    if hi <= 0.0:
        return np.zeros_like(cam, dtype=np.float32)
    lo = float(cam.min())
    if hi == lo:
        return np.ones_like(cam, dtype=np.float32)
    return ((cam - lo) / (hi - lo)).astype(np.float32)


def upsample_heatmap(cam: np.ndarray, size: tuple[int, int] = (PATCH_SIDE, PATCH_SIDE)) -> np.ndarray:
    """Bilinearly upsample a CAM to export size (values stay in [0, 1])."""
    t = torch.from_numpy(np.asarray(cam, dtype=np.float32))[None, None]
    up = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def export_features(net: IsapadNet, patches: list[np.ndarray], batch_size: int = 16) -> np.ndarray:
    """Global-average-pooled head activations, one row per patch."""
    if not patches:
        return np.zeros((0, net.feature_dim), dtype=np.float32)
    net.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            chunk = patches[i : i + batch_size]
            batch = torch.stack(
                [torch.from_numpy(np.array(p, dtype=np.float32)) for p in chunk]
            ).unsqueeze(1)
            rows.append(net.pooled_features(batch).numpy())
    return np.concatenate(rows, axis=0)
