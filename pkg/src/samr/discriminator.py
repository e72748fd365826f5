"""Multi-scale label-wise PatchGAN discriminators.

The bank holds one discriminator per (ROI, scale) pair: ROIs background,
normal brain and lesion at full and half resolution, six members in all.
Each member sees the ROI-masked mask and image concatenated along channels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import NUM_CLASSES, NUM_SEQUENCES
from .errors import ConfigError, ValidationError
from .generator import init_weights
from .maskops import apply_roi, reorganize_rois

ROIS = ("background", "brain", "lesion")
SCALES = (1, 2)  # down-sampling factor


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = NUM_CLASSES + NUM_SEQUENCES
    base: int = 64
    layers: int = 4
    labelwise: bool = True

    def __post_init__(self):
        if self.in_channels != NUM_CLASSES + NUM_SEQUENCES:
            raise ConfigError(f"discriminator input must be {NUM_CLASSES}+{NUM_SEQUENCES} channels")
        if self.layers < 2 or self.base < 1:
            raise ConfigError("need >= 2 conv layers and a positive base width")

    @property
    def widths(self) -> list[int]:
        return [self.base * min(2**i, 8) for i in range(self.layers)]

    @property
    def depth(self) -> int:
        """Feature maps exposed per member: every conv layer plus the logit head."""
        return self.layers + 1

    def keys(self) -> list[tuple[str, int]]:
        rois = ROIS if self.labelwise else ("whole",)
        return [(roi, s) for roi in rois for s in SCALES]

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_D = DiscriminatorConfig()
TEST_D = DiscriminatorConfig(base=16)


class PatchOutput(NamedTuple):
    logits: torch.Tensor
    features: list[torch.Tensor]


class PatchDiscriminator(nn.Module):
    """Stride-2 convs except the last, kernel 4, padding 2, then a 1-channel head."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        w = cfg.widths
        blocks = [nn.Sequential(nn.Conv2d(cfg.in_channels, w[0], 4, stride=2, padding=2),
                                nn.LeakyReLU(0.2, inplace=True))]
        for i in range(1, cfg.layers):
            stride = 2 if i < cfg.layers - 1 else 1
            blocks.append(nn.Sequential(
                nn.Conv2d(w[i - 1], w[i], 4, stride=stride, padding=2),
                nn.InstanceNorm2d(w[i]),
                nn.LeakyReLU(0.2, inplace=True),
            ))
        blocks.append(nn.Conv2d(w[-1], 1, 4, stride=1, padding=2))
        self.blocks = nn.ModuleList(blocks)
        init_weights(self)

    def forward(self, inp: torch.Tensor) -> PatchOutput:
        feats = []
        h = inp
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return PatchOutput(h, feats)


def patch_grid(n: int, layers: int = 4) -> int:
    """Side of the logit grid for an ``n``-pixel input (conv shape arithmetic)."""
    for i in range(layers):
        stride = 2 if i < layers - 1 else 1
        n = (n + 2 * 2 - 4) // stride + 1
    return n + 2 * 2 - 4 + 1


class DiscriminatorBank(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = TEST_D):
        super().__init__()
        self.cfg = cfg
        self.keys = cfg.keys()
        self.members = nn.ModuleList(PatchDiscriminator(cfg) for _ in self.keys)

    def __len__(self) -> int:
        return len(self.members)

    def roi_planes(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.labelwise:
            return reorganize_rois(x)
        return torch.ones_like(x[:, :1])

    def condition(self, x, y, rois, k: int) -> tuple[torch.Tensor, torch.Tensor]:
        return condition_inputs(x, y, rois, k, self.keys)

    def forward_member(self, k: int, pair: tuple[torch.Tensor, torch.Tensor]) -> PatchOutput:
        return forward_with_features(self.members[k], pair)

    def forward(self, x, y, rois=None) -> list[PatchOutput]:
        rois = self.roi_planes(x) if rois is None else rois
        return [self.forward_member(k, self.condition(x, y, rois, k)) for k in range(len(self))]


def condition_inputs(x, y, rois, k: int, keys=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Mask both mask and image with the member's ROI, then pool if half-scale.

    ``rois`` is ``(N, R, H, W)``; ``k`` indexes the bank (0-based). Masking
    happens before pooling.
    """
    keys = keys or PAPER_D.keys()
    if not 0 <= k < len(keys):
        raise ValidationError(f"discriminator index {k} outside 0..{len(keys) - 1}")
    if x.shape[-2:] != y.shape[-2:] or rois.shape[-2:] != x.shape[-2:]:
        raise ValidationError(f"shape mismatch: mask {tuple(x.shape)}, image {tuple(y.shape)}, rois {tuple(rois.shape)}")
    roi_idx = k // len(SCALES)
    scale = keys[k][1]
    c = rois[:, roi_idx:roi_idx + 1]
    xh, yh = apply_roi(c, x), apply_roi(c, y)
    if scale > 1:
        xh = F.avg_pool2d(xh, scale)
        yh = F.avg_pool2d(yh, scale)
    return xh, yh


def forward_with_features(d: PatchDiscriminator, pair) -> PatchOutput:
    xh, yh = pair
    return d(torch.cat([xh, yh], dim=1))


def build_bank(cfg: DiscriminatorConfig = TEST_D) -> DiscriminatorBank:
    return DiscriminatorBank(cfg)
