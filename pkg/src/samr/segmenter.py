"""U-net lesion segmenter with a softmax head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from . import NUM_CLASSES, NUM_SEQUENCES
from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 4
    base: int = 32
    in_channels: int = NUM_SEQUENCES
    classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.depth < 2 or self.base < 1:
            raise ConfigError("U-net depth must be >= 2 with a positive base width")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_UNET = UnetConfig()
TEST_UNET = UnetConfig(depth=3, base=16)


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, cfg: UnetConfig = TEST_UNET):
        super().__init__()
        self.cfg = cfg
        w = [cfg.base * 2**i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList(
            [_double_conv(cfg.in_channels, w[0])] + [_double_conv(w[i], w[i + 1]) for i in range(cfg.depth)])
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in reversed(range(cfg.depth)))
        self.dec = nn.ModuleList(_double_conv(2 * w[i], w[i]) for i in reversed(range(cfg.depth)))
        self.head = nn.Conv2d(w[0], cfg.classes, 1)

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        n = 2**self.cfg.depth
        if img.ndim != 4 or img.shape[1] != self.cfg.in_channels or img.shape[-1] % n or img.shape[-2] % n:
            raise ValidationError(
                f"U-net input {tuple(img.shape)} needs {self.cfg.in_channels} channels and sides divisible by {n}")
        skips = []
        h = img
        for i, block in enumerate(self.down):
            h = block(h)
            if i < self.cfg.depth:
                skips.append(h)
                h = self.pool(h)
        for up, dec in zip(self.up, self.dec):
            h = up(h)
            h = dec(torch.cat([skips.pop(), h], dim=1))
        return self.head(h)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(img), dim=1)


def build_unet(cfg: UnetConfig = TEST_UNET) -> UNet:
    return UNet(cfg)


@torch.no_grad()
def segment(u: UNet, img) -> torch.Tensor:
    """Inference-mode class probabilities for ``(5, H, W)`` or ``(N, 5, H, W)`` input."""
    img = torch.as_tensor(img, dtype=torch.float32)
    single = img.ndim == 3
    if single:
        img = img[None]
    was_training = u.training
    u.eval()
    try:
        p = u(img)
    finally:
        u.train(was_training)
    return p[0] if single else p


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
