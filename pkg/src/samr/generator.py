"""Two-branch encoder / residual trunk / per-sequence decoder generator.

The lesion mask and the atlas stack are encoded by structurally identical
down-sampling modules (a 7x7 stride-1 layer followed by ``stages`` stride-2
layers, each conv -> batch norm -> ReLU). Their latents are concatenated,
pushed through residual blocks and decoded by one sub-module per sequence:
a residual block followed by the transposed mirror of the encoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from . import ATLAS_CHANNELS, NUM_CLASSES, NUM_SEQUENCES
from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 256
    base: int = 64
    stages: int = 5
    max_width: int = 512
    res_blocks: int = 9
    sequences: int = NUM_SEQUENCES
    mask_channels: int = NUM_CLASSES
    atlas_channels: int = ATLAS_CHANNELS
    norm: str = "batch"
    use_atlas: bool = True
    stretch_out: bool = True

    def __post_init__(self):
        if self.stages < 1 or self.size % (2 ** self.stages):
            raise ConfigError(f"image size {self.size} not divisible by 2^{self.stages}")
        if self.base < 1 or self.res_blocks < 0:
            raise ConfigError("base width must be positive and res_blocks non-negative")
        if self.norm not in ("batch", "instance"):
            raise ConfigError(f"unknown normalization {self.norm!r}")

    @property
    def widths(self) -> list[int]:
        """Output width of each encoder layer (1 + stages entries)."""
        return [min(self.base * 2**i, self.max_width) for i in range(self.stages + 1)]

    @property
    def latent_size(self) -> int:
        return self.size // 2**self.stages

    @property
    def trunk_width(self) -> int:
        return self.widths[-1] * (2 if self.use_atlas else 1)

    def to_dict(self) -> dict:
        return asdict(self)


# paper preset: 256 px, 5 stride-2 stages, 9 residual blocks, widths 64..512 per branch
PAPER_PRESET = GeneratorConfig()
TEST_PRESET = GeneratorConfig(size=64, base=16, stages=3, res_blocks=4)


def init_weights(module: nn.Module, std: float = 0.02) -> nn.Module:
    """GAN-style init: conv weights ~ N(0, std), norm scales ~ N(1, std), biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)
    return module


def _norm(kind: str, ch: int) -> nn.Module:
    return nn.BatchNorm2d(ch) if kind == "batch" else nn.InstanceNorm2d(ch, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            _norm(norm, ch),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3, bias=False),
            _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class DownsamplingModule(nn.Module):
    def __init__(self, in_ch: int, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.widths
        layers = [nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_ch, w[0], 7, stride=1, bias=False),
            _norm(cfg.norm, w[0]),
            nn.ReLU(inplace=True),
        )]
        for i in range(cfg.stages):
            layers.append(nn.Sequential(
                nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1, bias=False),
                _norm(cfg.norm, w[i + 1]),
                nn.ReLU(inplace=True),
            ))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class UpsamplingModule(nn.Module):
    """Residual block then the transposed mirror of a down-sampling module."""

    def __init__(self, in_ch: int, out_ch: int, cfg: GeneratorConfig):
        super().__init__()
        w = cfg.widths
        self.res = ResidualBlock(in_ch, cfg.norm)
        layers = []
        ch = in_ch
        for i in reversed(range(cfg.stages)):
            layers.append(nn.Sequential(
                nn.ConvTranspose2d(ch, w[i], 3, stride=2, padding=1, output_padding=1, bias=False),
                _norm(cfg.norm, w[i]),
                nn.ReLU(inplace=True),
            ))
            ch = w[i]
        layers.append(nn.Sequential(
            nn.ConvTranspose2d(ch, out_ch, 7, stride=1, padding=3),
            nn.Tanh(),
        ))
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        x = self.res(x)
        for layer in self.layers:
            x = layer(x)
        return x


class Latents(NamedTuple):
    mask: torch.Tensor
    atlas: torch.Tensor | None
    fused: torch.Tensor


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = TEST_PRESET):
        super().__init__()
        self.cfg = cfg
        self.mask_encoder = DownsamplingModule(cfg.mask_channels, cfg)
        self.atlas_encoder = DownsamplingModule(cfg.atlas_channels, cfg) if cfg.use_atlas else None
        self.trunk = nn.Sequential(*[ResidualBlock(cfg.trunk_width, cfg.norm) for _ in range(cfg.res_blocks)])
        if cfg.stretch_out:
            self.decoders = nn.ModuleList(
                UpsamplingModule(cfg.trunk_width, 1, cfg) for _ in range(cfg.sequences))
        else:
            self.decoders = nn.ModuleList([UpsamplingModule(cfg.trunk_width, cfg.sequences, cfg)])
        init_weights(self)

    def _check(self, x, a):
        c = self.cfg
        if x.ndim != 4 or x.shape[1] != c.mask_channels or tuple(x.shape[-2:]) != (c.size, c.size):
            raise ValidationError(f"mask batch shape {tuple(x.shape)} != (N, {c.mask_channels}, {c.size}, {c.size})")
        if c.use_atlas:
            if a is None or a.shape[1] != c.atlas_channels or a.shape[-2:] != x.shape[-2:] or a.shape[0] != x.shape[0]:
                shape = None if a is None else tuple(a.shape)
                raise ValidationError(f"atlas batch shape {shape} incompatible with mask {tuple(x.shape)}")

    def encode(self, x: torch.Tensor, a: torch.Tensor | None = None) -> Latents:
        self._check(x, a)
        zm = self.mask_encoder(x)
        if self.atlas_encoder is None:
            return Latents(zm, None, zm)
        za = self.atlas_encoder(a)
        return Latents(zm, za, torch.cat([zm, za], dim=1))

    def forward(self, x: torch.Tensor, a: torch.Tensor | None = None) -> torch.Tensor:
        z = self.trunk(self.encode(x, a).fused)
        return torch.cat([dec(z) for dec in self.decoders], dim=1)

    def layer_counts(self) -> dict:
        """Architecture introspection: counts of encoder layers, trunk blocks and decoder parts."""
        return {
            "mask_encoder_layers": len(self.mask_encoder.layers),
            "atlas_encoder_layers": 0 if self.atlas_encoder is None else len(self.atlas_encoder.layers),
            "trunk_blocks": len(self.trunk),
            "decoders": len(self.decoders),
            "decoder_res_blocks": [1 for _ in self.decoders],
            "decoder_layers": [len(d.layers) for d in self.decoders],
        }


def build_generator(cfg: GeneratorConfig = TEST_PRESET) -> Generator:
    return Generator(cfg)


def encode_branches(g: Generator, x: torch.Tensor, a: torch.Tensor | None) -> Latents:
    return g.encode(x, a)


@torch.no_grad()
def synthesize(g: Generator, x, a) -> torch.Tensor:
    """Inference-mode synthesis; accepts single instances ``(C, H, W)`` or batches."""
    single = x.ndim == 3
    x = torch.as_tensor(x, dtype=torch.float32)
    a = None if a is None else torch.as_tensor(a, dtype=torch.float32)
    if single:
        x = x[None]
        a = None if a is None else a[None]
    was_training = g.training
    g.eval()
    try:
        y = g(x, a if g.cfg.use_atlas else None)
    finally:
        g.train(was_training)
    return y[0] if single else y
