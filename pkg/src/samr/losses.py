"""Training objectives: adversarial, feature matching, GDL, shape consistency, total."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ValidationError

GDL_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    feature_matching: float = 5.0
    consistency: float = 1.0

    def __post_init__(self):
        if self.feature_matching < 0 or self.consistency < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class LossReport:
    gan: list[float]
    fm: list[float]
    consistency: float
    total: float
    consistency_terms: tuple[float, float] = (0.0, 0.0)
    d_losses: list[float] = field(default_factory=list)

    @property
    def gan_sum(self) -> float:
        return float(sum(self.gan))

    @property
    def fm_sum(self) -> float:
        return float(sum(self.fm))

    def recompute_total(self, weights: LossWeights) -> float:
        return self.gan_sum + weights.feature_matching * self.fm_sum + weights.consistency * self.consistency

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(gan_sum=self.gan_sum, fm_sum=self.fm_sum)
        return d


def _check_finite(*ts):
    for t in ts:
        if not torch.isfinite(t).all():
            raise NumericalError("non-finite discriminator logits")


def gan_loss(real_logits: torch.Tensor | None, fake_logits: torch.Tensor, side: str,
             mode: str = "log") -> torch.Tensor:
    """Patch-averaged adversarial loss.

    ``side="D"``: negated log-likelihood of real-as-real plus fake-as-fake.
    ``side="G"``: non-saturating ``-log D(fake)``. ``mode="lsgan"`` swaps
    in least-squares targets.
    """
    if side not in ("D", "G"):
        raise ValueError(f"side must be 'D' or 'G', got {side!r}")
    if mode not in ("log", "lsgan"):
        raise ConfigError(f"unknown adversarial mode {mode!r}")
    _check_finite(fake_logits)
    if side == "G":
        if mode == "lsgan":
            return ((fake_logits - 1) ** 2).mean()
        return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    if real_logits is None:
        raise ValueError("discriminator side needs real logits")
    _check_finite(real_logits)
    if mode == "lsgan":
        return ((real_logits - 1) ** 2).mean() + (fake_logits**2).mean()
    return (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
            + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))


def feature_matching(real_feats: list[torch.Tensor], fake_feats: list[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the squared L2 feature distance divided by the layer's element count.

    Real features are detached so only the fake branch carries gradient.
    """
    if len(real_feats) != len(fake_feats):
        raise ValidationError(f"feature count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    total = fake_feats[0].new_zeros(())
    for r, f in zip(real_feats, fake_feats):
        if r.shape != f.shape:
            raise ValidationError(f"feature shape mismatch {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + ((r.detach() - f) ** 2).sum() / f.numel()
    return total


def gdl(r: torch.Tensor, s: torch.Tensor, eps: float = GDL_EPS) -> torch.Tensor:
    """1 - 2*sum(r*s) / (sum(r) + sum(s)), summed jointly over every pixel and class."""
    if r.shape != s.shape:
        raise ValidationError(f"GDL shape mismatch {tuple(r.shape)} vs {tuple(s.shape)}")
    if (s < 0).any() or (r < 0).any():
        raise ValidationError("GDL inputs must be non-negative")
    r = r.to(s.dtype)
    num = 2 * (r * s).sum() + eps
    den = r.sum() + s.sum() + eps
    return 1 - num / den


def consistency_loss(x, y, gx, unet) -> tuple[torch.Tensor, torch.Tensor]:
    """(GDL(x, U(y)), GDL(x, U(G(x)))). The first term only trains U."""
    if y.shape != gx.shape:
        raise ValidationError(f"real {tuple(y.shape)} and synthesized {tuple(gx.shape)} differ")
    return gdl(x, unet(y.detach())), gdl(x, unet(gx))


def total_generator_loss(gan_terms, fm_terms, consistency, weights: LossWeights = LossWeights(),
                         members: int = 6):
    """Weighted sum; one adversarial and one feature-matching term per discriminator."""
    if len(gan_terms) != members or len(fm_terms) != members:
        raise ValidationError(
            f"expected {members} adversarial and feature-matching terms, got {len(gan_terms)} and {len(fm_terms)}")
    return (sum(gan_terms) + weights.feature_matching * sum(fm_terms)
            + weights.consistency * consistency)
