"""ROI reorganization and lesion-mask edits.

All edits take and return label maps ``(H, W)`` with values 0..4 and keep
every lesion pixel inside the brain (label != 0). When labels compete for a
pixel the stronger one wins: tumor > cavity > edema > normal brain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import LESION_LABELS
from .data import check_label_map, check_one_hot
from .errors import ManipulationError, ValidationError

BACKGROUND, BRAIN, EDEMA, CAVITY, TUMOR = range(5)
OPS = ("mirror", "scale_tumor", "translate", "transplant")


def reorganize_rois(x: np.ndarray) -> np.ndarray:
    """One-hot ``(5, ...)`` -> ROI planes ``(3, ...)``: background, normal brain, lesion.

    Works on numpy arrays and torch tensors alike (batched inputs carry the
    class axis at position -3).
    """
    if isinstance(x, np.ndarray) and x.ndim == 3:
        check_one_hot(x)
    bg = x[..., 0:1, :, :]
    brain = x[..., 1:2, :, :]
    lesion = x[..., 2:3, :, :] + x[..., 3:4, :, :] + x[..., 4:5, :, :]
    if isinstance(x, np.ndarray):
        return np.concatenate([bg, brain, lesion], axis=-3)
    import torch

    return torch.cat([bg, brain, lesion], dim=-3)


def apply_roi(c, t):
    """Elementwise ROI masking; ``c`` is ``(..., 1, H, W)`` or ``(H, W)`` and broadcasts over channels."""
    if c.shape[-2:] != t.shape[-2:]:
        raise ValidationError(f"ROI plane {tuple(c.shape[-2:])} does not match tensor {tuple(t.shape[-2:])}")
    if c.ndim == 2:
        c = c[None]
    return c * t


def lesion_support(m: np.ndarray) -> np.ndarray:
    return m >= EDEMA


def brain_support(m: np.ndarray) -> np.ndarray:
    return m != BACKGROUND


def _paste(base: np.ndarray, lesion: np.ndarray) -> np.ndarray:
    """Overlay nonzero lesion labels onto ``base`` inside its brain, stronger label winning."""
    out = base.copy()
    keep = (lesion >= EDEMA) & brain_support(base)
    out[keep] = np.maximum(out[keep], lesion[keep])
    return out


def _clear_lesion(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[lesion_support(m)] = BRAIN
    return out


def mirror_lesion(m: np.ndarray) -> np.ndarray:
    """Move the lesion to the opposite hemisphere by reflecting across the vertical midline."""
    m = check_label_map(m)
    if not lesion_support(m).any():
        return m.copy()
    reflected = np.where(lesion_support(m), m, 0)[:, ::-1]
    return _paste(_clear_lesion(m), reflected)


def translate_lesion(m: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """Shift all lesion labels by ``(dy, dx)`` pixels; pixels leaving the brain are dropped."""
    m = check_label_map(m)
    les = np.where(lesion_support(m), m, 0)
    if not les.any():
        return m.copy()
    dy, dx = (int(v) for v in shift)
    h, w = m.shape
    moved = np.zeros_like(les)
    ys, ye = max(dy, 0), min(h + dy, h)
    xs, xe = max(dx, 0), min(w + dx, w)
    if ys < ye and xs < xe:
        moved[ys:ye, xs:xe] = les[ys - dy:ye - dy, xs - dx:xe - dx]
    out = _paste(_clear_lesion(m), moved)
    if not lesion_support(out).any():
        raise ManipulationError(f"translation {shift} moves the lesion out of the brain")
    return out


def scale_tumor(m: np.ndarray, factor: float) -> np.ndarray:
    """Rescale the tumor's area by ``factor`` about its centroid.

    Nearest-neighbour resampling of the binary tumor support by sqrt(factor)
    per axis. Pixels the tumor gives up become edema; grown pixels stay
    inside the brain.
    """
    m = check_label_map(m)
    if factor <= 0:
        raise ManipulationError(f"scale factor must be > 0, got {factor}")
    if factor == 1.0:
        return m.copy()
    tumor = m == TUMOR
    if not tumor.any():
        raise ManipulationError("no tumor to scale")
    s = float(np.sqrt(factor))
    ys, xs = np.nonzero(tumor)
    cy, cx = ys.mean(), xs.mean()
    h, w = m.shape
    gy, gx = np.mgrid[0:h, 0:w]
    src_y = np.rint(cy + (gy - cy) / s).astype(int)
    src_x = np.rint(cx + (gx - cx) / s).astype(int)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    scaled = np.zeros_like(tumor)
    scaled[valid] = tumor[src_y[valid], src_x[valid]]
    scaled &= brain_support(m)
    out = m.copy()
    out[tumor & ~scaled] = EDEMA
    out[scaled] = TUMOR
    return out


def transplant_lesion(recipient: np.ndarray, donor: np.ndarray) -> np.ndarray:
    """Replace the recipient's lesion with the donor's, at the donor's coordinates."""
    recipient = check_label_map(recipient)
    donor = check_label_map(donor)
    if recipient.shape != donor.shape:
        raise ValidationError(f"donor shape {donor.shape} != recipient shape {recipient.shape}")
    les = np.where(lesion_support(donor), donor, 0)
    if not les.any():
        raise ManipulationError("donor has no lesion labels")
    if not (lesion_support(donor) & brain_support(recipient)).any():
        raise ManipulationError("donor lesion lies entirely outside the recipient brain")
    return _paste(_clear_lesion(recipient), les)


@dataclass
class ManipulationSpec:
    op: str
    factor: float = 1.0
    shift: tuple[int, int] = (0, 0)
    donor: int | None = None  # index into the donor pool
    seed: int = 0

    def __post_init__(self):
        if self.op not in OPS:
            raise ManipulationError(f"unknown manipulation {self.op!r}")
        if self.op == "scale_tumor" and self.factor <= 0:
            raise ManipulationError("scale factor must be > 0")
        if self.op == "transplant" and self.donor is None:
            raise ManipulationError("transplant needs a donor")


@dataclass
class ManipulationRanges:
    """Sampling ranges for random edits. Shifts are fractions of the image side."""
    scale: tuple[float, float] = (0.5, 2.0)
    shift: float = 0.15
    max_ops: int = 2
    max_retries: int = 20
    ops: Sequence[str] = field(default_factory=lambda: OPS)


def apply_spec(m: np.ndarray, spec: ManipulationSpec, donors: Sequence[np.ndarray] = ()) -> np.ndarray:
    if spec.op == "mirror":
        return mirror_lesion(m)
    if spec.op == "scale_tumor":
        return scale_tumor(m, spec.factor)
    if spec.op == "translate":
        return translate_lesion(m, spec.shift)
    return transplant_lesion(m, donors[spec.donor])


def plan_manipulations(rng: np.random.Generator, size: int, n_donors: int,
                       ranges: ManipulationRanges | None = None) -> list[ManipulationSpec]:
    """Draw one or two edits with a uniform choice of operation."""
    ranges = ranges or ManipulationRanges()
    ops = [o for o in ranges.ops if o != "transplant" or n_donors > 0]
    n_ops = int(rng.integers(1, ranges.max_ops + 1))
    specs = []
    for _ in range(n_ops):
        op = ops[int(rng.integers(len(ops)))]
        lo, hi = np.log(ranges.scale[0]), np.log(ranges.scale[1])
        factor = float(np.exp(rng.uniform(lo, hi)))
        lim = max(1, int(round(ranges.shift * size)))
        shift = (int(rng.integers(-lim, lim + 1)), int(rng.integers(-lim, lim + 1)))
        donor = int(rng.integers(n_donors)) if n_donors else None
        specs.append(ManipulationSpec(op=op, factor=factor, shift=shift,
                                      donor=donor if op == "transplant" else None))
    return specs


def random_manipulate(m: np.ndarray, seed: int, donors: Sequence[np.ndarray] = (),
                      ranges: ManipulationRanges | None = None) -> np.ndarray:
    """Seeded random composition of edits; failed draws are resampled."""
    m = check_label_map(m)
    ranges = ranges or ManipulationRanges()
    rng = np.random.default_rng([seed, 0x3A5C])
    for _ in range(ranges.max_retries):
        specs = plan_manipulations(rng, m.shape[0], len(donors), ranges)
        try:
            out = m
            for spec in specs:
                out = apply_spec(out, spec, donors)
        except ManipulationError:
            continue
        return out
    # lesion-free maps with no usable donor: nothing to edit
    if not lesion_support(m).any() and not len(donors):
        return m.copy()
    raise ManipulationError(f"no admissible manipulation after {ranges.max_retries} draws")


def is_valid_label_map(m: np.ndarray) -> bool:
    try:
        check_label_map(m)
    except ValidationError:
        return False
    return not (lesion_support(m) & ~brain_support(m)).any()
