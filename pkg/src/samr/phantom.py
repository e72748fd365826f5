"""Deterministic 2D brain phantoms with nested lesions, plus the mean atlas.

Geometry is expressed in fractions of the image side so one parameter set
works for every size preset. Each patient is a short stack of axial slices;
brain outline, ventricles and lesion extent vary smoothly along the stack.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import NUM_SEQUENCES
from .data import (
    DatasetManifest,
    InstanceRecord,
    load_archive,
    save_archive,
)
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

# fine tissue classes used for rendering; the label map folds WM/GM/CSF into "normal brain"
BG, WM, GM, CSF, EDEMA, CAVITY, TUMOR = range(7)
TISSUE_TO_LABEL = np.array([0, 1, 1, 1, 2, 3, 4], dtype=np.uint8)

# per tissue: means for (T1w, Gd-T1w, T2w, FLAIR, APTw). APTw separates tumor
# (bright) from cavity (dark) while the anatomic sequences make CSF and cavity
# look alike.
DEFAULT_CONTRAST = {
    BG: (-1.0, -1.0, -1.0, -1.0, -1.0),
    WM: (0.50, 0.45, -0.35, 0.00, -0.25),
    GM: (0.15, 0.15, 0.05, 0.25, -0.10),
    CSF: (-0.65, -0.65, 0.80, -0.60, 0.00),
    EDEMA: (-0.15, -0.10, 0.50, 0.65, 0.15),
    CAVITY: (-0.70, -0.70, 0.85, -0.45, -0.65),
    TUMOR: (0.00, 0.85, 0.30, 0.40, 0.85),
}
DEFAULT_NOISE = {BG: 0.0, WM: 0.02, GM: 0.02, CSF: 0.02, EDEMA: 0.02, CAVITY: 0.02, TUMOR: 0.02}


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    size: int = 256
    slices: int = 15
    # semi-axes of the brain ellipse at the middle slice (horizontal, vertical)
    brain_a: tuple[float, float] = (0.33, 0.39)
    brain_b: tuple[float, float] = (0.40, 0.45)
    cortex: float = 0.05
    ventricle_a: tuple[float, float] = (0.04, 0.07)
    ventricle_b: tuple[float, float] = (0.10, 0.16)
    ventricle_offset: tuple[float, float] = (0.06, 0.09)
    lesion_prob: float = 0.9
    tumor_radius: tuple[float, float] = (0.06, 0.10)
    edema_margin: tuple[float, float] = (0.03, 0.06)
    cavity_prob: float = 0.5
    cavity_radius: tuple[float, float] = (0.03, 0.05)
    bias_amplitude: float = 0.04
    blur: float = 0.5 / 64  # Gaussian sigma as a fraction of the side
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    max_retries: int = 20

    def __post_init__(self):
        if self.size < 8:
            raise ConfigError(f"image size {self.size} too small")
        if self.slices < 3:
            raise ConfigError("need at least 3 slices per patient")
        for name in ("brain_a", "brain_b", "ventricle_a", "ventricle_b", "tumor_radius",
                     "edema_margin", "cavity_radius", "ventricle_offset"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        if not 0 <= self.lesion_prob <= 1 or not 0 <= self.cavity_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        for t, means in self.contrast.items():
            if len(means) != NUM_SEQUENCES or any(abs(v) > 1 for v in means):
                raise ConfigError(f"contrast means for tissue {t} must be 5 values in [-1, 1]")
        if any(s < 0 for s in self.noise.values()):
            raise ConfigError("noise sigma must be >= 0")


@dataclass
class PhantomInstance:
    labels: np.ndarray  # (H, W) uint8
    images: np.ndarray  # (5, H, W) float32
    patient_id: int
    slice_index: int


def _u(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def _ellipse(yy, xx, cy, cx, a, b):
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2


def _draw_anatomy(rng, p: PhantomParams) -> dict:
    return dict(
        a=_u(rng, p.brain_a),
        b=_u(rng, p.brain_b),
        cy=0.5 + float(rng.uniform(-0.02, 0.02)),
        va=_u(rng, p.ventricle_a),
        vb=_u(rng, p.ventricle_b),
        voff=_u(rng, p.ventricle_offset),
        bias=rng.normal(size=3),
    )


def _draw_lesion(rng, p: PhantomParams, anat: dict) -> dict:
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    r_t = _u(rng, p.tumor_radius)
    r_e = r_t + _u(rng, p.edema_margin)
    ang = float(rng.uniform(0, 2 * np.pi))
    return dict(
        present=bool(rng.uniform() < p.lesion_prob),
        # center in normalized ellipse coordinates, kept off the midline
        u=side * float(rng.uniform(0.25, 0.6)),
        v=float(rng.uniform(-0.5, 0.5)),
        r_tumor=r_t,
        r_edema=r_e,
        aspect=float(rng.uniform(0.8, 1.25)),
        cavity=bool(rng.uniform() < p.cavity_prob),
        r_cavity=_u(rng, p.cavity_radius),
        cav_angle=ang,
        s0=float(rng.uniform(0.3, 0.7) * (p.slices - 1)),
        half=float(rng.uniform(0.35, 0.6) * p.slices),
    )


def _lesion_ok(anat: dict, les: dict) -> bool:
    # edema ellipse (plus cavity) must sit well inside the smaller brain semi-axis
    reach = les["r_edema"] * max(les["aspect"], 1 / les["aspect"]) + les["r_cavity"] * les["cavity"]
    cx = les["u"] * anat["a"]
    cy = les["v"] * anat["b"]
    inside = (cx / anat["a"]) ** 2 + (cy / anat["b"]) ** 2 < 0.5
    return inside and reach < 0.6 * min(anat["a"], anat["b"])


def _tissue_slice(p: PhantomParams, anat: dict, les: dict | None, s: int) -> np.ndarray:
    n = p.size
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / n
    mid = (p.slices - 1) / 2
    d = (s - mid) / (mid + 1)
    shrink = np.sqrt(1 - 0.45 * d**2)
    a, b = anat["a"] * shrink, anat["b"] * shrink
    cy, cx = anat["cy"], 0.5
    t = np.zeros((n, n), dtype=np.uint8)
    r = _ellipse(yy, xx, cy, cx, a, b)
    brain = r <= 1.0
    t[brain] = GM
    inner_a, inner_b = a - p.cortex, b - p.cortex
    t[_ellipse(yy, xx, cy, cx, inner_a, inner_b) <= 1.0] = WM
    vscale = max(0.0, 1 - (abs(d) / 0.55) ** 2)
    if vscale > 0:
        for sgn in (-1, 1):
            v = _ellipse(yy, xx, cy - 0.02, cx + sgn * anat["voff"], anat["va"] * np.sqrt(vscale),
                         anat["vb"] * np.sqrt(vscale))
            t[(v <= 1.0) & brain] = CSF
    if les is not None and les["present"]:
        dz = abs(s - les["s0"]) / les["half"]
        if dz < 1:
            f = 0.5 + 0.5 * np.sqrt(1 - dz**2)
            lx = cx + les["u"] * anat["a"]
            ly = cy + les["v"] * anat["b"]
            asp = les["aspect"]
            re, rt = les["r_edema"] * f, les["r_tumor"] * f
            t[(_ellipse(yy, xx, ly, lx, re * asp, re / asp) <= 1) & brain] = EDEMA
            if les["cavity"]:
                rc = les["r_cavity"] * f
                ox = lx + rt * np.cos(les["cav_angle"]) * 0.8
                oy = ly + rt * np.sin(les["cav_angle"]) * 0.8
                t[(_ellipse(yy, xx, oy, ox, rc, rc) <= 1) & brain] = CAVITY
            t[(_ellipse(yy, xx, ly, lx, rt * asp, rt / asp) <= 1) & brain] = TUMOR
    return t


def render(tissue: np.ndarray, p: PhantomParams, bias_coef: np.ndarray, rng) -> np.ndarray:
    """Tissue classes -> (5, H, W) intensities in [-1, 1]."""
    n = tissue.shape[0]
    means = np.array([p.contrast[k] for k in range(7)], dtype=np.float64)  # (7, 5)
    sig = np.array([p.noise[k] for k in range(7)], dtype=np.float64)
    clean = np.moveaxis(means[tissue], -1, 0)  # (5, H, W)
    yy, xx = (np.mgrid[0:n, 0:n] + 0.5) / n - 0.5
    bias = p.bias_amplitude * (bias_coef[0] * xx + bias_coef[1] * yy + bias_coef[2] * xx * yy * 2)
    inside = tissue != BG
    clean = clean + np.where(inside, bias, 0.0)[None]
    if p.blur > 0:
        sigma = p.blur * n
        clean = np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in clean])
    noise = rng.normal(size=clean.shape) * sig[tissue][None]
    return np.clip(clean + noise, -1.0, 1.0).astype(np.float32)


def generate_patient(params: PhantomParams, patient_id: int, healthy: bool = False) -> list[PhantomInstance]:
    """All slices of one synthetic patient.

    ``healthy=True`` renders the same anatomy and noise with the lesion
    removed; those renders feed the atlas.
    """
    rng = np.random.default_rng([params.seed, patient_id])
    anat = _draw_anatomy(rng, params)
    for _ in range(params.max_retries):
        les = _draw_lesion(rng, params, anat)
        if _lesion_ok(anat, les):
            break
    else:
        raise ValidationError(
            f"patient {patient_id}: no admissible lesion geometry after {params.max_retries} draws"
        )
    noise_rng = np.random.default_rng([params.seed, patient_id, 1])
    out = []
    for s in range(params.slices):
        tissue = _tissue_slice(params, anat, None if healthy else les, s)
        img = render(tissue, params, anat["bias"], noise_rng)
        out.append(PhantomInstance(TISSUE_TO_LABEL[tissue], img, patient_id, s))
    return out


def build_atlas(groups: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Per-slice pixelwise mean, stacked as (prev, current, next) x sequences.

    ``groups[s]`` holds the healthy MR instances at slice index ``s``. Volume
    ends replicate the boundary slice.
    """
    if len(groups) < 3:
        raise ValidationError(f"need >= 3 slice indices, got {len(groups)}")
    means = []
    for s, group in enumerate(groups):
        if len(group) == 0:
            raise ValidationError(f"empty atlas group at slice index {s}")
        acc = np.zeros(np.shape(group[0]), dtype=np.float64)
        for img in group:
            acc += img
        means.append((acc / len(group)).astype(np.float32))
    last = len(means) - 1
    return [
        np.concatenate([means[max(s - 1, 0)], means[s], means[min(s + 1, last)]], axis=0)
        for s in range(len(means))
    ]


def split_patients(patient_ids: Sequence[int], ratio: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = list(patient_ids)
    if len(ids) < 2:
        raise ConfigError("need at least 2 patients to split")
    n_train = min(max(int(round(len(ids) * ratio)), 1), len(ids) - 1)
    order = np.random.default_rng([seed, 0xD5]).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def make_dataset(params: PhantomParams, n_patients: int, out_dir, split_ratio: float = 0.8) -> DatasetManifest:
    """Generate a patient-level split corpus on disk and return its manifest.

    Writes ``labels/``, ``images/``, ``healthy/`` (training patients rendered
    without lesions) and ``atlas/``; the atlas is built from training
    patients only.
    """
    if n_patients < 2:
        raise ConfigError("n_patients must be >= 2")
    out = Path(out_dir)
    train, test = split_patients(range(n_patients), split_ratio, params.seed)
    train_set = set(train)
    groups: list[list[np.ndarray]] = [[] for _ in range(params.slices)]
    records = []
    for pid in range(n_patients):
        split = "train" if pid in train_set else "test"
        for inst in generate_patient(params, pid):
            stem = f"p{pid:04d}_s{inst.slice_index:02d}.arc"
            save_archive(inst.labels, out / "labels" / stem, role="label")
            save_archive(inst.images, out / "images" / stem, role="mri")
            records.append(InstanceRecord(
                patient_id=pid, slice_index=inst.slice_index, split=split,
                mask=f"labels/{stem}", image=f"images/{stem}",
                atlas=f"atlas/s{inst.slice_index:02d}.arc", seed=params.seed,
            ))
        if split == "train":
            for inst in generate_patient(params, pid, healthy=True):
                save_archive(inst.images, out / "healthy" / f"p{pid:04d}_s{inst.slice_index:02d}.arc", role="mri")
                groups[inst.slice_index].append(inst.images)
    for s, stack in enumerate(build_atlas(groups)):
        save_archive(stack, out / "atlas" / f"s{s:02d}.arc", role="atlas")
    man = DatasetManifest(records=records, root=out)
    man.check_split()
    man.write()
    log.info("wrote %d instances (%d train / %d test patients) to %s",
             len(records), len(train), len(test), out)
    return man


def atlas_from_dir(in_dir, out_dir) -> list[Path]:
    """Rebuild atlas stacks from ``in_dir/healthy/p*_sNN.arc`` files."""
    files = sorted(Path(in_dir, "healthy").glob("p*_s*.arc"))
    if not files:
        raise FileNotFoundError(Path(in_dir, "healthy"))
    by_slice: dict[int, list[np.ndarray]] = {}
    for f in files:
        s = int(f.stem.split("_s")[-1])
        by_slice.setdefault(s, []).append(load_archive(f, role="mri"))
    n = max(by_slice) + 1
    groups = [by_slice.get(s, []) for s in range(n)]
    return [save_archive(stack, Path(out_dir) / f"s{s:02d}.arc", role="atlas")
            for s, stack in enumerate(build_atlas(groups))]


def with_size(params: PhantomParams, size: int) -> PhantomParams:
    return replace(params, size=size)
