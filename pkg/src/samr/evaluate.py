"""Lesion segmentation metrics and the augmentation experiment harness.

Undefined metric values are NaN; aggregation skips them and reports how
many were skipped.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import DatasetManifest, decode_argmax
from .errors import ConfigError
from .phantom import PhantomParams, make_dataset
from .segmenter import UNet, segment

log = logging.getLogger(__name__)

CLASSES = {"edema": 2, "cavity": 3, "tumor": 4}
METRICS = ("dice", "hd95", "sensitivity", "specificity")
_CROSS = ndimage.generate_binary_structure(2, 1)

# Table 1 of the source study: 90 clinical patients, not reproducible here.
# w/o L_C tumor Dice is printed as "0771" in the original table.
REFERENCE = {
    "exp1_our": {"dice": (0.794, 0.813, 0.821), "hd95": (6.049, 1.568, 2.293),
                 "sensitivity": (0.789, 0.807, 0.841), "specificity": (0.997, 0.999, 0.999)},
    "exp2_our": {"dice": (0.745, 0.780, 0.772), "hd95": (8.779, 6.757, 4.735),
                 "sensitivity": (0.760, 0.788, 0.805), "specificity": (0.997, 0.999, 0.999)},
    "exp3_baseline": {"dice": (0.646, 0.613, 0.673), "hd95": (8.816, 7.856, 7.078),
                      "sensitivity": (0.661, 0.576, 0.687), "specificity": (0.996, 0.999, 0.998)},
    "wo_stretch_out": {"dice": (0.684, 0.713, 0.705), "hd95": (6.592, 5.059, 4.002),
                       "sensitivity": (0.708, 0.699, 0.719), "specificity": (0.997, 0.999, 0.999)},
    "wo_labelwise_d": {"dice": (0.753, 0.797, 0.785), "hd95": (7.844, 2.570, 2.719),
                       "sensitivity": (0.735, 0.780, 0.783), "specificity": (0.998, 0.999, 0.999)},
    "wo_atlas": {"dice": (0.677, 0.697, 0.679), "hd95": (13.909, 11.481, 7.123),
                 "sensitivity": (0.691, 0.689, 0.723), "specificity": (0.997, 0.999, 0.998)},
    "wo_consistency": {"dice": (0.728, 0.795, 0.771), "hd95": (8.604, 3.024, 3.233),
                       "sensitivity": (0.738, 0.777, 0.777), "specificity": (0.997, 0.999, 0.999)},
}


# --------------------------------------------------------------------------
# metrics


def dice(pred, truth) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(pred, truth).sum() / total)


def boundary(mask) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-connected erosion (image edge counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def surface_distances(pred, truth) -> np.ndarray:
    """Pooled nearest-boundary distances, pred->truth followed by truth->pred."""
    bp = np.argwhere(boundary(pred)).astype(np.float64)
    bt = np.argwhere(boundary(truth)).astype(np.float64)
    d_pt, _ = cKDTree(bt).query(bp)
    d_tp, _ = cKDTree(bp).query(bt)
    return np.concatenate([d_pt, d_tp])


def hd95(pred, truth) -> float:
    """95th percentile of symmetric boundary distances in pixels; NaN if exactly one side is empty."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if not pred.any() and not truth.any():
        return 0.0
    if not pred.any() or not truth.any():
        return float("nan")
    return float(np.percentile(surface_distances(pred, truth), 95))


def sensitivity_specificity(pred, truth) -> tuple[float, float]:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = np.sum(pred & truth)
    fn = np.sum(~pred & truth)
    tn = np.sum(~pred & ~truth)
    fp = np.sum(pred & ~truth)
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return float(sens), float(spec)


@dataclass
class MetricRow:
    cls: str
    dice: float
    hd95: float
    sensitivity: float
    specificity: float
    excluded: dict = field(default_factory=dict)


def instance_metrics(pred_labels: np.ndarray, true_labels: np.ndarray) -> dict[str, dict[str, float]]:
    out = {}
    for name, c in CLASSES.items():
        p, t = pred_labels == c, true_labels == c
        sens, spec = sensitivity_specificity(p, t)
        out[name] = {"dice": dice(p, t), "hd95": hd95(p, t), "sensitivity": sens, "specificity": spec}
    return out


def aggregate(per_instance: Sequence[dict]) -> list[MetricRow]:
    """Mean over instances per class; NaNs are skipped and counted."""
    rows = []
    for name in CLASSES:
        vals, excluded = {}, {}
        for m in METRICS:
            arr = np.array([d[name][m] for d in per_instance], dtype=np.float64)
            ok = ~np.isnan(arr)
            excluded[m] = int((~ok).sum())
            vals[m] = float(arr[ok].mean()) if ok.any() else float("nan")
        rows.append(MetricRow(cls=name, excluded=excluded, **vals))
    return rows


def evaluate_segmenter(u: UNet, images: torch.Tensor, labels: np.ndarray, batch_size: int = 32) -> list[MetricRow]:
    per = []
    for i in range(0, len(images), batch_size):
        probs = segment(u, images[i:i + batch_size]).numpy()
        for p, t in zip(probs, labels[i:i + batch_size]):
            per.append(instance_metrics(decode_argmax(p), t))
    return aggregate(per)


def mean_lesion_dice(rows: Sequence[MetricRow]) -> float:
    return float(np.mean([r.dice for r in rows]))


# --------------------------------------------------------------------------
# experiment harness


@dataclass(frozen=True)
class ArmSpec:
    name: str
    synth_mix: float = 0.5
    stretch_out: bool = True
    labelwise_d: bool = True
    atlas: bool = True
    consistency: bool = True
    reference: str | None = None


EXP1_ARMS = (ArmSpec("our", reference="exp1_our"),)
EXP2_ARMS = (ArmSpec("our_25", synth_mix=0.25, reference="exp2_our"),)
EXP3_ARMS = (ArmSpec("baseline", synth_mix=0.0, reference="exp3_baseline"),)
ABLATION_ARMS = (
    ArmSpec("wo_stretch_out", stretch_out=False, reference="wo_stretch_out"),
    ArmSpec("wo_labelwise_d", labelwise_d=False, reference="wo_labelwise_d"),
    ArmSpec("wo_atlas", atlas=False, reference="wo_atlas"),
    ArmSpec("wo_consistency", consistency=False, reference="wo_consistency"),
)
ALL_ARMS = {a.name: a for a in EXP1_ARMS + EXP2_ARMS + EXP3_ARMS + ABLATION_ARMS}
EXPERIMENT_ARMS = {
    "exp1": EXP1_ARMS, "exp2": EXP2_ARMS, "exp3": EXP3_ARMS, "ablation": EXP1_ARMS + ABLATION_ARMS,
    "table1": EXP1_ARMS + EXP2_ARMS + EXP3_ARMS + ABLATION_ARMS,
}


def select_arms(names: Sequence[str]) -> tuple[ArmSpec, ...]:
    unknown = [n for n in names if n not in ALL_ARMS]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; choose from {sorted(ALL_ARMS)}")
    return tuple(ALL_ARMS[n] for n in names)


@dataclass
class SuiteConfig:
    experiment: str = "exp1"
    seed: int = 0
    n_patients: int = 60
    split_ratio: float = 0.8
    phantom: PhantomParams = field(default_factory=lambda: PhantomParams(size=64))
    synth: "object" = None  # SynthTrainConfig; default filled lazily
    seg: "object" = None    # SegTrainConfig
    arms: Sequence[ArmSpec] = EXP1_ARMS + ABLATION_ARMS[2:3]
    out_dir: str | None = None


@dataclass
class ExperimentReport:
    experiment: str
    seed: int
    n_real: int
    arms: dict
    reference: dict
    runtime_s: float
    test_patients: list

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=float))
        return path

    def table(self) -> str:
        """Text table: one row per arm, Dice / HD95 / sensitivity / specificity x (edema, cavity, tumor)."""
        head = f"{'arm':<18}" + "".join(f"{m[:5]:>8}{'':>16}" for m in METRICS)
        sub = f"{'':<18}" + "".join(f"{'ede':>8}{'cav':>8}{'tum':>8}" for _ in METRICS)
        lines = [f"{self.experiment}  seed={self.seed}  real={self.n_real}", head, sub]

        def fmt(cells):
            return "".join(f"{v:>8.3f}" if v == v else f"{'nan':>8}" for v in cells)

        for name, arm in self.arms.items():
            rows = {r["cls"]: r for r in arm["rows"]}
            cells = [rows[c][m] for m in METRICS for c in CLASSES]
            lines.append(f"{name:<18}{fmt(cells)}")
            ref = arm.get("reference")
            if ref:
                rc = [v for m in METRICS for v in self.reference[ref][m]]
                lines.append(f"{'  (ref, 90 pts)':<18}{fmt(rc)}")
        return "\n".join(lines)


def run_experiment(suite: SuiteConfig) -> ExperimentReport:
    """Generate data, then train and evaluate every arm on the same held-out patients."""
    from .trainer import (
        SegTrainConfig,
        SynthTrainConfig,
        load_split,
        train_segmentation,
        train_synthesis,
    )

    if not suite.arms:
        raise ConfigError("experiment needs at least one arm")
    t0 = time.time()
    out = Path(suite.out_dir) if suite.out_dir else None
    synth_cfg = suite.synth or SynthTrainConfig()
    seg_cfg = suite.seg or SegTrainConfig()
    phantom = replace(suite.phantom, seed=suite.seed)
    if synth_cfg.generator.size != phantom.size:
        synth_cfg = replace(synth_cfg, generator=replace(synth_cfg.generator, size=phantom.size))
    data_dir = (out / "data") if out else Path(_tmpdir()) / "data"
    manifest = make_dataset(phantom, suite.n_patients, data_dir, suite.split_ratio)
    test = load_split(manifest, "test")
    arms = {}
    for arm in suite.arms:
        arm_dir = out / arm.name if out else None
        generator = None
        if arm.synth_mix > 0:
            cfg = replace(synth_cfg, seed=suite.seed, stretch_out=arm.stretch_out, labelwise_d=arm.labelwise_d,
                          atlas=arm.atlas, consistency=arm.consistency)
            generator = train_synthesis(manifest, cfg, out_dir=arm_dir).G
        u, _, train_set = train_segmentation(manifest, replace(seg_cfg, seed=suite.seed), arm.synth_mix,
                                             generator, out_dir=arm_dir)
        rows = evaluate_segmenter(u, test.images, test.labels)
        arms[arm.name] = {
            "spec": asdict(arm),
            "n_train": len(train_set),
            "rows": [asdict(r) for r in rows],
            "mean_lesion_dice": mean_lesion_dice(rows),
            "reference": arm.reference,
        }
        log.info("arm %s: mean lesion dice %.4f", arm.name, arms[arm.name]["mean_lesion_dice"])
    report = ExperimentReport(
        experiment=suite.experiment, seed=suite.seed, n_real=len(manifest.split("train")), arms=arms,
        reference={k: v for k, v in REFERENCE.items()}, runtime_s=time.time() - t0,
        test_patients=sorted(int(p) for p in manifest.patients("test")),
    )
    if out:
        report.write(out / "report.json")
        (out / "report.txt").write_text(report.table() + "\n")
    return report


def _tmpdir() -> str:
    import tempfile

    return tempfile.mkdtemp(prefix="samr-exp-")


def overlay_png(image_plane: np.ndarray, pred: np.ndarray, truth: np.ndarray, path) -> Path:
    """Grayscale plane with truth boundary in green and prediction boundary in red."""
    from PIL import Image

    g = np.clip((np.asarray(image_plane, np.float64) + 1) / 2, 0, 1)
    rgb = np.stack([g, g, g], axis=-1)
    rgb[boundary(truth)] = (0, 1, 0)
    rgb[boundary(pred)] = (1, 0, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)
    return path
