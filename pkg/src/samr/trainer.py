"""Synthesis and segmentation training loops, schedules and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .data import DatasetManifest, InstanceRecord, one_hot_encode, save_png
from .discriminator import TEST_D, DiscriminatorBank, DiscriminatorConfig
from .errors import CheckpointError, ConfigError, NumericalError, ValidationError
from .generator import TEST_PRESET, Generator, GeneratorConfig, synthesize
from .losses import (
    LossReport,
    LossWeights,
    consistency_loss,
    feature_matching,
    gan_loss,
    gdl,
    total_generator_loss,
)
from .maskops import lesion_support, random_manipulate
from .segmenter import TEST_UNET, UNet, UnetConfig

log = logging.getLogger(__name__)

CKPT_FORMAT = "samr-checkpoint"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# configs


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class SynthTrainConfig:
    max_epochs: int = 500
    constant_epochs: int = 250
    lr: float = 2e-4
    batch_size: int = 8
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = LossWeights()
    gan_mode: str = "log"
    seed: int = 0
    # ablation switches; all on is the full model
    stretch_out: bool = True
    labelwise_d: bool = True
    atlas: bool = True
    consistency: bool = True
    generator: GeneratorConfig = TEST_PRESET
    discriminator: DiscriminatorConfig = TEST_D
    unet: UnetConfig = TEST_UNET
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    sample_every: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 <= self.constant_epochs <= self.max_epochs:
            raise ConfigError("constant-LR epochs must lie in [0, max epochs]")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("learning rate must be >= 0 and batch size >= 1")
        if self.gan_mode not in ("log", "lsgan"):
            raise ConfigError(f"unknown gan_mode {self.gan_mode!r}")

    @property
    def generator_config(self) -> GeneratorConfig:
        return replace(self.generator, use_atlas=self.atlas, stretch_out=self.stretch_out)

    @property
    def discriminator_config(self) -> DiscriminatorConfig:
        return replace(self.discriminator, labelwise=self.labelwise_d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "generator": GeneratorConfig,
                  "discriminator": DiscriminatorConfig, "unet": UnetConfig}
        for key, sub in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = _from_dict(sub, d[key])
        return _from_dict(cls, d)


@dataclass(frozen=True)
class SegTrainConfig:
    max_epochs: int = 200
    constant_epochs: int = 100
    lr: float = 2e-4
    batch_size: int = 16
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    unet: UnetConfig = TEST_UNET

    def __post_init__(self):
        if not 0 <= self.constant_epochs <= self.max_epochs:
            raise ConfigError("constant-LR epochs must lie in [0, max epochs]")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("learning rate must be >= 0 and batch size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegTrainConfig":
        d = dict(d)
        if isinstance(d.get("unet"), dict):
            d["unet"] = _from_dict(UnetConfig, d["unet"])
        return _from_dict(cls, d)


def lr_at(cfg, epoch: float) -> float:
    """Constant for ``constant_epochs``, then linear to zero at ``max_epochs``."""
    if not 0 <= epoch <= cfg.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.max_epochs}]")
    if epoch < cfg.constant_epochs or cfg.max_epochs == cfg.constant_epochs:
        return cfg.lr
    return cfg.lr * (cfg.max_epochs - epoch) / (cfg.max_epochs - cfg.constant_epochs)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# --------------------------------------------------------------------------
# data


@dataclass
class TensorSet:
    masks: torch.Tensor    # (N, 5, H, W) float32 one-hot
    images: torch.Tensor   # (N, 5, H, W)
    atlases: torch.Tensor  # (N, 15, H, W)
    labels: np.ndarray     # (N, H, W) uint8
    patients: np.ndarray
    slices: np.ndarray

    def __len__(self) -> int:
        return len(self.masks)

    def subset(self, idx) -> "TensorSet":
        idx = np.asarray(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return TensorSet(self.masks[t], self.images[t], self.atlases[t], self.labels[idx],
                         self.patients[idx], self.slices[idx])


def load_split(manifest: DatasetManifest, split: str) -> TensorSet:
    recs = manifest.split(split)
    if not recs:
        raise ValidationError(f"manifest has no {split!r} records")
    labels, images, atlases = [], [], []
    for r in recs:
        m, y, a = manifest.load(r)
        labels.append(m)
        images.append(y)
        atlases.append(a)
    labels = np.stack(labels)
    masks = np.stack([one_hot_encode(m) for m in labels]).astype(np.float32)
    return TensorSet(torch.from_numpy(masks), torch.from_numpy(np.stack(images)),
                     torch.from_numpy(np.stack(atlases)), labels,
                     np.array([r.patient_id for r in recs]), np.array([r.slice_index for r in recs]))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0xB7]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "package": __version__, **payload}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config: dict | None = None, key: str = "config") -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if blob.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    if expected_config is not None and _jsonable(blob.get(key)) != _jsonable(expected_config):
        raise CheckpointError(f"{path}: checkpoint {key} does not match the requested configuration")
    return blob


def _jsonable(d):
    return json.loads(json.dumps(d))


RUN_CONTROLS = ("max_steps", "checkpoint_every", "sample_every")


def _training_fields(cfg: dict) -> dict:
    """Config minus run controls, which may change when a run is extended."""
    return {k: v for k, v in _jsonable(cfg).items() if k not in RUN_CONTROLS}


def load_generator(path) -> Generator:
    blob = load_checkpoint(path)
    if "generator" not in blob:
        raise CheckpointError(f"{path}: no generator weights")
    g = Generator(_from_dict(GeneratorConfig, blob["generator_config"]))
    g.load_state_dict(blob["generator"])
    g.eval()
    return g


def load_unet(path) -> UNet:
    blob = load_checkpoint(path)
    if "unet" not in blob or blob["unet"] is None:
        raise CheckpointError(f"{path}: no U-net weights")
    u = UNet(_from_dict(UnetConfig, blob["unet_config"]))
    u.load_state_dict(blob["unet"])
    u.eval()
    return u


# --------------------------------------------------------------------------
# synthesis training


class SynthesisTrainer:
    """Owns G, the discriminator bank, the consistency U-net and their optimizers.

    One optimizer for G+U, one per discriminator. Each batch does one update
    of every discriminator, then one update of G (and U) on the total loss.
    """

    def __init__(self, cfg: SynthTrainConfig, data: TensorSet, out_dir=None):
        self.cfg = cfg
        self.data = data
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        seed_everything(cfg.seed)
        gcfg = cfg.generator_config
        if data.masks.shape[-1] != gcfg.size:
            raise ConfigError(f"data size {data.masks.shape[-1]} != generator size {gcfg.size}")
        self.G = Generator(gcfg)
        self.D = DiscriminatorBank(cfg.discriminator_config)
        self.U = UNet(cfg.unet) if cfg.consistency else None
        params = list(self.G.parameters()) + (list(self.U.parameters()) if self.U else [])
        self.opt_g = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
        self.opt_d = [torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=cfg.betas) for d in self.D.members]
        self.epoch = 0
        self.batch = 0  # index within the current epoch
        self.step = 0
        self.history: list[dict] = []

    # -- one update -------------------------------------------------------
    def losses(self, x, y, a, fake=None):
        """Generator-side terms for a batch. Returns (total tensor, report, fake)."""
        cfg = self.cfg
        fake = self.G(x, a if cfg.atlas else None) if fake is None else fake
        rois = self.D.roi_planes(x)
        gan_terms, fm_terms = [], []
        for k in range(len(self.D)):
            with torch.no_grad():
                real = self.D.forward_member(k, self.D.condition(x, y, rois, k))
            out = self.D.forward_member(k, self.D.condition(x, fake, rois, k))
            gan_terms.append(gan_loss(None, out.logits, "G", cfg.gan_mode))
            fm_terms.append(feature_matching(real.features, out.features))
        if self.U is not None:
            c_real, c_fake = consistency_loss(x, y, fake, self.U)
        else:
            c_real = c_fake = fake.new_zeros(())
        lc = c_real + c_fake
        total = total_generator_loss(gan_terms, fm_terms, lc, cfg.weights, members=len(self.D))
        report = LossReport(
            gan=[_f(t) for t in gan_terms], fm=[_f(t) for t in fm_terms],
            consistency=_f(lc), total=_f(total),
            consistency_terms=(_f(c_real), _f(c_fake)),
        )
        return total, report, fake

    def train_step(self, idx) -> LossReport:
        cfg = self.cfg
        t = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        x, y, a = self.data.masks[t], self.data.images[t], self.data.atlases[t]
        fake = self.G(x, a if cfg.atlas else None)

        rois = self.D.roi_planes(x)
        d_terms = []
        for k in range(len(self.D)):
            real = self.D.forward_member(k, self.D.condition(x, y, rois, k))
            fk = self.D.forward_member(k, self.D.condition(x, fake.detach(), rois, k))
            d_terms.append(gan_loss(real.logits, fk.logits, "D", cfg.gan_mode))
        d_total = sum(d_terms)
        self._finite(d_total, "discriminator loss")
        for opt in self.opt_d:
            opt.zero_grad(set_to_none=True)
        d_total.backward()
        for opt in self.opt_d:
            opt.step()

        total, report, _ = self.losses(x, y, a, fake=fake)
        self._finite(total, "generator loss")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        report.d_losses = [_f(t) for t in d_terms]
        return report

    def _finite(self, t: torch.Tensor, what: str) -> None:
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite {what}")

    # -- loop -------------------------------------------------------------
    def fit(self, on_step: Callable[[dict], None] | None = None) -> list[dict]:
        cfg = self.cfg
        metrics = self.out_dir / "metrics.jsonl" if self.out_dir else None
        while self.epoch < cfg.max_epochs:
            lr = lr_at(cfg, self.epoch)
            set_lr(self.opt_g, lr)
            for opt in self.opt_d:
                set_lr(opt, lr)
            batches = epoch_batches(len(self.data), cfg.batch_size, cfg.seed, self.epoch)
            while self.batch < len(batches):
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    return self.history
                try:
                    report = self.train_step(batches[self.batch])
                except NumericalError as exc:
                    where = ""
                    if self.out_dir:
                        where = f"; snapshot at {self.save(self.out_dir / 'diagnostic.ckpt')}"
                    raise NumericalError(f"{exc} at step {self.step} (epoch {self.epoch}){where}") from None
                self.batch += 1
                self.step += 1
                row = {"step": self.step, "epoch": self.epoch, "lr": lr, **report.to_dict()}
                self.history.append(row)
                if metrics:
                    with open(metrics, "a") as f:
                        f.write(json.dumps(row) + "\n")
                if on_step:
                    on_step(row)
            self.epoch += 1
            self.batch = 0
            if self.out_dir and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"epoch{self.epoch:04d}.ckpt")
            if self.out_dir and cfg.sample_every and self.epoch % cfg.sample_every == 0:
                self.sample_grid(self.out_dir / "samples" / f"epoch{self.epoch:04d}.png")
        return self.history

    # -- persistence ------------------------------------------------------
    def state(self) -> dict:
        return {
            "kind": "synthesis",
            "config": self.cfg.to_dict(),
            "generator_config": self.cfg.generator_config.to_dict(),
            "unet_config": self.cfg.unet.to_dict(),
            "generator": self.G.state_dict(),
            "discriminators": self.D.state_dict(),
            "unet": self.U.state_dict() if self.U else None,
            "opt_g": self.opt_g.state_dict(),
            "opt_d": [o.state_dict() for o in self.opt_d],
            "epoch": self.epoch,
            "batch": self.batch,
            "step": self.step,
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.state())

    @classmethod
    def resume(cls, path, data: TensorSet, cfg: SynthTrainConfig | None = None, out_dir=None) -> "SynthesisTrainer":
        blob = load_checkpoint(path)
        if blob.get("kind") != "synthesis":
            raise CheckpointError(f"{path}: not a synthesis training checkpoint")
        if cfg is not None and _training_fields(blob["config"]) != _training_fields(cfg.to_dict()):
            raise CheckpointError(f"{path}: checkpoint config does not match the requested configuration")
        cfg = cfg or SynthTrainConfig.from_dict(blob["config"])
        tr = cls(cfg, data, out_dir)
        tr.G.load_state_dict(blob["generator"])
        tr.D.load_state_dict(blob["discriminators"])
        if tr.U is not None:
            tr.U.load_state_dict(blob["unet"])
        tr.opt_g.load_state_dict(blob["opt_g"])
        for o, s in zip(tr.opt_d, blob["opt_d"]):
            o.load_state_dict(s)
        tr.epoch, tr.batch, tr.step = blob["epoch"], blob["batch"], blob["step"]
        torch.set_rng_state(blob["torch_rng"])
        return tr

    def sample_grid(self, path, n: int = 1) -> Path:
        """Rows: real / synthesized; columns: the five sequences."""
        x, y, a = self.data.masks[:n], self.data.images[:n], self.data.atlases[:n]
        fake = synthesize(self.G, x, a if self.cfg.atlas else None)
        rows = [torch.cat(list(y[0]), dim=1), torch.cat(list(fake[0]), dim=1)]
        return save_png(torch.cat(rows, dim=0).numpy(), path)


def train_synthesis(manifest: DatasetManifest, cfg: SynthTrainConfig, out_dir=None,
                    resume_from=None) -> SynthesisTrainer:
    """Train on the manifest's training split; writes metrics and a final checkpoint."""
    data = load_split(manifest, "train")
    if resume_from:
        tr = SynthesisTrainer.resume(resume_from, data, cfg, out_dir)
    else:
        tr = SynthesisTrainer(cfg, data, out_dir)
    tr.fit()
    if out_dir:
        tr.save(Path(out_dir) / "final.ckpt")
    return tr


# --------------------------------------------------------------------------
# segmentation training


def synthetic_count(n_real: int, synth_mix: float) -> int:
    """Synthesized instances added to ``n_real`` real ones.

    0.5 doubles the training set (one synthesized per real instance), 0.25
    adds half as many, 0 adds none.
    """
    if not 0 <= synth_mix <= 1:
        raise ConfigError(f"synth_mix must lie in [0, 1], got {synth_mix}")
    return int(round(2 * synth_mix * n_real))


@torch.no_grad()
def synthesize_augmentation(generator: Generator, real: TensorSet, atlas_by_slice: dict[int, torch.Tensor],
                            n: int, seed: int, batch_size: int = 16) -> TensorSet:
    """Generate ``n`` instances from randomly manipulated training masks."""
    rng = np.random.default_rng([seed, 0xA06])
    donors = [m for m in real.labels if lesion_support(m).any()]
    donor_idx = rng.choice(len(donors), size=min(32, len(donors)), replace=False) if donors else []
    pool = [donors[i] for i in donor_idx]
    src = rng.permutation(np.resize(np.arange(len(real)), n)) if n else np.zeros(0, dtype=int)
    labels = np.stack([random_manipulate(real.labels[j], seed=int(rng.integers(2**31)), donors=pool)
                       for j in src]) if n else np.zeros((0,) + real.labels.shape[1:], np.uint8)
    masks = torch.from_numpy(np.stack([one_hot_encode(m) for m in labels]).astype(np.float32)) if n \
        else real.masks[:0]
    slices = real.slices[src]
    atlases = torch.stack([atlas_by_slice[int(s)] for s in slices]) if n else real.atlases[:0]
    images = []
    for i in range(0, n, batch_size):
        a = atlases[i:i + batch_size] if generator.cfg.use_atlas else None
        images.append(synthesize(generator, masks[i:i + batch_size], a))
    images = torch.cat(images) if images else real.images[:0]
    return TensorSet(masks, images, atlases, labels, np.full(n, -1), slices)


def concat_sets(a: TensorSet, b: TensorSet) -> TensorSet:
    return TensorSet(torch.cat([a.masks, b.masks]), torch.cat([a.images, b.images]),
                     torch.cat([a.atlases, b.atlases]), np.concatenate([a.labels, b.labels]),
                     np.concatenate([a.patients, b.patients]), np.concatenate([a.slices, b.slices]))


def fit_segmenter(data: TensorSet, cfg: SegTrainConfig, out_dir=None) -> tuple[UNet, list[dict]]:
    seed_everything(cfg.seed)
    u = UNet(cfg.unet)
    opt = torch.optim.Adam(u.parameters(), lr=cfg.lr, betas=cfg.betas)
    history = []
    step = 0
    metrics = None
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics = Path(out_dir) / "seg_metrics.jsonl"
    for epoch in range(cfg.max_epochs):
        lr = lr_at(cfg, epoch)
        set_lr(opt, lr)
        for idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch):
            t = torch.as_tensor(idx, dtype=torch.long)
            loss = gdl(data.masks[t], u(data.images[t]))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite segmentation loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            row = {"step": step, "epoch": epoch, "lr": lr, "gdl": _f(loss)}
            history.append(row)
            if metrics:
                with open(metrics, "a") as f:
                    f.write(json.dumps(row) + "\n")
    return u, history


def atlas_lookup(data: TensorSet) -> dict[int, torch.Tensor]:
    out = {}
    for i, s in enumerate(data.slices):
        out.setdefault(int(s), data.atlases[i])
    return out


def train_segmentation(manifest: DatasetManifest, cfg: SegTrainConfig, synth_mix: float = 0.0,
                       synth_source: Generator | str | Path | None = None, out_dir=None):
    """Train a U-net on all real training instances plus synthesized ones.

    Returns ``(unet, history, training set)``.
    """
    n_real = len(manifest.split("train"))
    n_synth = synthetic_count(n_real, synth_mix)
    if n_synth and synth_source is None:
        raise ConfigError("synth_mix > 0 needs a synthesizer checkpoint")
    real = load_split(manifest, "train")
    data = real
    if n_synth:
        g = synth_source if isinstance(synth_source, Generator) else load_generator(synth_source)
        fake = synthesize_augmentation(g, real, atlas_lookup(real), n_synth, cfg.seed)
        data = concat_sets(real, fake)
    log.info("segmentation training set: %d real + %d synthesized", n_real, n_synth)
    u, history = fit_segmenter(data, cfg, out_dir)
    if out_dir:
        save_checkpoint(Path(out_dir) / "unet.ckpt", {
            "kind": "segmentation", "config": cfg.to_dict(), "unet_config": cfg.unet.to_dict(),
            "unet": u.state_dict(), "synth_mix": synth_mix, "n_real": n_real, "n_synth": n_synth,
        })
    return u, history, data
