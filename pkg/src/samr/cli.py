"""Command line entry point.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical failure.
Set ``SAMR_NUM_THREADS`` to cap intra-op parallelism.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArchiveError, CheckpointError, SamrError, ValidationError

log = logging.getLogger("samr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _jsonable(obj):
    if is_dataclass(obj):
        return asdict(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(type(obj))


def write_run_record(path: Path, command: str, resolved: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": __version__, "resolved": resolved}
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=_jsonable))
    return path


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return json.loads(p.read_text())


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


# --------------------------------------------------------------------------
# phantom


def cmd_phantom_gen(args) -> int:
    from .phantom import PhantomParams, make_dataset

    layered = {"seed": 0, "size": 256, "slices": 15, "patients": 10, "split": 0.8}
    layered.update(_read_config(args.config))
    for key in ("seed", "size", "slices", "patients", "split"):
        v = getattr(args, key)
        if v is not None:
            layered[key] = v
    params = PhantomParams(seed=layered["seed"], size=layered["size"], slices=layered["slices"])
    out = Path(args.out)
    man = make_dataset(params, layered["patients"], out, layered["split"])
    write_run_record(out / "run.json", "phantom gen", {**layered, "params": params})
    print(f"{len(man.records)} instances -> {out}")
    return EXIT_OK


def cmd_phantom_atlas(args) -> int:
    from .phantom import atlas_from_dir

    paths = atlas_from_dir(_require(args.inp), args.out)
    write_run_record(Path(args.out) / "run.json", "phantom atlas", {"in": args.inp, "out": args.out})
    print(f"{len(paths)} atlas stacks -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# mask edit


def _load_label_map(path):
    from .data import decode_argmax, load_archive, read_header

    header, _ = read_header(_require(path))
    arr = load_archive(path)
    if header["role"] == "label":
        return arr, "label"
    if header["role"] == "mask":
        return decode_argmax(arr), "mask"
    raise ValidationError(f"{path}: expected a label or mask archive, got role {header['role']!r}")


def cmd_mask_edit(args) -> int:
    from . import maskops
    from .data import one_hot_encode, save_archive

    m, role = _load_label_map(args.inp)
    donor = _load_label_map(args.donor)[0] if args.donor else None
    if args.op == "mirror":
        out = maskops.mirror_lesion(m)
    elif args.op == "scale":
        out = maskops.scale_tumor(m, args.factor)
    elif args.op == "translate":
        out = maskops.translate_lesion(m, tuple(args.shift))
    elif args.op == "transplant":
        if donor is None:
            raise UsageError("mask edit --op transplant needs --donor")
        out = maskops.transplant_lesion(m, donor)
    else:
        out = maskops.random_manipulate(m, args.seed, donors=[donor] if donor is not None else ())
    save_archive(out if role == "label" else one_hot_encode(out), args.out, role=role)
    write_run_record(Path(str(args.out) + ".run.json"), "mask edit", _flags(args))
    return EXIT_OK


# --------------------------------------------------------------------------
# training


def _synth_config(args):
    from .discriminator import PAPER_D, TEST_D
    from .generator import PAPER_PRESET, TEST_PRESET
    from .segmenter import DEFAULT_UNET, TEST_UNET
    from .trainer import SynthTrainConfig

    if args.preset == "paper":
        base = SynthTrainConfig(generator=PAPER_PRESET, discriminator=PAPER_D, unet=DEFAULT_UNET)
    else:
        base = SynthTrainConfig(generator=TEST_PRESET, discriminator=TEST_D, unet=TEST_UNET)
    d = base.to_dict()
    d.update(_read_config(args.config))
    for flag, key in (("epochs", "max_epochs"), ("constant_epochs", "constant_epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("seed", "seed"), ("max_steps", "max_steps"),
                      ("checkpoint_every", "checkpoint_every"), ("sample_every", "sample_every")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    for flag in ("atlas", "stretch_out", "labelwise_d", "consistency"):
        if getattr(args, f"no_{flag}", False):
            d[flag] = False
    if args.size is not None:
        d["generator"] = {**d["generator"], "size": args.size}
    return SynthTrainConfig.from_dict(d)


def cmd_train_synth(args) -> int:
    from .data import DatasetManifest
    from .trainer import train_synthesis

    cfg = _synth_config(args)
    man = DatasetManifest.read(_require(args.data))
    out = Path(args.out)
    write_run_record(out / "config.json", "train synth", {"config": cfg, "data": args.data})
    tr = train_synthesis(man, cfg, out_dir=out, resume_from=args.resume)
    print(f"{tr.step} steps; checkpoint -> {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    from .data import DatasetManifest
    from .segmenter import DEFAULT_UNET, TEST_UNET
    from .trainer import SegTrainConfig, train_segmentation

    base = SegTrainConfig(unet=DEFAULT_UNET if args.preset == "paper" else TEST_UNET)
    d = base.to_dict()
    d.update(_read_config(args.config))
    for flag, key in (("epochs", "max_epochs"), ("constant_epochs", "constant_epochs"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    cfg = SegTrainConfig.from_dict(d)
    man = DatasetManifest.read(_require(args.data))
    if args.synth_ckpt:
        _require(args.synth_ckpt)
    out = Path(args.out)
    write_run_record(out / "config.json", "train seg",
                     {"config": cfg, "data": args.data, "mix": args.mix, "synth_ckpt": args.synth_ckpt})
    _, hist, data = train_segmentation(man, cfg, args.mix, args.synth_ckpt, out_dir=out)
    print(f"{len(hist)} steps on {len(data)} instances; checkpoint -> {out / 'unet.ckpt'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# synthesis / eval / export


def cmd_synth(args) -> int:
    from .data import load_archive, one_hot_encode, save_archive
    from .generator import synthesize
    from .trainer import load_generator

    g = load_generator(_require(args.ckpt))
    m, _ = _load_label_map(args.mask)
    atlas = load_archive(_require(args.atlas), role="atlas") if args.atlas else None
    if g.cfg.use_atlas and atlas is None:
        raise UsageError("this generator needs --atlas")
    y = synthesize(g, one_hot_encode(m).astype(np.float32), atlas).numpy()
    save_archive(y, args.out, role="mri")
    write_run_record(Path(str(args.out) + ".run.json"), "synth", _flags(args))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import EXPERIMENT_ARMS, SuiteConfig, evaluate_segmenter, run_experiment, select_arms
    from .data import DatasetManifest
    from .trainer import load_split, load_unet

    out = Path(args.out)
    if args.ckpt:
        u = load_unet(_require(args.ckpt))
        man = DatasetManifest.read(_require(args.data))
        test = load_split(man, "test")
        rows = evaluate_segmenter(u, test.images, test.labels)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps([asdict(r) for r in rows], indent=2))
        write_run_record(out / "run.json", "eval", _flags(args))
        for r in rows:
            print(f"{r.cls:<8} dice={r.dice:.3f} hd95={r.hd95:.3f} sens={r.sensitivity:.3f} spec={r.specificity:.3f}")
        return EXIT_OK
    from .phantom import PhantomParams
    from .trainer import SegTrainConfig, SynthTrainConfig

    cfg = _read_config(args.config)
    if args.arms:
        arms = select_arms([a for a in args.arms.split(",") if a])
    elif args.experiment in EXPERIMENT_ARMS:
        arms = EXPERIMENT_ARMS[args.experiment]
    else:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {sorted(EXPERIMENT_ARMS)}")
    suite = SuiteConfig(
        experiment=args.experiment, seed=args.seed, n_patients=args.patients,
        phantom=PhantomParams(size=args.size, slices=cfg.get("slices", 15)),
        synth=SynthTrainConfig.from_dict(cfg["synth"]) if "synth" in cfg else None,
        seg=SegTrainConfig.from_dict(cfg["seg"]) if "seg" in cfg else None,
        arms=arms, out_dir=str(out),
    )
    write_run_record(out / "run.json", "eval", {"suite": suite})
    report = run_experiment(suite)
    print(report.table())
    return EXIT_OK


def cmd_export_png(args) -> int:
    from .data import load_archive, read_header, save_png

    header, _ = read_header(_require(args.inp))
    arr = load_archive(args.inp)
    if arr.ndim == 2:
        plane = arr.astype(np.float64) / 4 * 2 - 1 if header["role"] == "label" else arr
    else:
        if not 0 <= args.channel < arr.shape[0]:
            raise ValidationError(f"channel {args.channel} outside 0..{arr.shape[0] - 1}")
        plane = arr[args.channel].astype(np.float64)
        if header["role"] in ("mask", "prob"):
            plane = plane * 2 - 1
    save_png(plane, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="samr", description="Lesion-mask conditioned multi-sequence MR synthesis")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom").add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = ph.add_parser("gen", help="generate a synthetic phantom corpus")
    g.add_argument("--seed", type=int)
    g.add_argument("--patients", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--slices", type=int)
    g.add_argument("--split", type=float)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)
    a = ph.add_parser("atlas", help="rebuild atlas stacks from healthy renders")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_phantom_atlas)

    mk = sub.add_parser("mask").add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = mk.add_parser("edit", help="manipulate a lesion mask")
    e.add_argument("--op", required=True, choices=("mirror", "scale", "translate", "transplant", "random"))
    e.add_argument("--factor", type=float, default=1.0)
    e.add_argument("--shift", type=int, nargs=2, default=(0, 0), metavar=("DY", "DX"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--donor")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_mask_edit)

    tr = sub.add_parser("train").add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name, func in (("synth", cmd_train_synth), ("seg", cmd_train_seg)):
        t = tr.add_parser(name)
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--preset", choices=("paper", "test"), default="test")
        t.add_argument("--epochs", type=int)
        t.add_argument("--constant-epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--seed", type=int)
        t.set_defaults(func=func)
        if name == "synth":
            t.add_argument("--size", type=int)
            t.add_argument("--max-steps", type=int)
            t.add_argument("--checkpoint-every", type=int)
            t.add_argument("--sample-every", type=int)
            t.add_argument("--resume")
            for flag in ("atlas", "stretch-out", "labelwise-d", "consistency"):
                t.add_argument(f"--no-{flag}", action="store_true")
        else:
            t.add_argument("--mix", type=float, default=0.0)
            t.add_argument("--synth-ckpt")

    s = sub.add_parser("synth", help="synthesize five sequences from a mask")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--atlas")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="evaluate a segmenter, or run an augmentation experiment")
    ev.add_argument("--ckpt")
    ev.add_argument("--data")
    ev.add_argument("--experiment", default="exp1", help="exp1 | exp2 | exp3 | ablation | table1")
    ev.add_argument("--arms", help="comma-separated arm names, overrides the experiment's arm set")
    ev.add_argument("--patients", type=int, default=60)
    ev.add_argument("--size", type=int, default=64)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--config")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export").add_subparsers(dest="action", required=True, parser_class=_Parser)
    pn = ex.add_parser("png", help="write one plane of an archive as 8-bit PNG")
    pn.add_argument("--in", dest="inp", required=True)
    pn.add_argument("--channel", type=int, default=0)
    pn.add_argument("--out", required=True)
    pn.set_defaults(func=cmd_export_png)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("SAMR_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "eval" and args.ckpt and not args.data:
            raise UsageError("eval --ckpt needs --data")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: missing input {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except (ArchiveError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SamrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
