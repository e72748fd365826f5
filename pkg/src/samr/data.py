"""Canonical arrays, validation, and the tensor archive format.

All arrays are numpy and channel-first:

* label map      ``(H, W)`` uint8, values in 0..4
* one-hot mask   ``(5, H, W)`` uint8 (or float) with one 1 per pixel
* MR instance    ``(5, H, W)`` float32 in [-1, 1], order T1w, Gd-T1w, T2w, FLAIR, APTw
* atlas stack    ``(15, H, W)`` float32, slice-major (prev, current, next) x sequences
* probabilities  ``(5, H, W)`` float32, per-pixel softmax

Archive layout: 8 byte magic, little-endian uint64 header length, UTF-8 JSON
header, raw little-endian payload.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import ATLAS_CHANNELS, NUM_CLASSES, NUM_SEQUENCES
from .errors import (
    HeaderError,
    PayloadLengthError,
    RoleShapeError,
    ValidationError,
)

MAGIC = b"SAMRARC1"
ARCHIVE_VERSION = 1

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}

# role -> (ndim, channel count or None, allowed dtypes)
ROLES = {
    "label": (2, None, ("uint8",)),
    "mask": (3, NUM_CLASSES, ("uint8", "float32")),
    "mri": (3, NUM_SEQUENCES, ("float32",)),
    "atlas": (3, ATLAS_CHANNELS, ("float32",)),
    "prob": (3, NUM_CLASSES, ("float32",)),
    "tensor": (None, None, ("uint8", "float32")),
}


# --------------------------------------------------------------------------
# validation


def check_label_map(m: np.ndarray, size: int | None = None) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or min(m.shape) < 1:
        raise ValidationError(f"label map must be a non-empty 2D grid, got shape {m.shape}")
    if size is not None and m.shape != (size, size):
        raise ValidationError(f"label map shape {m.shape} != configured ({size}, {size})")
    if not np.issubdtype(m.dtype, np.integer):
        if not np.all(np.mod(m, 1) == 0):
            raise ValidationError("label map holds non-integer values")
    bad = (m < 0) | (m >= NUM_CLASSES)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValidationError(f"label {m[r, c]} at pixel ({r}, {c}) outside 0..{NUM_CLASSES - 1}")
    return m.astype(np.uint8, copy=False)


def check_one_hot(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != NUM_CLASSES:
        raise ValidationError(f"one-hot mask must be ({NUM_CLASSES}, H, W), got {x.shape}")
    if not np.all((x == 0) | (x == 1)):
        raise ValidationError("one-hot mask holds values other than 0/1")
    if not np.all(x.sum(axis=0) == 1):
        raise ValidationError("one-hot mask channels do not sum to 1 at every pixel")
    return x


def one_hot_encode(m: np.ndarray) -> np.ndarray:
    """Label map ``(H, W)`` -> one-hot ``(5, H, W)`` uint8."""
    m = check_label_map(m)
    return (m[None] == np.arange(NUM_CLASSES, dtype=np.uint8)[:, None, None]).astype(np.uint8)


def decode_argmax(p: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    p = np.asarray(p)
    if p.ndim != 3 or p.shape[0] != NUM_CLASSES:
        raise ValidationError(f"expected {NUM_CLASSES} channels first, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("probability map holds non-finite values")
    # np.argmax returns the first maximal index
    return np.argmax(p, axis=0).astype(np.uint8)


@dataclass
class ValidationReport:
    ok: bool
    failures: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def validate_instance(mask, img, atlas) -> ValidationReport:
    """Check a (one-hot mask, MR instance, atlas stack) triple; never raises."""
    failures = []
    mask, img, atlas = np.asarray(mask), np.asarray(img), np.asarray(atlas)
    if mask.ndim != 3 or mask.shape[0] != NUM_CLASSES:
        failures.append(f"mask channels != {NUM_CLASSES}")
    else:
        if not np.all((mask == 0) | (mask == 1)):
            failures.append("mask values not binary")
        elif not np.all(mask.sum(axis=0) == 1):
            failures.append("mask not a partition")
    if img.ndim != 3 or img.shape[0] != NUM_SEQUENCES:
        failures.append(f"image sequences != {NUM_SEQUENCES}")
    if atlas.ndim != 3 or atlas.shape[0] != ATLAS_CHANNELS:
        failures.append(f"atlas channels != {ATLAS_CHANNELS}")
    for name, arr in (("image", img), ("atlas", atlas)):
        if not np.all(np.isfinite(arr)):
            failures.append(f"{name} not finite")
        elif arr.size and (arr.min() < -1 or arr.max() > 1):
            failures.append(f"range: {name} values outside [-1, 1]")
    spatial = {a.shape[-2:] for a in (mask, img, atlas) if a.ndim >= 2}
    if len(spatial) > 1:
        failures.append(f"spatial shapes differ: {sorted(spatial)}")
    return ValidationReport(ok=not failures, failures=failures)


# --------------------------------------------------------------------------
# archives


def _check_role(role: str, shape: tuple, dtype: str) -> None:
    if role not in ROLES:
        raise RoleShapeError(f"unknown role {role!r}")
    ndim, channels, dtypes = ROLES[role]
    if dtype not in dtypes:
        raise RoleShapeError(f"role {role!r} does not allow dtype {dtype}")
    if ndim is not None and len(shape) != ndim:
        raise RoleShapeError(f"role {role!r} needs {ndim} dims, got shape {tuple(shape)}")
    if channels is not None and shape[0] != channels:
        raise RoleShapeError(f"role {role!r} needs {channels} channels, got shape {tuple(shape)}")


def save_archive(arr: np.ndarray, path, role: str = "tensor") -> Path:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    dtype = arr.dtype.name
    if dtype not in _DTYPES:
        raise RoleShapeError(f"unsupported dtype {dtype}")
    _check_role(role, arr.shape, dtype)
    header = {
        "version": ARCHIVE_VERSION,
        "shape": list(arr.shape),
        "dtype": dtype,
        "layout": "HW" if arr.ndim == 2 else "CHW",
        "role": role,
        "endian": "little",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise HeaderError(f"{path}: bad magic")
        raw = f.read(8)
        if len(raw) != 8:
            raise HeaderError(f"{path}: truncated header length")
        (n,) = struct.unpack("<Q", raw)
        blob = f.read(n)
    if len(blob) != n:
        raise HeaderError(f"{path}: truncated header")
    try:
        header = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{path}: corrupt header ({exc})") from None
    for key in ("version", "shape", "dtype", "role"):
        if key not in header:
            raise HeaderError(f"{path}: header lacks {key!r}")
    if header["version"] != ARCHIVE_VERSION:
        raise HeaderError(f"{path}: unsupported archive version {header['version']}")
    if header["dtype"] not in _DTYPES:
        raise HeaderError(f"{path}: unknown dtype {header['dtype']!r}")
    return header, len(MAGIC) + 8 + n


def load_archive(path, role: str | None = None) -> np.ndarray:
    header, offset = read_header(path)
    shape = tuple(int(s) for s in header["shape"])
    _check_role(header["role"], shape, header["dtype"])
    if role is not None and header["role"] != role:
        raise RoleShapeError(f"{path}: role {header['role']!r}, expected {role!r}")
    dt = _DTYPES[header["dtype"]]
    with open(path, "rb") as f:
        f.seek(offset)
        payload = f.read()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path}: payload length mismatch ({len(payload)} bytes, header implies {expected})"
        )
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_png(plane: np.ndarray, path, lo: float = -1.0, hi: float = 1.0) -> Path:
    """Write one plane as 8-bit grayscale, linear map of [lo, hi] onto 0..255."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValidationError(f"PNG export takes a single 2D plane, got {plane.shape}")
    scaled = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    return path


# --------------------------------------------------------------------------
# manifest


@dataclass
class InstanceRecord:
    patient_id: int
    slice_index: int
    split: str
    mask: str
    image: str
    atlas: str
    seed: int


@dataclass
class DatasetManifest:
    records: list[InstanceRecord]
    root: Path

    def split(self, name: str) -> list[InstanceRecord]:
        return [r for r in self.records if r.split == name]

    def patients(self, name: str | None = None) -> set[int]:
        return {r.patient_id for r in self.records if name is None or r.split == name}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_split(self) -> None:
        both = self.patients("train") & self.patients("test")
        if both:
            raise ValidationError(f"patients in both splits: {sorted(both)}")

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.jsonl"
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.exists():
            raise FileNotFoundError(path)
        with open(path) as f:
            records = [InstanceRecord(**json.loads(line)) for line in f if line.strip()]
        man = cls(records=records, root=path.parent)
        man.check_split()
        if check_files:
            for r in records:
                for rel in (r.mask, r.image, r.atlas):
                    if not man.resolve(rel).exists():
                        raise ValidationError(f"manifest references missing file {rel}")
        return man

    def load(self, record: InstanceRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (label map, MR instance, atlas stack)."""
        m = check_label_map(load_archive(self.resolve(record.mask), role="label"))
        y = load_archive(self.resolve(record.image), role="mri")
        a = load_archive(self.resolve(record.atlas), role="atlas")
        return m, y, a
