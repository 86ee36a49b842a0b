"""Core OCT domain types and volume / manifest I/O.

Conventions used throughout the package:

* a volume is a float32 array of shape (Z, Y, X) with values in [0, 1],
  where Z indexes depth rows, Y indexes B-scans and X lateral columns;
* slicing a volume at fixed y yields one Z x X B-scan;
* intensities are stored as float in [0, 1] in memory and quantized to
  8-bit grayscale on disk.

All types are immutable after construction (arrays are marked read-only)
and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DomainError,
    DuplicateIdError,
    MetaError,
    MissingSliceError,
    SchemaError,
    ShapeMismatchError,
)

RAW_MAGIC = b"OCTV"


class Label(str, Enum):
    BONAFIDE = "bonafide"
    PA = "pa"


class PaCategory(str, Enum):
    EXTERNAL = "external"  # only the surface pattern is simulated
    STRUCTURE = "structure"  # internal layering is simulated as well
    NONE = "none"


class VolumeFormat(str, Enum):
    PNG_STACK = "png_stack"
    RAW_BINARY = "raw_binary"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SampleMeta:
    """Acquisition metadata for one volume (one presentation)."""

    sample_id: str
    label: Label
    material: str = ""
    pa_category: PaCategory = PaCategory.NONE
    subject_id: str = ""

    def __post_init__(self) -> None:
        if not self.sample_id:
            raise SchemaError("sample_id must be nonempty")
        if self.label is Label.PA:
            if not self.material:
                raise SchemaError(f"PA sample {self.sample_id!r} must name a material")
            if self.pa_category is PaCategory.NONE:
                raise SchemaError(f"PA sample {self.sample_id!r} needs a pa_category")
        else:
            if self.pa_category is not PaCategory.NONE:
                raise SchemaError(
                    f"bonafide sample {self.sample_id!r} cannot carry a pa_category"
                )

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label.value,
            "material": self.material,
            "pa_category": self.pa_category.value,
            "subject_id": self.subject_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleMeta":
        try:
            return cls(
                sample_id=d["sample_id"],
                label=Label(d["label"]),
                material=d.get("material", ""),
                pa_category=PaCategory(d.get("pa_category", "none")),
                subject_id=d.get("subject_id", ""),
            )
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad sample metadata: {exc}") from exc


@dataclass(frozen=True)
class BScan:
    """One Z x X cross-section in [0, 1]. ``source_y`` is the index in the parent volume."""

    data: np.ndarray
    source_y: int | None = None

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ShapeMismatchError(f"B-scan must be 2D, got shape {self.data.shape}")
        _freeze(self.data)

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class OctVolume:
    """A (Z, Y, X) intensity volume in [0, 1] plus sample metadata."""

    data: np.ndarray
    meta: SampleMeta

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatchError(f"volume must be 3D, got shape {self.data.shape}")
        _freeze(self.data)

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return z, y, x

    @property
    def n_bscans(self) -> int:
        return self.data.shape[1]


def get_bscan(vol: OctVolume, y: int) -> BScan:
    """Return the y-th B-scan of ``vol`` as a read-only Z x X slice."""
    if not 0 <= y < vol.n_bscans:
        raise DomainError(f"B-scan index {y} out of range [0, {vol.n_bscans})")
    return BScan(data=vol.data[:, y, :], source_y=y)


# ---------------------------------------------------------------------------
# volume I/O
# ---------------------------------------------------------------------------

def to_u8(img: np.ndarray) -> np.ndarray:
    """Quantize an array in [0, 1] to uint8 by rounding (round trips exactly)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_u8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def _raw_meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_volume(vol: OctVolume, path: str | Path, fmt: VolumeFormat = VolumeFormat.PNG_STACK) -> None:
    """Write ``vol`` to disk.

    PNG_STACK: ``path`` is a directory holding ``bscan_{y:04d}.png`` (8-bit
    grayscale, one per B-scan) plus ``meta.json``.  RAW_BINARY: ``path`` is a
    single file -- 16-byte little-endian header (magic ``OCTV``, u32 Z, Y, X)
    followed by Z*Y*X intensity bytes in (z, y, x) row-major order, with the
    metadata in a ``<name>.meta.json`` sidecar.
    """
    path = Path(path)
    z, y, x = vol.shape_zyx
    u8 = to_u8(vol.data)
    if fmt is VolumeFormat.PNG_STACK:
        path.mkdir(parents=True, exist_ok=True)
        for i in range(y):
            Image.fromarray(u8[:, i, :], mode="L").save(path / f"bscan_{i:04d}.png")
        (path / "meta.json").write_text(json.dumps(vol.meta.to_dict(), indent=2))
    elif fmt is VolumeFormat.RAW_BINARY:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(RAW_MAGIC)
            f.write(struct.pack("<III", z, y, x))
            f.write(np.ascontiguousarray(u8).tobytes())
        _raw_meta_path(path).write_text(json.dumps(vol.meta.to_dict(), indent=2))
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown format {fmt}")


def load_volume(path: str | Path, fmt: VolumeFormat = VolumeFormat.PNG_STACK) -> OctVolume:
    """Load a volume saved by :func:`save_volume`.

    Raises MissingSliceError for gaps in a PNG stack, ShapeMismatchError for
    inconsistent slice dimensions and MetaError for unreadable metadata.
    """
    path = Path(path)
    if fmt is VolumeFormat.PNG_STACK:
        if not path.is_dir():
            raise MetaError(f"PNG stack directory not found: {path}")
        names = sorted(p.name for p in path.glob("bscan_*.png"))
        if not names:
            raise MissingSliceError(f"no bscan_*.png files in {path}")
        count = len(names)
        slices = []
        shape = None
        for i in range(count):
            p = path / f"bscan_{i:04d}.png"
            if not p.exists():
                raise MissingSliceError(f"missing slice {p.name} in {path}")
            arr = np.asarray(Image.open(p).convert("L"))
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ShapeMismatchError(
                    f"slice {p.name} has shape {arr.shape}, expected {shape}"
                )
            slices.append(from_u8(arr))
        meta = _read_meta(path / "meta.json")
        data = np.stack(slices, axis=1)  # (Z, Y, X)
        return OctVolume(data=data, meta=meta)

    if fmt is VolumeFormat.RAW_BINARY:
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise MetaError(f"cannot read {path}: {exc}") from exc
        if len(blob) < 16 or blob[:4] != RAW_MAGIC:
            raise SchemaError(f"{path} is not a raw volume (bad magic)")
        z, y, x = struct.unpack("<III", blob[4:16])
        body = blob[16:]
        if len(body) != z * y * x:
            raise ShapeMismatchError(
                f"{path}: header says {z}x{y}x{x}={z * y * x} voxels, got {len(body)} bytes"
            )
        u8 = np.frombuffer(body, dtype=np.uint8).reshape(z, y, x)
        meta = _read_meta(_raw_meta_path(Path(path)))
        return OctVolume(data=from_u8(u8), meta=meta)

    raise ValueError(f"unknown format {fmt}")  # pragma: no cover


def _read_meta(path: Path) -> SampleMeta:
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MetaError(f"cannot read metadata {path}: {exc}") from exc
    return SampleMeta.from_dict(raw)


# ---------------------------------------------------------------------------
# segmentation mask stacks (one-hot, 4 channels)
# ---------------------------------------------------------------------------

MASK_CHANNELS = ("background", "stratum_corneum", "viable_epidermis", "sweat_gland")


def save_mask_stack(mask: np.ndarray, path: str | Path) -> None:
    """Write a one-hot (4, Z, Y, X) mask as PNGs ``mask_{c}_{y:04d}.png``."""
    mask = np.asarray(mask)
    if mask.ndim != 4 or mask.shape[0] != len(MASK_CHANNELS):
        raise ShapeMismatchError(f"mask must be (4, Z, Y, X), got {mask.shape}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    u8 = (mask > 0).astype(np.uint8) * 255
    for c in range(mask.shape[0]):
        for i in range(mask.shape[2]):
            Image.fromarray(u8[c, :, i, :], mode="L").save(path / f"mask_{c}_{i:04d}.png")


def load_mask_stack(path: str | Path, n_bscans: int) -> np.ndarray:
    """Load a mask stack written by :func:`save_mask_stack` as one-hot uint8."""
    path = Path(path)
    channels = []
    for c in range(len(MASK_CHANNELS)):
        slices = []
        for i in range(n_bscans):
            p = path / f"mask_{c}_{i:04d}.png"
            if not p.exists():
                raise MissingSliceError(f"missing mask slice {p.name} in {path}")
            slices.append(np.asarray(Image.open(p).convert("L")) > 127)
        channels.append(np.stack(slices, axis=1))
    mask = np.stack(channels, axis=0).astype(np.uint8)
    if not np.all(mask.sum(axis=0) == 1):
        raise SchemaError(f"mask stack at {path} is not one-hot")
    return mask


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str  # as written in the manifest (possibly relative)
    meta: SampleMeta
    resolved: Path = field(compare=False, default=Path())


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for e in self.entries:
            if e.meta.sample_id in seen:
                raise DuplicateIdError(f"duplicate sample_id {e.meta.sample_id!r}")
            seen.add(e.meta.sample_id)

    def __len__(self) -> int:
        return len(self.entries)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"path": e.path, "meta": e.meta.to_dict()} for e in manifest.entries]
    path.write_text(json.dumps(rows, indent=2))


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    """Load a manifest; relative entry paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(rows, list):
        raise SchemaError(f"manifest {path} must be a JSON array")
    base = path.parent
    entries = []
    for row in rows:
        try:
            rel = row["path"]
            meta = SampleMeta.from_dict(row["meta"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad manifest row in {path}: {exc}") from exc
        resolved = (base / rel) if not Path(rel).is_absolute() else Path(rel)
        if check_paths and not resolved.exists():
            raise SchemaError(f"manifest {path} references missing path {resolved}")
        entries.append(ManifestEntry(path=rel, meta=meta, resolved=resolved))
    return Manifest(entries=tuple(entries))
