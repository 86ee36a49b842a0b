"""Adaptive foreground patch extraction from noisy B-scans.

The pipeline mirrors how a technician would crop useful regions from an OCT
cross-section: grow the bright structures a little (grayscale dilation),
split foreground from background with Otsu's threshold, find the image row
where the surface band sits, then walk a fixed grid of 256 x 256 candidate
windows starting at that row and keep the ones containing enough foreground.

Grid and selection rules:

* candidate centers live on ``(x, z)`` with ``x = x_start + k * x_stride``
  and ``z = surface_row + j * z_stride``;
* a candidate is kept iff the binarized image has strictly more than
  ``patch_size^2 * foreground_threshold`` foreground pixels inside its
  window;
* kept patches are cropped from the ORIGINAL image (the dilated copy is
  only used for thresholding), window extent ``[z-128, z+128) x [x-128,
  x+128)``;
* candidates whose window leaves the image are skipped, not clamped.

Everything here is a pure function; calls are trivially parallel across
B-scans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

from .errors import DomainError, SchemaError, ShapeMismatchError, TooSmallError
from .oct_core import BScan, from_u8, to_u8


@dataclass(frozen=True)
class ExtractionConfig:
    patch_size: int = 256
    z_stride: int = 256
    x_stride: int = 64
    foreground_threshold: float = 0.01
    kernel: tuple[int, int] = (5, 5)
    sum_width: int | None = None  # columns used for the surface-row sum; None = full width

    def __post_init__(self) -> None:
        if self.patch_size < 2 or self.patch_size % 2 != 0:
            raise DomainError("patch_size must be a positive even number")
        if self.z_stride < 1 or self.x_stride < 1:
            raise DomainError("strides must be >= 1")
        if not 0.0 < self.foreground_threshold < 1.0:
            raise DomainError("foreground_threshold must be in (0, 1)")
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise DomainError("kernel must be an odd-sided rectangle")

    @property
    def x_start(self) -> int:
        return self.patch_size // 2

    @property
    def half(self) -> int:
        return self.patch_size // 2

    @property
    def min_foreground(self) -> float:
        return self.patch_size * self.patch_size * self.foreground_threshold


@dataclass(frozen=True)
class Patch:
    """A patch_size x patch_size crop in [0, 1] with its center coordinates."""

    data: np.ndarray
    x: int
    z: int
    sample_id: str = ""
    source_y: int = -1

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"patch must be 2D, got {self.data.shape}")
        self.data.setflags(write=False)


def dilate(img: np.ndarray, kernel: tuple[int, int] = (5, 5)) -> np.ndarray:
    """Grayscale dilation: each pixel becomes the max over the kernel window
    centered on it, with edge replication at the borders."""
    kh, kw = kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise DomainError("kernel sides must be odd")
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeMismatchError(f"dilate expects a 2D image, got {img.shape}")
    return maximum_filter(img, size=(kh, kw), mode="nearest")


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities onto the 256 histogram levels via floor(v * 255)."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def otsu(img: np.ndarray) -> int:
    """Otsu's threshold over the 256-level histogram of ``img``.

    Returns the smallest level t maximizing the between-class variance of
    the split {levels <= t} vs {levels > t}; a zero-variance image returns
    255 (everything background).  The argmax is evaluated in exact integer
    arithmetic so ties are resolved deterministically.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise DomainError("otsu on an empty image")
    levels = quantize_u8(img)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.int64)
    if np.count_nonzero(hist) <= 1:
        return 255

    counts = [int(c) for c in hist]
    sums = [i * counts[i] for i in range(256)]
    total_n = sum(counts)
    total_s = sum(sums)

    # between-class variance as the exact fraction
    # (s0*c1 - s1*c0)^2 / (c0*c1); compare via cross-multiplication
    best_t = 0
    best_num = -1
    best_den = 1
    c0 = 0
    s0 = 0
    for t in range(256):
        c0 += counts[t]
        s0 += sums[t]
        c1 = total_n - c0
        s1 = total_s - s0
        if c0 == 0 or c1 == 0:
            num, den = 0, 1
        else:
            d = s0 * c1 - s1 * c0
            num, den = d * d, c0 * c1
        if num * best_den > best_num * den:  # strict: first maximum wins
            best_num, best_den, best_t = num, den, t
    return best_t


def binarize(img: np.ndarray, threshold: int) -> np.ndarray:
    """0/1 foreground map: foreground iff quantized level > threshold."""
    return (quantize_u8(img) > threshold).astype(np.uint8)


def surface_row(binary: np.ndarray, sum_width: int | None = None) -> tuple[int, bool]:
    """Row index with the most foreground pixels (ties -> smallest row).

    Counts columns ``[0, sum_width)`` only.  Returns ``(row, found)``;
    ``found`` is False on an all-zero image (callers then yield no patches).
    """
    binary = np.asarray(binary)
    if binary.ndim != 2:
        raise ShapeMismatchError(f"surface_row expects a 2D image, got {binary.shape}")
    width = binary.shape[1] if sum_width is None else min(sum_width, binary.shape[1])
    row_counts = (binary[:, :width] != 0).sum(axis=1)
    if row_counts.max(initial=0) == 0:
        return 0, False
    return int(np.argmax(row_counts)), True


def extract_patches(bscan: BScan, cfg: ExtractionConfig = ExtractionConfig()) -> list[Patch]:
    """Run the full pipeline on one B-scan and return kept patches in (z, x) order."""
    img = bscan.data
    z_dim, x_dim = img.shape
    if z_dim < cfg.patch_size or x_dim < cfg.patch_size:
        raise TooSmallError(
            f"B-scan {img.shape} smaller than patch size {cfg.patch_size}"
        )

    dilated = dilate(img, cfg.kernel)
    threshold = otsu(dilated)
    binary = binarize(dilated, threshold)
    z_surface, found = surface_row(binary, cfg.sum_width)
    if not found:
        return []

    half = cfg.half
    min_fg = cfg.min_foreground
    out: list[Patch] = []
    for z in range(z_surface, z_dim, cfg.z_stride):
        if z - half < 0 or z + half > z_dim:
            continue
        for x in range(cfg.x_start, x_dim, cfg.x_stride):
            if x - half < 0 or x + half > x_dim:
                continue
            window = binary[z - half : z + half, x - half : x + half]
            if int(window.sum()) > min_fg:
                out.append(
                    Patch(
                        data=np.ascontiguousarray(img[z - half : z + half, x - half : x + half]),
                        x=x,
                        z=z,
                        source_y=bscan.source_y if bscan.source_y is not None else -1,
                    )
                )
    return out


# ---------------------------------------------------------------------------
# patch dataset on disk: 8-bit PNGs + index.jsonl
# ---------------------------------------------------------------------------

INDEX_NAME = "index.jsonl"


@dataclass(frozen=True)
class PatchRecord:
    """One row of ``index.jsonl``: where a stored patch came from."""

    file: str
    sample_id: str
    y: int
    x: int
    z: int
    label: str
    mask_file: str | None = None  # class-index PNG for Bonafide patches


def save_patch_png(data: np.ndarray, path: Path) -> None:
    Image.fromarray(to_u8(data), mode="L").save(path)


def load_patch_png(path: Path) -> np.ndarray:
    return from_u8(np.asarray(Image.open(path).convert("L")))


def save_mask_png(mask_onehot: np.ndarray, path: Path) -> None:
    """Store a one-hot (4, H, W) mask as a single class-index PNG."""
    idx = np.argmax(np.asarray(mask_onehot), axis=0).astype(np.uint8)
    Image.fromarray(idx, mode="L").save(path)


def load_mask_png(path: Path, n_classes: int = 4) -> np.ndarray:
    idx = np.asarray(Image.open(path).convert("L"))
    if idx.max(initial=0) >= n_classes:
        raise SchemaError(f"mask {path} holds class ids >= {n_classes}")
    onehot = np.zeros((n_classes,) + idx.shape, dtype=np.uint8)
    for c in range(n_classes):
        onehot[c] = idx == c
    return onehot


def append_index(dir_path: Path, record: PatchRecord) -> None:
    row = {
        "file": record.file,
        "sample_id": record.sample_id,
        "y": record.y,
        "x": record.x,
        "z": record.z,
        "label": record.label,
    }
    if record.mask_file is not None:
        row["mask_file"] = record.mask_file
    with open(dir_path / INDEX_NAME, "a") as f:
        f.write(json.dumps(row) + "\n")


def read_index(dir_path: Path) -> list[PatchRecord]:
    index = Path(dir_path) / INDEX_NAME
    if not index.exists():
        raise SchemaError(f"no {INDEX_NAME} in {dir_path}")
    records = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            records.append(
                PatchRecord(
                    file=row["file"],
                    sample_id=row["sample_id"],
                    y=int(row["y"]),
                    x=int(row["x"]),
                    z=int(row["z"]),
                    label=row["label"],
                    mask_file=row.get("mask_file"),
                )
            )
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise SchemaError(f"bad index line in {index}: {exc}") from exc
    return records
