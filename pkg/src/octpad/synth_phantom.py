"""Deterministic synthetic OCT fingertip phantoms.

Bonafide phantoms carry the layered structure a live fingertip shows in a
B-scan: a bright stratum-corneum band that follows a smooth surface curve,
a dimmer viable-epidermis band below a gap, and bright sweat-gland blobs
in between.  Presentation-attack (PA) phantoms come in three archetypes:

* ``HomogeneousSlab``   - a single bright band, no inner structure
                          (external-pattern mimic);
* ``ThinFilmOnLayer``   - a thin bright film over a layered substrate
                          (structure mimic that looks like a subset of a
                          live finger);
* ``DoubleLayer``       - two film-like bands whose spacing and thickness
                          do not match live skin (structure mimic).

Every generator is a pure function of its config (and PA kind): identical
seeds give byte-identical volumes.  Bonafide generation also returns the
pixel-exact one-hot segmentation mask of the noiseless geometry, which is
what supervises the attention module downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError
from .oct_core import Label, OctVolume, PaCategory, SampleMeta

# mask channel indices (see oct_core.MASK_CHANNELS)
CH_BACKGROUND = 0
CH_STRATUM_CORNEUM = 1
CH_VIABLE_EPIDERMIS = 2
CH_SWEAT_GLAND = 3

BACKGROUND_LEVEL = 0.08


class PaKind(str, Enum):
    HOMOGENEOUS_SLAB = "homogeneous_slab"
    THIN_FILM_ON_LAYER = "thin_film_on_layer"
    DOUBLE_LAYER = "double_layer"

    @property
    def pa_category(self) -> PaCategory:
        if self is PaKind.HOMOGENEOUS_SLAB:
            return PaCategory.EXTERNAL
        return PaCategory.STRUCTURE


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, contrast and noise knobs for one phantom volume.

    Depth figures are in rows.  ``layer_contrast`` is the intensity step of
    the brightest band over the background floor; it must exceed twice the
    speckle sigma so generated classes stay separable.
    """

    dims: tuple[int, int, int] = (320, 16, 512)  # (Z, Y, X)
    surface_depth_mean: int = 140
    surface_amplitude: int = 10
    stratum_corneum_thickness: int = 24
    epidermis_gap: int = 20
    viable_epidermis_thickness: int = 16
    gland_count_per_bscan: int = 12
    gland_radius: int = 5
    layer_contrast: float = 0.55
    speckle_sigma: float = 0.12
    attenuation_per_row: float = 0.002
    seed: int = 0

    def __post_init__(self) -> None:
        z, y, x = self.dims
        if min(z, y, x) < 1:
            raise ConfigError(f"dims must be positive, got {self.dims}")
        for name in (
            "stratum_corneum_thickness",
            "epidermis_gap",
            "viable_epidermis_thickness",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        extent = (
            self.stratum_corneum_thickness
            + self.epidermis_gap
            + self.viable_epidermis_thickness
        )
        if self.surface_depth_mean + extent >= z:
            raise ConfigError(
                f"layers do not fit: surface {self.surface_depth_mean} + extent {extent} >= Z={z}"
            )
        if self.surface_depth_mean + self.surface_amplitude + extent >= z:
            raise ConfigError("surface amplitude pushes layers past the bottom row")
        if self.surface_depth_mean - self.surface_amplitude < 0:
            raise ConfigError("surface amplitude pushes the surface above row 0")
        if not 0.0 < self.layer_contrast <= 1.0:
            raise ConfigError("layer_contrast must be in (0, 1]")
        if self.speckle_sigma < 0.0:
            raise ConfigError("speckle_sigma must be >= 0")
        if self.layer_contrast <= 2.0 * self.speckle_sigma:
            raise ConfigError("layer_contrast must exceed 2 * speckle_sigma")
        if self.attenuation_per_row < 0.0:
            raise ConfigError("attenuation_per_row must be >= 0")

    @property
    def layer_extent(self) -> int:
        return (
            self.stratum_corneum_thickness
            + self.epidermis_gap
            + self.viable_epidermis_thickness
        )


def noiseless(cfg: PhantomConfig) -> PhantomConfig:
    """The same phantom with speckle and attenuation switched off."""
    return replace(cfg, speckle_sigma=0.0, attenuation_per_row=0.0)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _surface_curve(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth pseudo-random surface depth per (y, x): sum of low-frequency sinusoids."""
    _, y_dim, x_dim = cfg.dims
    xs = np.arange(x_dim) / x_dim
    ys = np.arange(y_dim) / max(y_dim, 2)
    f1, f2 = rng.integers(1, 4, size=2)
    f3 = rng.integers(1, 3)
    p1, p2, p3 = rng.uniform(0.0, 2.0 * math.pi, size=3)
    wave_x = 0.55 * np.sin(2.0 * math.pi * f1 * xs + p1) + 0.25 * np.sin(
        2.0 * math.pi * f2 * xs + p2
    )
    wave_y = 0.20 * np.sin(2.0 * math.pi * f3 * ys + p3)
    curve = cfg.surface_depth_mean + cfg.surface_amplitude * (
        wave_y[:, None] + wave_x[None, :]
    )
    return np.clip(curve, 0, cfg.dims[0] - cfg.layer_extent - 1)  # (Y, X)


def _depth_grid(cfg: PhantomConfig, surface: np.ndarray) -> np.ndarray:
    """Signed depth below the surface for every voxel, shape (Z, Y, X)."""
    z_idx = np.arange(cfg.dims[0], dtype=np.float32)
    return z_idx[:, None, None] - surface[None, :, :].astype(np.float32)


def _gland_mask(cfg: PhantomConfig, surface: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rasterize circular gland blobs between the two bands, per B-scan."""
    z_dim, y_dim, x_dim = cfg.dims
    mask = np.zeros((z_dim, y_dim, x_dim), dtype=bool)
    r = cfg.gland_radius
    zz, xx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = zz * zz + xx * xx <= r * r
    gap_lo = cfg.stratum_corneum_thickness
    gap_hi = gap_lo + cfg.epidermis_gap
    for y in range(y_dim):
        for _ in range(cfg.gland_count_per_bscan):
            cx = int(rng.integers(r, x_dim - r))
            frac = rng.uniform(0.3, 0.7)
            cz = int(round(surface[y, cx] + gap_lo + frac * (gap_hi - gap_lo)))
            z0, z1 = cz - r, cz + r + 1
            x0, x1 = cx - r, cx + r + 1
            if z0 < 0 or z1 > z_dim:
                continue
            mask[z0:z1, y, x0:x1] |= disc
    return mask


def _finish_volume(cfg: PhantomConfig, clean: np.ndarray, depth: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Apply depth attenuation to the structure signal, then multiplicative speckle."""
    signal = clean - BACKGROUND_LEVEL
    atten = np.exp(-cfg.attenuation_per_row * np.clip(depth, 0.0, None))
    out = BACKGROUND_LEVEL + signal * atten
    if cfg.speckle_sigma > 0.0:
        # log-normal with unit mean so speckle does not shift band intensities
        log_noise = rng.normal(0.0, cfg.speckle_sigma, size=out.shape)
        out = out * np.exp(log_noise - 0.5 * cfg.speckle_sigma**2)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_bonafide(cfg: PhantomConfig, meta: SampleMeta | None = None) -> tuple[OctVolume, np.ndarray]:
    """Generate one Bonafide volume plus its one-hot (4, Z, Y, X) mask."""
    rng = np.random.default_rng((cfg.seed, 0))
    noise_rng = np.random.default_rng((cfg.seed, 1))
    surface = _surface_curve(cfg, rng)
    depth = _depth_grid(cfg, surface)

    sc = (depth >= 0) & (depth < cfg.stratum_corneum_thickness)
    ve_top = cfg.stratum_corneum_thickness + cfg.epidermis_gap
    ve = (depth >= ve_top) & (depth < ve_top + cfg.viable_epidermis_thickness)
    gland = _gland_mask(cfg, surface, rng)

    # label priority: gland > stratum corneum > viable epidermis
    sc = sc & ~gland
    ve = ve & ~gland

    clean = np.full(cfg.dims, BACKGROUND_LEVEL, dtype=np.float32)
    clean[sc] = BACKGROUND_LEVEL + cfg.layer_contrast
    clean[ve] = BACKGROUND_LEVEL + 0.55 * cfg.layer_contrast
    clean[gland] = BACKGROUND_LEVEL + 0.9 * cfg.layer_contrast

    mask = np.zeros((4,) + cfg.dims, dtype=np.uint8)
    mask[CH_STRATUM_CORNEUM][sc] = 1
    mask[CH_VIABLE_EPIDERMIS][ve] = 1
    mask[CH_SWEAT_GLAND][gland] = 1
    mask[CH_BACKGROUND] = 1 - mask[1:].sum(axis=0)

    data = _finish_volume(cfg, clean, depth, noise_rng)
    if meta is None:
        meta = SampleMeta(sample_id=f"bona-{cfg.seed:08d}", label=Label.BONAFIDE)
    return OctVolume(data=data, meta=meta), mask


def gen_pa(cfg: PhantomConfig, kind: PaKind, meta: SampleMeta | None = None) -> OctVolume:
    """Generate one PA volume of the given archetype (no mask: PA is never
    segmentation-supervised)."""
    rng = np.random.default_rng((cfg.seed, 0))
    noise_rng = np.random.default_rng((cfg.seed, 1))
    surface = _surface_curve(cfg, rng)
    depth = _depth_grid(cfg, surface)

    clean = np.full(cfg.dims, BACKGROUND_LEVEL, dtype=np.float32)
    if kind is PaKind.HOMOGENEOUS_SLAB:
        band = (depth >= 0) & (depth < cfg.stratum_corneum_thickness)
        clean[band] = BACKGROUND_LEVEL + cfg.layer_contrast
    elif kind is PaKind.THIN_FILM_ON_LAYER:
        film_t = max(2, cfg.stratum_corneum_thickness // 4)
        film = (depth >= 0) & (depth < film_t)
        sub_top = film_t + cfg.epidermis_gap
        substrate = (depth >= sub_top) & (depth < sub_top + cfg.viable_epidermis_thickness)
        clean[film] = BACKGROUND_LEVEL + cfg.layer_contrast
        clean[substrate] = BACKGROUND_LEVEL + 0.55 * cfg.layer_contrast
    elif kind is PaKind.DOUBLE_LAYER:
        film_t = max(2, cfg.stratum_corneum_thickness // 3)
        band_gap = cfg.epidermis_gap + cfg.viable_epidermis_thickness
        first = (depth >= 0) & (depth < film_t)
        second_top = film_t + band_gap
        second = (depth >= second_top) & (depth < second_top + film_t)
        clean[first] = BACKGROUND_LEVEL + cfg.layer_contrast
        clean[second] = BACKGROUND_LEVEL + cfg.layer_contrast
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown PA kind {kind}")

    data = _finish_volume(cfg, clean, depth, noise_rng)
    if meta is None:
        meta = SampleMeta(
            sample_id=f"pa-{kind.value}-{cfg.seed:08d}",
            label=Label.PA,
            material=f"synthetic-{kind.value}",
            pa_category=kind.pa_category,
        )
    return OctVolume(data=data, meta=meta)
