"""
Synthetic multispectral swaths with planted concentric-anomaly sites.

The background of band b is ``base_b * (1 + a * S) + base_b * a_b * S_b``
plus white noise, where ``S`` is a smooth field shared by all bands (a
common illumination/albedo factor that band ratios cancel) and ``S_b`` a
weaker per-band field. Each site adds a core offset inside the core radius
and a ring offset out to the ring radius. Offsets alternate in sign across
bands, so band difference ratios change at sites while raw brightness
barely does.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bands import SLOPE, WV2_BANDS
from .errors import InfeasibleError
from .raster_io import MultiBandImage, SiteTable, sample_background

logger = logging.getLogger(__name__)

_MAX_TRIES_PER_SITE = 500


@dataclass(frozen=True)
class SynthConfig:
    width: int = 512
    height: int = 512
    band_count: int = 9
    n_sites: int = 37
    site_core_radius: float = 4.0
    site_ring_radius: float = 8.0
    core_contrast: tuple[float, ...] | None = None
    ring_contrast: tuple[float, ...] | None = None
    noise_sigma: float = 3.0
    background_texture_scale: float = 24.0
    min_site_separation: float = 40.0
    seed: int = 0
    base_level: tuple[float, ...] | None = None
    texture_amplitude: float = 0.15
    band_texture_amplitude: float = 0.02
    band_names: tuple[str, ...] | None = None
    pixel_size_m: float = 2.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.band_count < 1:
            raise ValueError("width, height and band_count must be >= 1")
        if self.n_sites < 0:
            raise ValueError("n_sites must be >= 0")
        if not 0 <= self.site_core_radius < self.site_ring_radius:
            raise ValueError("need 0 <= site_core_radius < site_ring_radius")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.background_texture_scale > 0:
            raise ValueError("background_texture_scale must be > 0")
        if self.min_site_separation < 0:
            raise ValueError("min_site_separation must be >= 0")
        for name in ("core_contrast", "ring_contrast", "base_level", "band_names"):
            v = getattr(self, name)
            if v is None:
                continue
            v = tuple(v)
            if len(v) != self.band_count:
                raise ValueError(f"{name} needs {self.band_count} entries, got {len(v)}")
            if name != "band_names" and not np.isfinite(np.asarray(v, dtype=float)).all():
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.base_level is not None and min(self.base_level) <= 0:
            raise ValueError("base_level entries must be positive")

    # resolved per-band parameters

    def names(self) -> tuple[str, ...]:
        if self.band_names is not None:
            return self.band_names
        if self.band_count == 1 + len(WV2_BANDS):
            return (SLOPE,) + WV2_BANDS
        return tuple(f"b{i + 1}" for i in range(self.band_count))

    def bases(self) -> np.ndarray:
        if self.base_level is not None:
            return np.array(self.base_level, dtype=np.float64)
        base = 200.0 + 20.0 * np.arange(self.band_count)
        if self.names()[0] == SLOPE:
            base[0] = 20.0
        return base

    def _signs(self) -> np.ndarray:
        return np.where(np.arange(self.band_count) % 2 == 0, 1.0, -1.0)

    def cores(self) -> np.ndarray:
        if self.core_contrast is not None:
            return np.array(self.core_contrast, dtype=np.float64)
        return 0.015 * self.bases() * self._signs()

    def rings(self) -> np.ndarray:
        if self.ring_contrast is not None:
            return np.array(self.ring_contrast, dtype=np.float64)
        return -0.01 * self.bases() * self._signs()

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(doc) - known)
        if extra:
            raise ValueError(f"unknown SynthConfig field(s): {extra}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})

    @classmethod
    def load(cls, path) -> "SynthConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def _smooth_field(rng, shape, scale):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def place_sites(cfg: SynthConfig, rng) -> np.ndarray:
    """(n_sites, 2) integer (x, y) centres honouring margin and separation."""
    margin = int(np.ceil(cfg.site_ring_radius))
    lo_x, hi_x = margin, cfg.width - margin
    lo_y, hi_y = margin, cfg.height - margin
    if cfg.n_sites and (hi_x <= lo_x or hi_y <= lo_y):
        raise InfeasibleError("image too small for the site ring radius")
    pts: list[tuple[int, int]] = []
    sep2 = cfg.min_site_separation ** 2
    tries = 0
    while len(pts) < cfg.n_sites:
        if tries >= _MAX_TRIES_PER_SITE * cfg.n_sites:
            raise InfeasibleError(
                f"placed only {len(pts)} of {cfg.n_sites} sites at separation "
                f"{cfg.min_site_separation} px after {tries} tries"
            )
        tries += 1
        x = int(rng.integers(lo_x, hi_x))
        y = int(rng.integers(lo_y, hi_y))
        if all((x - a) ** 2 + (y - b) ** 2 >= sep2 for a, b in pts):
            pts.append((x, y))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def _site_offsets(cfg: SynthConfig):
    r = int(np.ceil(cfg.site_ring_radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    d2 = (dx * dx + dy * dy).astype(np.float64)
    core = d2 < cfg.site_core_radius ** 2
    ring = (d2 < cfg.site_ring_radius ** 2) & ~core
    return dx, dy, core, ring


def generate_swath(cfg: SynthConfig) -> tuple[MultiBandImage, SiteTable]:
    """Synthetic image and its label-1 site table; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    centres = place_sites(cfg, rng)
    shape = (cfg.height, cfg.width)
    base = cfg.bases()
    shared = _smooth_field(rng, shape, cfg.background_texture_scale)
    bands = np.empty((cfg.band_count,) + shape)
    for b in range(cfg.band_count):
        own = _smooth_field(rng, shape, cfg.background_texture_scale)
        noise = rng.standard_normal(shape)
        bands[b] = base[b] * (1.0 + cfg.texture_amplitude * shared
                              + cfg.band_texture_amplitude * own) + cfg.noise_sigma * noise
    dx, dy, core, ring = _site_offsets(cfg)
    cores, rings = cfg.cores(), cfg.rings()
    for x, y in centres:
        xs, ys = x + dx, y + dy
        inb = (xs >= 0) & (xs < cfg.width) & (ys >= 0) & (ys < cfg.height)
        for sel, add in ((core & inb, cores), (ring & inb, rings)):
            bands[:, ys[sel], xs[sel]] += add[:, None]
    np.maximum(bands, 1.0, out=bands)
    img = MultiBandImage.from_arrays(bands.astype(np.float32), cfg.names(),
                                     pixel_size_m=cfg.pixel_size_m)
    n = len(centres)
    sites = SiteTable(tuple(f"site{k:04d}" for k in range(n)), centres[:, 0], centres[:, 1],
                      np.ones(n, dtype=np.int64))
    return img, sites


def background_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1]).generate_state(1)[0])


def generate_labeled_dataset(cfg: SynthConfig, n_background: int) -> tuple[MultiBandImage, SiteTable]:
    """Swath plus sites (label 1) and ``n_background`` label-0 points.

    Background points are at least four ring radii from every site.
    """
    img, sites = generate_swath(cfg)
    min_dist_m = cfg.site_ring_radius * 4 * cfg.pixel_size_m
    bg = sample_background(img, sites, n_background, min_dist_m, background_seed(cfg.seed))
    table = sites.concat(bg)
    if table.n0 == 0 or table.n1 == 0:
        logger.warning("synthetic table has a single class; it cannot be used for ROC")
    return img, table


def generate_conventional(cfg: SynthConfig, sites: SiteTable, informativeness: float = 1.0,
                          length_scale: float = 60.0) -> MultiBandImage:
    """Six-level score raster loosely tracking site density, like a regional expert map.

    A smooth random field is mixed with a broad bump around every label-1
    site and cut into six equally populated levels {0, 0.2, ..., 1}.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 2]))
    shape = (cfg.height, cfg.width)
    field = _smooth_field(rng, shape, length_scale / 2)
    bump = np.zeros(shape)
    pos = sites.labels == 1
    bump[sites.y[pos], sites.x[pos]] = 1.0
    bump = ndimage.gaussian_filter(bump, length_scale, mode="constant")
    if bump.max() > 0:
        bump /= bump.max()
    score = field + 3.0 * informativeness * bump
    edges = np.quantile(score, [1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6])
    levels = np.searchsorted(edges, score, side="right") / 5.0
    return MultiBandImage.from_arrays(levels.astype(np.float32), ("conventional",),
                                      pixel_size_m=cfg.pixel_size_m)
