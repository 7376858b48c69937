"""
Band transformations: band difference ratios, NDVI and tasseled-cap bands.

All outputs are new ``MultiBandImage`` objects on the source grid. A pixel
whose ratio denominator is exactly zero in any output band is masked in the
whole output image.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from itertools import combinations
from math import comb

import numpy as np

from .errors import BandError
from .raster_io import MultiBandImage

SLOPE = "slope"
WV2_BANDS = ("coastal_blue", "blue", "green", "yellow", "red", "red_edge", "nir1", "nir2")
KTT_BANDS = ("brightness", "greenness", "wetness", "ktt4")

BAND_CONFIGURATIONS = {
    "BDR15": (SLOPE, "nir1", "red_edge", "brightness", "greenness", "wetness"),
    "BDR36": (SLOPE,) + WV2_BANDS,
    "BDR66": (SLOPE,) + WV2_BANDS + KTT_BANDS[:3],
    "BDR78": (SLOPE,) + WV2_BANDS + KTT_BANDS,
}


@dataclass(frozen=True)
class BandSet:
    name: str
    source_band_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.source_band_names)
        if len(set(names)) != len(names):
            raise BandError(f"band set {self.name!r} lists a band twice: {names}")
        object.__setattr__(self, "source_band_names", names)

    @property
    def ratio_count(self) -> int:
        return comb(len(self.source_band_names), 2)


@dataclass(frozen=True)
class KttCoefficients:
    """4 x 8 tasseled-cap weights; rows brightness, greenness, wetness, fourth."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 8):
            raise ValueError(f"KTT coefficients must be 4x8, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("KTT coefficients must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


def load_ktt(path=None) -> KttCoefficients:
    """Read a 4x8 coefficient CSV; ``None`` loads the packaged defaults."""
    if path is None:
        with resources.files("apmkit.data").joinpath("ktt_worldview2.csv").open() as fh:
            return KttCoefficients(np.loadtxt(fh, delimiter=",", comments="#", ndmin=2))
    return KttCoefficients(np.loadtxt(path, delimiter=",", comments="#", ndmin=2))


def ratio_name(num: str, den: str) -> str:
    return f"{num}:{den}"


def _select(img: MultiBandImage, names) -> np.ndarray:
    missing = [n for n in names if n not in img.band_names]
    if missing:
        raise BandError(f"missing band(s) {missing}; image has {list(img.band_names)}")
    return np.stack([img.band(n) for n in names])


def _normalized_difference(a, b):
    """(a - b) / (a + b) in float64; NaN where the denominator is zero."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    den = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a - b) / den
    out[den == 0] = np.nan
    return out


def band_difference_ratios(img: MultiBandImage, bandset: BandSet) -> MultiBandImage:
    """All C(B, 2) normalized differences over the band set.

    Pairs are (j, i) with j < i in band-set order, enumerated
    lexicographically; band k is ``(B_i - B_j) / (B_i + B_j)`` and is named
    ``"<B_i>:<B_j>"``.
    """
    names = bandset.source_band_names
    if len(names) < 2:
        raise BandError(f"band set {bandset.name!r} needs at least 2 bands, has {len(names)}")
    src = _select(img, names)
    pairs = list(combinations(range(len(names)), 2))
    out = np.empty((len(pairs), img.height, img.width), dtype=np.float64)
    for k, (j, i) in enumerate(pairs):
        out[k] = _normalized_difference(src[i], src[j])
    mask = img.mask & np.isfinite(out).all(axis=0)
    out[:, ~mask] = 0.0
    return img.with_bands(out, [ratio_name(names[i], names[j]) for j, i in pairs], mask)


def select_bands(img: MultiBandImage, bandset: BandSet) -> MultiBandImage:
    """Identity transformation restricted to the band set."""
    return img.with_bands(_select(img, bandset.source_band_names), bandset.source_band_names)


def ndvi(img: MultiBandImage, nir_band: str = "nir1", red_band: str = "red",
         append: bool = False) -> MultiBandImage:
    src = _select(img, (nir_band, red_band))
    out = _normalized_difference(src[0], src[1])
    mask = img.mask & np.isfinite(out)
    out[~mask] = 0.0
    if append:
        return img.with_bands(np.concatenate([img.bands, out[None]]),
                              img.band_names + ("ndvi",), mask)
    return img.with_bands(out[None], ("ndvi",), mask)


def tasseled_cap(img: MultiBandImage, coeffs: KttCoefficients | None = None,
                 band_names=WV2_BANDS) -> MultiBandImage:
    """Brightness, greenness, wetness and fourth component as a 4-band image.

    ``band_names`` picks the eight spectral bands in sensor order. When the
    image carries none of those names and has exactly eight bands, its bands
    are used in stored order.
    """
    coeffs = load_ktt() if coeffs is None else coeffs
    band_names = tuple(band_names)
    if len(band_names) != 8:
        raise BandError(f"tasseled cap needs 8 spectral bands, got {len(band_names)}")
    if not set(band_names) & set(img.band_names) and img.header.band_count == 8:
        src = img.bands
    else:
        src = _select(img, band_names)
    flat = src.reshape(8, -1).astype(np.float64)
    out = (coeffs.matrix @ flat).reshape(4, img.height, img.width)
    return img.with_bands(out, KTT_BANDS)


def stack(*images: MultiBandImage) -> MultiBandImage:
    """Concatenate the bands of co-registered images; masks are intersected."""
    first = images[0]
    mask = first.mask.copy()
    for im in images[1:]:
        if (im.width, im.height) != (first.width, first.height):
            raise ValueError("cannot stack images of different size")
        mask &= im.mask
    names = sum((im.band_names for im in images), ())
    return first.with_bands(np.concatenate([im.bands for im in images]), names, mask)


def build_band_configuration(img: MultiBandImage, config_name: str,
                             coeffs: KttCoefficients | None = None) -> MultiBandImage:
    """Band difference ratios for one of the named configurations.

    Tasseled-cap bands required by the configuration are derived from the
    spectral bands when the image does not already carry them.
    ``"IDENTITY"`` returns slope plus the eight spectral bands untransformed.
    """
    key = config_name.upper()
    if key == "IDENTITY":
        return select_bands(img, BandSet(key, BAND_CONFIGURATIONS["BDR36"]))
    if key not in BAND_CONFIGURATIONS:
        raise BandError(
            f"unknown band configuration {config_name!r}; "
            f"choose from {sorted(BAND_CONFIGURATIONS) + ['IDENTITY']}"
        )
    names = BAND_CONFIGURATIONS[key]
    need_ktt = [n for n in names if n in KTT_BANDS and n not in img.band_names]
    if need_ktt:
        missing = [b for b in WV2_BANDS if b not in img.band_names]
        if missing:
            raise BandError(f"{key} needs {need_ktt}, which require spectral bands {missing}")
        img = stack(img, tasseled_cap(img, coeffs))
    missing = [n for n in names if n not in img.band_names]
    if missing:
        raise BandError(f"{key} is missing prerequisite band(s) {missing}")
    return band_difference_ratios(img, BandSet(key, names))
