"""
Multi-band raster containers, their on-disk format, and site tables.

A raster is stored as two files sharing a stem: ``<name>.json`` holds the
header and ``<name>.bin`` holds ``width * height * band_count`` little-endian
float32 values, band-sequential and row-major. Pixels equal to the header's
``nodata_value`` in any band are invalid in every band.

Site tables are CSV files with the header ``id,x,y,label`` where ``x`` is
the column index, ``y`` the row index and ``label`` is 0 or 1.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BandError, InfeasibleError, RasterFormatError, SiteTableError

DTYPE = "f32le"
LAYOUT = "band_sequential_row_major"
DEFAULT_NODATA = -9999.0


@dataclass(frozen=True)
class RasterHeader:
    width: int
    height: int
    band_count: int
    band_names: tuple[str, ...]
    nodata_value: float = DEFAULT_NODATA
    pixel_size_m: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "band_names", tuple(str(b) for b in self.band_names))
        if self.width < 1 or self.height < 1:
            raise RasterFormatError(f"invalid raster size {self.width}x{self.height}")
        if self.band_count < 1:
            raise RasterFormatError("band_count must be >= 1")
        if len(self.band_names) != self.band_count:
            raise RasterFormatError(
                f"{len(self.band_names)} band names for {self.band_count} bands"
            )
        if len(set(self.band_names)) != self.band_count:
            raise RasterFormatError(f"duplicate band names in {self.band_names}")
        if not self.pixel_size_m > 0:
            raise RasterFormatError("pixel_size_m must be positive")

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "band_count": self.band_count,
            "band_names": list(self.band_names),
            "nodata_value": _json_float(self.nodata_value),
            "pixel_size_m": self.pixel_size_m,
            "dtype": DTYPE,
            "layout": LAYOUT,
        }


def _json_float(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else v


def _is_nodata(values, nodata):
    if isinstance(nodata, float) and math.isnan(nodata):
        return np.isnan(values)
    return values == np.float32(nodata)


@dataclass(frozen=True, eq=False)
class MultiBandImage:
    """Co-registered bands of shape ``(band_count, height, width)``.

    ``mask`` is True on valid pixels and is shared by all bands. Invalid
    pixels hold ``header.nodata_value`` in every band so that saving and
    reloading is an exact round trip.
    """

    header: RasterHeader
    bands: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        h = self.header
        bands = np.array(self.bands, dtype=np.float32, copy=True)
        mask = np.array(self.mask, dtype=bool, copy=True)
        if bands.shape != (h.band_count, h.height, h.width):
            raise RasterFormatError(
                f"band array shape {bands.shape} does not match header "
                f"({h.band_count}, {h.height}, {h.width})"
            )
        if mask.shape != (h.height, h.width):
            raise RasterFormatError(f"mask shape {mask.shape} != {(h.height, h.width)}")
        if not np.isfinite(bands[:, mask]).all():
            raise RasterFormatError("non-finite values among valid pixels")
        bands[:, ~mask] = np.float32(h.nodata_value)
        bands.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_arrays(cls, bands, band_names, mask=None, nodata_value=DEFAULT_NODATA,
                    pixel_size_m=2.0):
        bands = np.asarray(bands)
        if bands.ndim == 2:
            bands = bands[None]
        b, hgt, wid = bands.shape
        if mask is None:
            mask = np.ones((hgt, wid), dtype=bool)
        header = RasterHeader(wid, hgt, b, tuple(band_names), nodata_value, pixel_size_m)
        return cls(header, bands, mask)

    @property
    def width(self) -> int:
        return self.header.width

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def band_names(self) -> tuple[str, ...]:
        return self.header.band_names

    def band(self, name: str) -> np.ndarray:
        try:
            return self.bands[self.band_names.index(name)]
        except ValueError:
            raise BandError(f"band {name!r} not in image (have {list(self.band_names)})") from None

    def with_bands(self, bands, band_names, mask=None) -> "MultiBandImage":
        """New image sharing this one's geometry and nodata settings."""
        h = self.header
        return MultiBandImage.from_arrays(
            bands, band_names, self.mask if mask is None else mask,
            nodata_value=h.nodata_value, pixel_size_m=h.pixel_size_m,
        )

    def equals(self, other: "MultiBandImage") -> bool:
        return (
            self.header == other.header
            and np.array_equal(self.mask, other.mask)
            and self.bands.tobytes() == other.bands.tobytes()
        )


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_raster(img: MultiBandImage, path) -> Path:
    """Write ``img`` as ``<stem>.json`` + ``<stem>.bin``; returns the header path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = img.bands.astype("<f4", copy=False).tobytes(order="C")
    _atomic_write(stem.with_suffix(".bin"), payload)
    text = json.dumps(img.header.to_json(), indent=2) + "\n"
    _atomic_write(stem.with_suffix(".json"), text.encode())
    return stem.with_suffix(".json")


def load_raster(path) -> MultiBandImage:
    stem = _stem(path)
    hpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    for p in (hpath, bpath):
        if not p.exists():
            raise FileNotFoundError(f"raster file not found: {p}")
    try:
        meta = json.loads(hpath.read_text())
    except json.JSONDecodeError as exc:
        raise RasterFormatError(f"{hpath}: invalid JSON header ({exc})") from None
    if meta.get("dtype", DTYPE) != DTYPE or meta.get("layout", LAYOUT) != LAYOUT:
        raise RasterFormatError(f"{hpath}: unsupported dtype/layout")
    try:
        nodata = meta.get("nodata_value", DEFAULT_NODATA)
        nodata = float("nan") if nodata in ("nan", None) else float(nodata)
        header = RasterHeader(
            int(meta["width"]), int(meta["height"]), int(meta["band_count"]),
            tuple(meta["band_names"]), nodata, float(meta.get("pixel_size_m", 2.0)),
        )
    except KeyError as exc:
        raise RasterFormatError(f"{hpath}: missing header field {exc}") from None
    expected = header.width * header.height * header.band_count
    raw = np.fromfile(bpath, dtype="<f4")
    if raw.size != expected or bpath.stat().st_size != 4 * expected:
        raise RasterFormatError(
            f"{bpath}: payload holds {bpath.stat().st_size} bytes, expected {4 * expected}"
        )
    bands = raw.reshape(header.band_count, header.height, header.width).astype(np.float32)
    mask = ~_is_nodata(bands, header.nodata_value).any(axis=0)
    return MultiBandImage(header, bands, mask)


def crop(img: MultiBandImage, x0: int, y0: int, w: int, h: int) -> MultiBandImage:
    """Window of ``w`` columns by ``h`` rows whose (0, 0) is source (x0, y0)."""
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > img.width or y0 + h > img.height:
        raise ValueError(
            f"crop window x0={x0} y0={y0} w={w} h={h} outside {img.width}x{img.height} image"
        )
    hd = img.header
    header = replace(hd, width=w, height=h)
    return MultiBandImage(
        header,
        img.bands[:, y0:y0 + h, x0:x0 + w],
        img.mask[y0:y0 + h, x0:x0 + w],
    )


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- site tables ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SiteTable:
    ids: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(ids) == x.size == y.size == labels.size):
            raise SiteTableError("ids, x, y and labels must have equal length")
        if len(set(ids)) != len(ids):
            seen, dup = set(), []
            for i in ids:
                (dup.append(i) if i in seen else seen.add(i))
            raise SiteTableError(f"duplicate site ids: {sorted(set(dup))}", sorted(set(dup)))
        bad = ~np.isin(labels, (0, 1))
        if bad.any():
            raise SiteTableError(
                f"labels must be 0 or 1; site {ids[int(np.argmax(bad))]!r} has "
                f"{labels[bad][0]}",
                [ids[i] for i in np.flatnonzero(bad)],
            )
        for arr in (x, y, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_index", {s: k for k, s in enumerate(ids)})

    def __len__(self):
        return len(self.ids)

    @property
    def n1(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n0(self) -> int:
        return int((self.labels == 0).sum())

    def index_of(self, site_id: str) -> int:
        return self._index[site_id]

    def subset(self, idx) -> "SiteTable":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SiteTable(tuple(self.ids[i] for i in idx.tolist()),
                         self.x[idx], self.y[idx], self.labels[idx])

    def concat(self, other: "SiteTable") -> "SiteTable":
        return SiteTable(self.ids + other.ids, np.r_[self.x, other.x],
                         np.r_[self.y, other.y], np.r_[self.labels, other.labels])

    def check_bounds(self, img: MultiBandImage):
        out = (self.x < 0) | (self.x >= img.width) | (self.y < 0) | (self.y >= img.height)
        if out.any():
            bad = [self.ids[i] for i in np.flatnonzero(out)]
            raise SiteTableError(f"sites outside the {img.width}x{img.height} image: {bad}", bad)

    def equals(self, other: "SiteTable") -> bool:
        return (self.ids == other.ids and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.labels, other.labels))


def load_sites(path) -> SiteTable:
    ids, xs, ys, labels = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "x", "y", "label"]:
            raise SiteTableError(f"{path}: expected header 'id,x,y,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SiteTableError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                x, y, lab = int(row[1]), int(row[2]), int(row[3])
            except ValueError:
                raise SiteTableError(f"{path}:{lineno}: malformed row {row}") from None
            ids.append(row[0].strip())
            xs.append(x)
            ys.append(y)
            labels.append(lab)
    return SiteTable(tuple(ids), np.array(xs, dtype=np.int64),
                     np.array(ys, dtype=np.int64), np.array(labels, dtype=np.int64))


def save_sites(sites: SiteTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["id,x,y,label"]
    lines += [f"{i},{x},{y},{lab}" for i, x, y, lab in
              zip(sites.ids, sites.x.tolist(), sites.y.tolist(), sites.labels.tolist())]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def sample_background(img: MultiBandImage, sites: SiteTable, n0: int, min_dist_m: float,
                      seed: int, id_prefix: str = "bg") -> SiteTable:
    """Draw ``n0`` label-0 locations uniformly from eligible valid pixels.

    A pixel is eligible when it is valid, is not the coordinate of any listed
    site, and lies at Euclidean distance >= ``min_dist_m`` (converted through
    ``pixel_size_m``) from every label-1 site.
    """
    if n0 < 0:
        raise ValueError("n0 must be non-negative")
    sites.check_bounds(img)
    eligible = img.mask.copy()
    pos = sites.labels == 1
    if pos.any() and min_dist_m > 0:
        seeds = np.ones(img.mask.shape, dtype=bool)
        seeds[sites.y[pos], sites.x[pos]] = False
        dist_m = ndimage.distance_transform_edt(seeds) * img.header.pixel_size_m
        eligible &= dist_m >= min_dist_m
    eligible[sites.y, sites.x] = False
    flat = np.flatnonzero(eligible)
    if flat.size < n0:
        raise InfeasibleError(
            f"only {flat.size} eligible pixels for {n0} background samples "
            f"at min distance {min_dist_m} m"
        )
    rng = np.random.default_rng(seed)
    pick = flat[rng.choice(flat.size, size=n0, replace=False)]
    ys, xs = np.divmod(pick, img.width)
    taken = set(sites.ids)
    ids, k = [], 0
    while len(ids) < n0:
        cand = f"{id_prefix}{k:04d}"
        if cand not in taken:
            ids.append(cand)
        k += 1
    return SiteTable(tuple(ids), xs, ys, np.zeros(n0, dtype=np.int64))
