"""
Annuli statistics around site locations.

For every band and every annulus ``r_in <= ||offset|| < r_out`` centred on a
site pixel, the median of the valid pixel values and their (unscaled) median
absolute deviation are computed. Per band the feature block is the 30
medians followed by the 30 MADs, giving ``60 * B`` columns for ``B`` bands
with the default radii table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyAnnulusError, ApmkitError
from .raster_io import MultiBandImage, SiteTable, _atomic_write


@dataclass(frozen=True)
class RadiiTable:
    inner: tuple[float, ...]
    outer: tuple[float, ...]

    def __post_init__(self):
        inner, outer = tuple(self.inner), tuple(self.outer)
        if len(inner) != len(outer) or not inner:
            raise ValueError("radii table needs matching, non-empty inner/outer lists")
        for k, (a, b) in enumerate(zip(inner, outer), start=1):
            if not 0 <= a < b:
                raise ValueError(f"radii entry {k}: need 0 <= r_in < r_out, got ({a}, {b})")
        object.__setattr__(self, "inner", inner)
        object.__setattr__(self, "outer", outer)

    def __len__(self):
        return len(self.inner)

    @property
    def max_radius(self) -> int:
        return int(math.ceil(max(self.outer)))


def default_radii() -> RadiiTable:
    """Three groups of ten annuli with widths 2, 4 and 6 pixels."""
    inner, outer = [], []
    for step, width in ((3, 2), (5, 4), (7, 6)):
        for k in range(10):
            inner.append(step * k)
            outer.append(step * k + width)
    return RadiiTable(tuple(inner), tuple(outer))


def load_radii(path) -> RadiiTable:
    """CSV with header ``index,r_in,r_out``; rows are sorted by index."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["index", "r_in", "r_out"]:
            raise ValueError(f"{path}: expected header 'index,r_in,r_out'")
        for row in reader:
            rows.append((int(row["index"]), _num(row["r_in"]), _num(row["r_out"])))
    rows.sort()
    return RadiiTable(tuple(r[1] for r in rows), tuple(r[2] for r in rows))


def _num(text):
    v = float(text)
    return int(v) if v.is_integer() else v


def annulus_offsets(table: RadiiTable) -> list[np.ndarray]:
    """Integer ``(dx, dy)`` offsets per entry, ordered by dy then dx."""
    r = table.max_radius
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dx, dy = dx.ravel(), dy.ravel()
    sq = dx * dx + dy * dy
    out = []
    for a, b in zip(table.inner, table.outer):
        keep = (sq >= a * a) & (sq < b * b)
        out.append(np.column_stack([dx[keep], dy[keep]]))
    return out


def _median_rows(v: np.ndarray) -> np.ndarray:
    # mean of the two middle order statistics for even counts
    return np.median(v, axis=1)


def site_features(img: MultiBandImage, x: int, y: int, offsets, site_id=None,
                  table: RadiiTable | None = None) -> np.ndarray:
    """Feature vector of length ``2 * len(offsets) * band_count`` for pixel (x, y)."""
    if not (0 <= x < img.width and 0 <= y < img.height):
        raise ApmkitError(f"site {site_id or (x, y)} outside the image")
    nb, na = img.header.band_count, len(offsets)
    med = np.empty((nb, na))
    mad = np.empty((nb, na))
    bands = img.bands
    for i, off in enumerate(offsets):
        xs = x + off[:, 0]
        ys = y + off[:, 1]
        inb = (xs >= 0) & (xs < img.width) & (ys >= 0) & (ys < img.height)
        xs, ys = xs[inb], ys[inb]
        ok = img.mask[ys, xs]
        if not ok.any():
            r_in = table.inner[i] if table else None
            r_out = table.outer[i] if table else None
            raise EmptyAnnulusError(i + 1, r_in, r_out, site_id)
        vals = bands[:, ys[ok], xs[ok]].astype(np.float64)
        m = _median_rows(vals)
        med[:, i] = m
        mad[:, i] = _median_rows(np.abs(vals - m[:, None]))
    return np.concatenate([med, mad], axis=1).ravel()


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    ids: tuple[str, ...]
    columns: tuple[str, ...]
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape != (len(self.ids), len(self.columns)):
            raise ValueError(
                f"values shape {v.shape} inconsistent with {len(self.ids)} ids and "
                f"{len(self.columns)} columns"
            )
        if not np.isfinite(v).all():
            raise ValueError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def shape(self):
        return self.values.shape

    def equals(self, other: "FeatureMatrix") -> bool:
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.ids == other.ids and self.columns == other.columns and same_labels
                and self.values.tobytes() == other.values.tobytes())


def feature_columns(band_names, n_annuli: int) -> tuple[str, ...]:
    cols = []
    for b in band_names:
        for stat in ("median", "mad"):
            cols += [f"{b}|{stat}|{i}" for i in range(1, n_annuli + 1)]
    return tuple(cols)


def extract_features(img: MultiBandImage, sites: SiteTable, table: RadiiTable | None = None,
                     n_jobs: int = 1) -> FeatureMatrix:
    """One feature row per site, in table order."""
    table = default_radii() if table is None else table
    sites.check_bounds(img)
    offsets = annulus_offsets(table)
    cols = feature_columns(img.band_names, len(table))

    def one(k):
        return site_features(img, int(sites.x[k]), int(sites.y[k]), offsets,
                             site_id=sites.ids[k], table=table)

    if n_jobs == 1 or len(sites) < 2:
        rows = [one(k) for k in range(len(sites))]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(one)(k) for k in range(len(sites)))
    values = np.vstack(rows) if rows else np.empty((0, len(cols)))
    return FeatureMatrix(values, sites.ids, cols, sites.labels.copy())


def save_features(fm: FeatureMatrix, path) -> Path:
    """CSV: ``id,label,<column labels...>``; floats written in round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for c in fm.columns:
        if "," in c:
            raise ValueError(f"column label {c!r} contains a comma")
    lines = [",".join(("id", "label") + fm.columns)]
    labels = fm.labels if fm.labels is not None else [None] * len(fm.ids)
    for sid, lab, row in zip(fm.ids, labels, fm.values):
        lab = "" if lab is None else str(int(lab))
        lines.append(",".join([sid, lab] + [repr(float(v)) for v in row]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def load_features(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: feature CSV must start with 'id,label'")
        ids, labels, rows = [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            labels.append(int(row[1]) if row[1] != "" else -1)
            rows.append([float(v) for v in row[2:]])
    cols = tuple(header[2:])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))
    lab = None if any(v < 0 for v in labels) else np.array(labels, dtype=np.int64)
    return FeatureMatrix(values, tuple(ids), cols, lab)
