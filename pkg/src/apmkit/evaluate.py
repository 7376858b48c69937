"""
ROC/AUC evaluation, convex score combination and the gamma search.

Tied scores form one threshold group, so the ROC curve takes a diagonal
step through them and the trapezoidal AUC equals the Mann-Whitney statistic
with ties counted one half. The area is accumulated in integer counts and
divided once, which makes it exactly equal to brute-force pair counting.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import SiteTableError
from .raster_io import MultiBandImage, SiteTable, _atomic_write

CONVENTIONAL_LEVELS = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
DEFAULT_FNR_LEVELS = (0.05, 0.10, 0.20)


def default_gamma_grid() -> np.ndarray:
    return np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Operating points by descending threshold; ``tau[0]`` is +inf at (0, 0)."""

    tau: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_pos: int
    n_neg: int

    def __len__(self):
        return self.tau.size


def _clean(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    keep = ~np.isnan(s)
    return s[keep], y[keep].astype(np.int64)


def roc_curve(scores, labels) -> RocCurve:
    """ROC curve with one operating point per distinct score.

    NaN scores (rejected samples) are left out.
    """
    s, y = _clean(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("ROC needs both labels among the scored samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    # trapezoid in integer units: sum dFP * (TP_prev + TP_cur) = 2*concordant + ties
    twice = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice / (2 * n1 * n0)
    tau = np.r_[np.inf, s[last]]
    return RocCurve(tau, fp / n0, tp / n1, auc, n1, n0)


def auc_score(scores, labels) -> float:
    return roc_curve(scores, labels).auc


def tnr_at_fnr(curve: RocCurve, levels=DEFAULT_FNR_LEVELS) -> dict:
    """Best true-negative rate among operating points with FNR at most each level."""
    out = {}
    for lv in levels:
        ok = 1.0 - curve.tpr <= lv + 1e-12
        out[float(lv)] = float(np.max(1.0 - curve.fpr[ok])) if ok.any() else 0.0
    return out


# -- score pairs and the convex combination ---------------------------------------------


@dataclass(frozen=True, eq=False)
class ScorePairs:
    ids: tuple[str, ...]
    conventional: np.ndarray
    enhanced: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.conventional, dtype=np.float64).reshape(-1)
        e = np.asarray(self.enhanced, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if not len(self.ids) == c.size == e.size == y.size:
            raise ValueError("score pair columns differ in length")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if not np.isfinite(c).all():
            raise ValueError("conventional scores must be finite")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "conventional", c)
        object.__setattr__(self, "enhanced", e)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.ids)


def snap_conventional(values, tol: float = 1e-6) -> np.ndarray:
    """Map values onto the six-level grid {0, 0.2, ..., 1}; error if any is off-grid."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.rint(v * 5.0)
    bad = ~(np.abs(v * 5.0 - idx) <= 5.0 * tol) | (idx < 0) | (idx > 5)
    if bad.any():
        raise ValueError(f"{int(bad.sum())} conventional score(s) off the six-level grid, "
                         f"e.g. {v[bad][0]!r}")
    return CONVENTIONAL_LEVELS[idx.astype(int)]


def sample_conventional(img: MultiBandImage, sites: SiteTable, snap: bool = True) -> np.ndarray:
    """Conventional scores read from band 0 of a score raster at the site pixels."""
    sites.check_bounds(img)
    ys, xs = sites.y, sites.x
    invalid = ~img.mask[ys, xs]
    if invalid.any():
        bad = [sites.ids[i] for i in np.flatnonzero(invalid)]
        raise SiteTableError(f"conventional raster has no data at site(s) {bad}", bad)
    v = img.bands[0][ys, xs].astype(np.float64)
    return snap_conventional(v) if snap else v


def convex_combine(pairs: ScorePairs, gamma: float) -> np.ndarray:
    """(1 - gamma) * conventional + gamma * enhanced, per site."""
    gamma = float(gamma)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 0.0:
        return pairs.conventional.copy()
    if gamma == 1.0:
        return pairs.enhanced.copy()
    return (1.0 - gamma) * pairs.conventional + gamma * pairs.enhanced


def select_gamma(pairs: ScorePairs, grid=None):
    """(gamma*, AUC per grid value); ties go to the smallest gamma."""
    grid = default_gamma_grid() if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ValueError("gamma grid is empty")
    if ((grid < 0) | (grid > 1)).any():
        raise ValueError("gamma grid values must lie in [0, 1]")
    aucs = np.array([auc_score(convex_combine(pairs, g), pairs.labels) for g in grid])
    best = aucs.max()
    gamma_star = float(grid[aucs == best].min())
    return gamma_star, aucs


def tiebreak_bound(pairs: ScorePairs) -> float:
    """Largest admissible gamma for which no conventional ordering can flip.

    With minimum gap ``g`` between distinct conventional levels and enhanced
    range ``R``, order between levels is kept while ``gamma < g / (g + R)``.
    """
    levels = np.unique(pairs.conventional)
    e = pairs.enhanced[~np.isnan(pairs.enhanced)]
    rng = float(e.max() - e.min()) if e.size else 0.0
    if levels.size < 2 or rng == 0.0:
        return 1.0
    gap = float(np.diff(levels).min())
    return gap / (gap + rng)


def tiebreak_refinement_check(pairs: ScorePairs, eps: float = 0.01) -> bool:
    """True iff the gamma = eps combination ranks sites lexicographically.

    Sites with different conventional scores must keep their order, and sites
    sharing a conventional level must be ordered (with ties) as their
    enhanced scores.
    """
    if np.isnan(pairs.enhanced).any():
        raise ValueError("enhanced scores contain NaN (rejected samples)")
    bound = tiebreak_bound(pairs)
    if not 0.0 < eps < bound:
        raise ValueError(f"eps={eps} violates the precondition 0 < eps < {bound:.6g}")
    c, e = pairs.conventional, pairs.enhanced
    comb = convex_combine(pairs, eps)
    order = np.lexsort((e, c))
    c, e, comb = c[order], e[order], comb[order]
    key_up = (np.diff(c) > 0) | ((np.diff(c) == 0) & (np.diff(e) > 0))
    step = np.diff(comb)
    return bool(np.all(np.where(key_up, step > 0, step == 0)))


# -- outputs -----------------------------------------------------------------------------


def _fmt(v) -> str:
    v = float(v)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(r) for r in rows]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def write_roc_csv(curve: RocCurve, path) -> Path:
    return _write_csv(path, ("tau", "fpr", "tpr"),
                      ([_fmt(t), _fmt(f), _fmt(p)] for t, f, p in zip(curve.tau, curve.fpr, curve.tpr)))


def write_gamma_csv(grid, aucs, path) -> Path:
    return _write_csv(path, ("gamma", "auc"), ([_fmt(g), _fmt(a)] for g, a in zip(grid, aucs)))


def write_scores_csv(pairs: ScorePairs, combined, path) -> Path:
    rows = ([i, str(int(y)), _fmt(c), _fmt(e), _fmt(m)] for i, y, c, e, m in
            zip(pairs.ids, pairs.labels, pairs.conventional, pairs.enhanced, combined))
    return _write_csv(path, ("id", "label", "conventional", "enhanced", "combined"), rows)


def read_scores_csv(path):
    """(ScorePairs, combined) from a scores CSV."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["id", "label", "conventional", "enhanced", "combined"]
        if reader.fieldnames != need:
            raise ValueError(f"{path}: expected header {','.join(need)}")
        rows = list(reader)
    pairs = ScorePairs(tuple(r["id"] for r in rows),
                       [float(r["conventional"]) for r in rows],
                       [float(r["enhanced"]) for r in rows],
                       [int(r["label"]) for r in rows])
    return pairs, np.array([float(r["combined"]) for r in rows])


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _svg_plot(series, path, title, xlabel, ylabel, diagonal) -> Path:
    """Line plot on [0, 1] x [0, 1]; ``series`` is a list of (label, x, y)."""
    if not series:
        raise ValueError("nothing to plot")
    W, H, L, T, S = 480, 480, 60, 40, 380

    def px(x):
        return f"{L + S * float(x):.2f}"

    def py(y):
        return f"{T + S * (1.0 - float(y)):.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{L}" y="{T}" width="{S}" height="{S}" fill="none" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5
        out.append(f'<text x="{px(v)}" y="{T + S + 18}" text-anchor="middle" font-size="11">{v:.1f}</text>')
        out.append(f'<text x="{L - 8}" y="{py(v)}" text-anchor="end" font-size="11" '
                   f'dominant-baseline="middle">{v:.1f}</text>')
    out.append(f'<text x="{L + S / 2:.0f}" y="{T + S + 38}" text-anchor="middle" '
               f'font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{T + S / 2:.0f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 16 {T + S / 2:.0f})">{escape(ylabel)}</text>')
    if diagonal:
        out.append(f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(1)}" y2="{py(1)}" '
                   f'stroke="#bbbbbb" stroke-dasharray="4 4"/>')
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(x)},{py(y)}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = T + S - 14 - 18 * (len(series) - 1 - i)
        out.append(f'<line x1="{L + S - 170}" y1="{ly}" x2="{L + S - 150}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + S - 145}" y="{ly}" font-size="11" '
                   f'dominant-baseline="middle">{escape(label)}</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, ("\n".join(out) + "\n").encode())
    return path


def plot_roc(curves, path, title: str = "ROC") -> Path:
    """SVG with one polyline per named curve and AUC values in the legend.

    ``curves`` is a mapping or a sequence of (name, RocCurve) pairs.
    """
    items = list(curves.items()) if isinstance(curves, dict) else list(curves)
    if not items:
        raise ValueError("plot_roc needs at least one curve")
    series = [(f"{name} (AUC {c.auc:.3f})", c.fpr, c.tpr) for name, c in items]
    return _svg_plot(series, path, title, "false positive rate", "true positive rate", True)


def plot_gamma(grid, aucs, path, gamma_star=None) -> Path:
    label = "AUC" if gamma_star is None else f"AUC (gamma* = {gamma_star:.2f})"
    return _svg_plot([(label, grid, aucs)], path, "AUC versus gamma", "gamma", "AUC", False)
