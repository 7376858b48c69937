"""
Nested leave-one-out cross-validation and full-data training.

For every held-out row s, an inner leave-one-out over the remaining rows
estimates the misclassification error of PCA(d) + classifier for each
candidate d; the smallest minimiser d*(s) is refit on all rows but s and
applied to s. The held-out row never enters its own centring, components
or classifier fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._kernels import downdate_eig, lda_inner_errors
from .errors import ModelError
from .model import (
    KnnModel, TrainedApm, _as_matrix, _standardize_params, centered_svd, fit_lda,
    fit_pca, kl_rule, knn_kl_classify, majority_l, pca_from_svd, posterior, project, variance_threshold_dim,
)

logger = logging.getLogger(__name__)

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class CVSettings:
    classifier: str = "lda"
    shrinkage: float = 0.1
    priors: str = "equal"
    k: int = 5
    l: int | None = None
    d_max: int | None = None
    standardize: bool = False
    strategy: str = "cv"
    variance_threshold: float = 0.95

    def __post_init__(self):
        if self.classifier not in ("lda", "knn"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.strategy not in ("cv", "variance_threshold"):
            raise ValueError(f"unknown PCA strategy {self.strategy!r}")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise ValueError("shrinkage must lie in [0, 1]")
        if self.classifier == "knn" and not 1 <= self.l_value <= self.k:
            raise ValueError(f"need 1 <= l <= k, got k={self.k}, l={self.l_value}")

    @property
    def l_value(self) -> int:
        return majority_l(self.k) if self.l is None else self.l


@dataclass
class NestedCVResult:
    scores: np.ndarray
    d_stars: np.ndarray
    cv_errors: np.ndarray
    labels: np.ndarray
    rejected: np.ndarray
    d_max: int
    warnings: list = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        return float(self.rejected.mean()) if self.rejected.size else 0.0


def default_d_max(n: int) -> int:
    return max(1, min(n - 2, 60))


def _check_inputs(X, y):
    X = _as_matrix(X)
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if X.shape[0] != y.size:
        raise ModelError("feature rows and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ModelError("labels must be 0 or 1")
    if y.size < 3:
        raise ModelError("nested LOOCV needs at least 3 rows")
    if y.min() == y.max():
        raise ModelError("both classes must be present")
    return X, y


class _Fold:
    """PCA decomposition of one training set, reused for all candidate d."""

    def __init__(self, X, standardize):
        self.n = X.shape[0]
        self.center, self.scale = _standardize_params(X, standardize)
        Xc = X - self.center
        if self.scale is not None:
            Xc = Xc / self.scale
        U, s, Vt = centered_svd(Xc)
        keep = s > _RANK_TOL * (s[0] if s.size and s[0] > 0 else 1.0)
        self.s, self.Vt = s[keep], Vt[keep]
        self.Y = U[:, keep] * self.s
        self.full_s = s
        self.full_Vt = Vt

    @property
    def rank(self) -> int:
        return self.s.size

    def pca(self, d):
        return pca_from_svd(self.center, self.scale, self.full_s, self.full_Vt, self.n, d)


def _inner_cap(n_train, p, cfg: CVSettings):
    """Largest candidate d with every inner PCA fit well-posed."""
    cap = min(n_train - 2, p)
    if cfg.classifier == "knn":
        cap = cap if cfg.k <= n_train - 1 else 0
    return cap


def _inner_errors(X, y, fold: _Fold, m, cfg: CVSettings):
    """(N, m) inner leave-one-out 0/1 errors for d = 1..m."""
    if cfg.standardize:
        return _inner_errors_direct(X, y, m, cfg)
    m = min(m, fold.rank)
    g = fold.s ** 2
    if cfg.classifier == "lda":
        errs = lda_inner_errors(fold.Y, g, y, m, cfg.shrinkage, cfg.priors == "equal")
        return errs.astype(np.float64)
    return _knn_inner_errors(fold, y, m, cfg)


def _knn_inner_errors(fold: _Fold, y, m, cfg: CVSettings):
    Y, g = fold.Y, fold.s ** 2
    N, r = Y.shape
    k, l = cfg.k, cfg.l_value
    rho = N / (N - 1.0)
    errs = np.zeros((N, m))
    sig = np.empty(m)
    W = np.empty((r, m))
    for t in range(N):
        z = Y[t]
        downdate_eig(g, z, rho, m, sig, W)
        A = (Y + z / (N - 1)) @ W
        others = np.delete(np.arange(N), t)
        d2 = np.cumsum((A[others] - A[t]) ** 2, axis=1)
        order = np.argsort(d2, axis=0, kind="stable")[:k]
        votes = y[others][order].sum(axis=0)
        errs[t] = kl_rule(votes, k, l) != y[t]
    return errs


def _inner_errors_direct(X, y, m, cfg: CVSettings):
    """Reference inner loop refitting PCA and classifier per fold."""
    N = X.shape[0]
    errs = np.zeros((N, m))
    for t in range(N):
        keep = np.arange(N) != t
        Xt, yt = X[keep], y[keep]
        pca = fit_pca(Xt, m, standardize=cfg.standardize)
        Zt = project(pca, Xt)
        z = project(pca, X[t])[0]
        for d in range(1, m + 1):
            pred = _fit_predict(Zt[:, :d], yt, z[:d], cfg)
            errs[t, d - 1] = pred != y[t]
    return errs


def _fit_predict(Z, y, z, cfg: CVSettings):
    """Hard decision for one point (-1 for a kNN rejection)."""
    if y.min() == y.max():
        return int(y[0])
    if cfg.classifier == "lda":
        return int(posterior(fit_lda(Z, y, cfg.shrinkage, cfg.priors), z) > 0.5)
    return knn_kl_classify(KnnModel(Z, y, cfg.k, cfg.l_value), z)


def _select_dim(X, y, fold: _Fold, d_max, cfg: CVSettings):
    """(d*, error curve over 1..d_max) for one training set."""
    curve = np.full(d_max, np.nan)
    if cfg.strategy == "variance_threshold":
        ratio = np.cumsum(fold.full_s ** 2) / max((fold.full_s ** 2).sum(), 1e-300)
        return min(variance_threshold_dim(ratio, cfg.variance_threshold), d_max), curve
    m = min(d_max, _inner_cap(X.shape[0], X.shape[1], cfg))
    if d_max == 1 or m < 1:
        return 1, curve
    errs = _inner_errors(X, y, fold, m, cfg)
    curve[: errs.shape[1]] = errs.mean(axis=0)
    return int(np.nanargmin(curve)) + 1, curve


def _score_one(Xtr, ytr, fold: _Fold, d, x, cfg: CVSettings):
    """(score, warning or None) for one held-out row."""
    if ytr.min() == ytr.max():
        return float(ytr[0]), "single-class training rows, constant score"
    pca = fold.pca(d)
    Z = project(pca, Xtr)
    z = project(pca, x)[0]
    if cfg.classifier == "lda":
        try:
            model = fit_lda(Z, ytr, cfg.shrinkage, cfg.priors)
        except ModelError as e:
            # too few rows or zero scatter: no discriminant, uninformative score
            return 0.5, f"{e}; score 0.5"
        return float(posterior(model, z)), None
    dec = knn_kl_classify(KnnModel(Z, ytr, cfg.k, cfg.l_value), z)
    return (np.nan if dec < 0 else float(dec)), None


def _outer_fold(X, y, s, d_max, cfg: CVSettings):
    keep = np.arange(y.size) != s
    Xtr, ytr = X[keep], y[keep]
    fold = _Fold(Xtr, cfg.standardize)
    d_star, curve = _select_dim(Xtr, ytr, fold, d_max, cfg)
    d_star = min(d_star, fold.rank) if fold.rank else 1
    score, warning = _score_one(Xtr, ytr, fold, d_star, X[s], cfg)
    return score, d_star, curve, warning


def _resolve_d_max(n, p, d_max, cfg, warnings):
    requested = default_d_max(n) if d_max is None else int(d_max)
    if requested < 1:
        raise ValueError("d_max must be >= 1")
    outer_cap = max(1, min(n - 2, p))
    cap = max(1, min(requested, outer_cap))
    if cfg.strategy == "cv" and requested > 1:
        inner = _inner_cap(n - 1, p, cfg)
        if inner < cap:
            cap = max(1, inner)
    if cap < requested and d_max is not None:
        msg = f"d_max {requested} capped to {cap} for n={n}, p={p}"
        warnings.append(msg)
        logger.warning(msg)
    return cap


def _row_space_coords(X):
    """Coordinates of the rows of a wide X in an orthonormal basis of its row space.

    Centring, PCA scores, LDA and nearest-neighbour distances are unchanged by
    this isometry, so every fold can work with an n x n matrix.
    """
    Q, _ = np.linalg.qr(X.T)
    return X @ Q


def nested_loocv(X, y, d_max: int | None = None, classifier: str = "lda", *,
                 settings: CVSettings | None = None, n_jobs: int = 1, **kwargs) -> NestedCVResult:
    """Outer leave-one-out scores with the PCA dimension chosen by inner leave-one-out.

    Keyword arguments not given through ``settings`` (``shrinkage``,
    ``priors``, ``k``, ``l``, ``standardize``, ``strategy``,
    ``variance_threshold``) build a :class:`CVSettings`.
    """
    cfg = settings or CVSettings(classifier=classifier, d_max=d_max, **kwargs)
    if d_max is None:
        d_max = cfg.d_max
    X, y = _check_inputs(X, y)
    n, p = X.shape
    warnings: list = []
    d_max = _resolve_d_max(n, p, d_max, cfg, warnings)
    if not cfg.standardize and p > n:
        X = _row_space_coords(X)
    if n_jobs == 1:
        folds = [_outer_fold(X, y, s, d_max, cfg) for s in range(n)]
    else:
        from joblib import Parallel, delayed

        folds = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_outer_fold)(X, y, s, d_max, cfg) for s in range(n))
    scores = np.array([f[0] for f in folds], dtype=np.float64)
    d_stars = np.array([f[1] for f in folds], dtype=np.int64)
    curves = np.vstack([f[2] for f in folds])
    for s, f in enumerate(folds):
        if f[3]:
            warnings.append(f"fold {s}: {f[3]}")
    return NestedCVResult(scores, d_stars, curves, y.copy(), np.isnan(scores), d_max, warnings)


def train_full(X, y, d_max: int | None = None, classifier: str = "lda", *,
               settings: CVSettings | None = None, columns=(), **kwargs) -> TrainedApm:
    """Choose d* by one leave-one-out pass over all rows, then fit on all rows."""
    cfg = settings or CVSettings(classifier=classifier, d_max=d_max, **kwargs)
    if d_max is None:
        d_max = cfg.d_max
    cols = tuple(getattr(X, "columns", ())) or tuple(columns)
    X, y = _check_inputs(X, y)
    n, p = X.shape
    requested = default_d_max(n) if d_max is None else int(d_max)
    cap = max(1, min(requested, n - 1, p))
    if cfg.strategy == "cv" and requested > 1:
        cap = max(1, min(cap, _inner_cap(n, p, cfg)))
    if cap < requested and d_max is not None:
        logger.warning("d_max %d capped to %d for n=%d, p=%d", requested, cap, n, p)
    fold = _Fold(X, cfg.standardize)
    d_star, curve = _select_dim(X, y, fold, cap, cfg)
    d_star = min(d_star, max(fold.rank, 1))
    pca = fold.pca(d_star)
    Z = project(pca, X)
    if cfg.classifier == "lda":
        clf = fit_lda(Z, y, cfg.shrinkage, cfg.priors)
    else:
        clf = KnnModel(Z, y, cfg.k, cfg.l_value)
    return TrainedApm(pca, clf, curve, d_star, cfg.classifier, cols)
