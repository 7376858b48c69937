"""
PCA feature extraction, shrinkage LDA and the (k, l)-nearest-neighbour rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import expit

from .errors import ModelError

MODEL_VERSION = "apmkit-model-v1"


def _as_matrix(X) -> np.ndarray:
    X = getattr(X, "values", X)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def centered_svd(Xc: np.ndarray):
    """Thin SVD ``Xc = U diag(s) Vt`` with a deterministic sign convention.

    Wide matrices are reduced by a QR factorisation of ``Xc.T`` first. Each
    right singular vector is flipped so its largest-magnitude entry is
    positive.
    """
    n, p = Xc.shape
    if n < p:
        Q, R = np.linalg.qr(Xc.T)
        U, s, Wt = np.linalg.svd(R.T)
        Vt = Wt @ Q.T
    else:
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    big = np.argmax(np.abs(Vt), axis=1)
    sign = np.sign(Vt[np.arange(Vt.shape[0]), big])
    sign[sign == 0] = 1.0
    return U * sign, s, Vt * sign[:, None]


# -- PCA -------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaModel:
    center: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float
    scale: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def explained_ratio(self) -> np.ndarray:
        """Cumulative fraction of total variance captured by the first d components."""
        if self.total_variance <= 0:
            return np.ones(self.dim)
        return np.cumsum(self.explained_variance) / self.total_variance


def _standardize_params(X, standardize):
    center = X.mean(axis=0)
    scale = None
    if standardize:
        scale = X.std(axis=0, ddof=1)
        scale[~(scale > 0)] = 1.0
    return center, scale


def pca_from_svd(center, scale, s, Vt, n, d) -> PcaModel:
    var = s ** 2 / (n - 1)
    return PcaModel(center, Vt[:d].copy(), var[:d].copy(), float(var.sum()), scale)


def fit_pca(X, d: int, standardize: bool = False) -> PcaModel:
    """Leading ``d`` principal directions of the (optionally standardised) rows of X."""
    X = _as_matrix(X)
    n, p = X.shape
    if n < 2:
        raise ModelError("PCA needs at least 2 rows")
    if not 1 <= d <= min(n - 1, p):
        raise ModelError(f"PCA dimension {d} outside [1, {min(n - 1, p)}]")
    center, scale = _standardize_params(X, standardize)
    Xc = X - center
    if scale is not None:
        Xc = Xc / scale
    _, s, Vt = centered_svd(Xc)
    return pca_from_svd(center, scale, s, Vt, n, d)


def project(pca: PcaModel, X) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != pca.center.size:
        raise ModelError(f"expected {pca.center.size} columns, got {X.shape[1]}")
    Xc = X - pca.center
    if pca.scale is not None:
        Xc = Xc / pca.scale
    return Xc @ pca.components.T


def variance_threshold_dim(pca_or_ratio, threshold: float = 0.95) -> int:
    """Smallest d whose cumulative explained-variance ratio reaches ``threshold``."""
    ratio = (pca_or_ratio.explained_ratio() if isinstance(pca_or_ratio, PcaModel)
             else np.asarray(pca_or_ratio))
    hit = np.flatnonzero(ratio >= threshold - 1e-12)
    return int(hit[0]) + 1 if hit.size else len(ratio)


# -- LDA -------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LdaModel:
    class_means: np.ndarray
    covariance: np.ndarray
    log_priors: np.ndarray
    shrinkage: float
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        try:
            chol = linalg.cho_factor(self.covariance, lower=True, check_finite=True)
        except linalg.LinAlgError:
            raise ModelError("LDA covariance is not positive definite") from None
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def coefficients(self):
        """(w, b) with class-1 log-odds ``x @ w + b``."""
        mu0, mu1 = self.class_means
        w = linalg.cho_solve(self._chol, mu1 - mu0)
        b = -0.5 * (mu0 + mu1) @ w + (self.log_priors[1] - self.log_priors[0])
        return w, b


def _resolve_priors(priors, n0, n1):
    if isinstance(priors, str):
        if priors == "empirical":
            return np.log([n0 / (n0 + n1), n1 / (n0 + n1)])
        if priors == "equal":
            return np.log([0.5, 0.5])
        raise ValueError(f"unknown priors {priors!r}")
    p = np.asarray(priors, dtype=np.float64)
    if p.shape != (2,) or (p <= 0).any():
        raise ValueError("priors must be 'empirical', 'equal' or two positive weights")
    return np.log(p / p.sum())


def fit_lda(Xd, y, shrinkage: float = 0.1, priors="empirical") -> LdaModel:
    """Two-class LDA with pooled covariance shrunk towards a scaled identity.

    The pooled within-class covariance uses denominator ``n - 2``; the
    shrinkage target is ``trace / d`` times the identity.
    """
    Xd = _as_matrix(Xd)
    y = np.asarray(y).astype(np.int64)
    if Xd.shape[0] != y.size:
        raise ModelError("row count and label count differ")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    n0, n1 = int((y == 0).sum()), int((y == 1).sum())
    if n0 == 0 or n1 == 0:
        raise ModelError("LDA needs both classes in the training data")
    if n0 + n1 < 3:
        raise ModelError("LDA needs at least 3 training rows")
    means = np.vstack([Xd[y == 0].mean(axis=0), Xd[y == 1].mean(axis=0)])
    resid = Xd - means[y]
    S = resid.T @ resid / (y.size - 2)
    d = S.shape[0]
    target = np.trace(S) / d
    cov = (1.0 - shrinkage) * S + shrinkage * target * np.eye(d)
    cov = 0.5 * (cov + cov.T)
    return LdaModel(means, cov, _resolve_priors(priors, n0, n1), float(shrinkage))


def log_odds(model: LdaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ModelError(f"expected dimension {model.dim}, got {x.shape[-1]}")
    w, b = model.coefficients()
    return x @ w + b


def posterior(model: LdaModel, x):
    """Class-1 posterior probability for a vector (float) or rows of a matrix."""
    z = log_odds(model, x)
    return float(expit(z)) if np.ndim(z) == 0 else expit(z)


# -- (k, l)-NN ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int
    l: int

    def __post_init__(self):
        X = _as_matrix(self.X)
        y = np.asarray(self.y).astype(np.int64)
        if X.shape[0] != y.size:
            raise ModelError("row count and label count differ")
        if not 1 <= self.l <= self.k <= y.size:
            raise ModelError(f"need 1 <= l <= k <= n, got l={self.l}, k={self.k}, n={y.size}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)


def majority_l(k: int) -> int:
    return (k + 2) // 2


def knn_votes(X, y, x, k) -> int:
    """Label-1 count among the k nearest rows; distance ties go to the lower index."""
    d2 = ((X - x) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return int(y[order[:k]].sum())


def kl_rule(votes, k, l):
    return np.where(votes >= l, 1, np.where(votes <= k - l, 0, -1))


def knn_kl_classify(model: KnnModel, x):
    """1 when at least l of the k neighbours are positive, 0 when at most k - l are, else -1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.X.shape[1]:
        raise ModelError(f"expected dimension {model.X.shape[1]}, got {x.shape[-1]}")
    if x.ndim == 1:
        return int(kl_rule(knn_votes(model.X, model.y, x, model.k), model.k, model.l))
    v = np.array([knn_votes(model.X, model.y, r, model.k) for r in x])
    return kl_rule(v, model.k, model.l)


# -- trained pipeline model ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainedApm:
    pca: PcaModel
    classifier: LdaModel | KnnModel
    cv_record: np.ndarray
    d_star: int
    classifier_tag: str = "lda"
    columns: tuple[str, ...] = ()

    def score(self, X) -> np.ndarray:
        """Posterior (LDA) or k-l decision (kNN; NaN marks a rejection) per row."""
        Z = project(self.pca, X)
        if isinstance(self.classifier, LdaModel):
            return np.atleast_1d(posterior(self.classifier, Z))
        out = np.atleast_1d(knn_kl_classify(self.classifier, Z)).astype(np.float64)
        out[out < 0] = np.nan
        return out

    def to_json(self) -> dict:
        p = self.pca
        doc = {
            "version": MODEL_VERSION,
            "classifier": self.classifier_tag,
            "d_star": int(self.d_star),
            "columns": list(self.columns),
            "pca": {
                "center": p.center.tolist(),
                "scale": None if p.scale is None else p.scale.tolist(),
                "components": p.components.tolist(),
                "explained_variance": p.explained_variance.tolist(),
                "total_variance": p.total_variance,
            },
            "cv_record": [None if np.isnan(v) else float(v) for v in self.cv_record],
        }
        c = self.classifier
        if isinstance(c, LdaModel):
            doc["lda"] = {
                "class_means": c.class_means.tolist(),
                "covariance": c.covariance.tolist(),
                "log_priors": c.log_priors.tolist(),
                "shrinkage": c.shrinkage,
            }
        else:
            doc["knn"] = {"X": c.X.tolist(), "y": c.y.tolist(), "k": c.k, "l": c.l}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainedApm":
        if doc.get("version") != MODEL_VERSION:
            raise ModelError(f"unsupported model version {doc.get('version')!r}")
        p = doc["pca"]
        pca = PcaModel(
            np.array(p["center"], dtype=np.float64),
            np.array(p["components"], dtype=np.float64).reshape(-1, len(p["center"])),
            np.array(p["explained_variance"], dtype=np.float64),
            float(p["total_variance"]),
            None if p["scale"] is None else np.array(p["scale"], dtype=np.float64),
        )
        if doc["classifier"] == "lda":
            c = doc["lda"]
            clf = LdaModel(np.array(c["class_means"]), np.array(c["covariance"]),
                           np.array(c["log_priors"]), float(c["shrinkage"]))
        else:
            c = doc["knn"]
            clf = KnnModel(np.array(c["X"], dtype=np.float64).reshape(-1, pca.dim),
                           np.array(c["y"]), int(c["k"]), int(c["l"]))
        rec = np.array([np.nan if v is None else v for v in doc["cv_record"]], dtype=np.float64)
        return cls(pca, clf, rec, int(doc["d_star"]), doc["classifier"],
                   tuple(doc.get("columns", ())))

    def save(self, path) -> Path:
        from .raster_io import _atomic_write

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, (json.dumps(self.to_json(), indent=1) + "\n").encode())
        return path

    @classmethod
    def load(cls, path) -> "TrainedApm":
        return cls.from_json(json.loads(Path(path).read_text()))
