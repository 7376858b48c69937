import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import subspace_angles

from apmkit.errors import ModelError
from apmkit.model import (
    KnnModel, LdaModel, TrainedApm, fit_lda, fit_pca, kl_rule, knn_kl_classify, knn_votes,
    log_odds, majority_l, posterior, project, variance_threshold_dim,
)


def oracle_pca(X, d):
    C = np.cov(X, rowvar=False)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    return w[order][:d], V[:, order[:d]]


@pytest.mark.parametrize("shape", [(50, 30), (20, 35), (8, 3), (31, 31)])
def test_pca_matches_covariance_eigh(shape, rng):
    X = rng.normal(size=shape) @ np.diag(np.linspace(3, 0.5, shape[1]))
    d = min(shape[0] - 1, shape[1], 5)
    pca = fit_pca(X, d)
    w, V = oracle_pca(X, d)
    assert np.max(subspace_angles(pca.components.T, V)) < 1e-6
    assert np.allclose(pca.explained_variance, w, rtol=1e-9)
    assert np.allclose(pca.components @ pca.components.T, np.eye(d), atol=1e-12)
    Z = project(pca, X)
    assert np.allclose(Z.mean(axis=0), 0, atol=1e-10)
    assert np.allclose(np.var(Z, axis=0, ddof=1), w, rtol=1e-9)


def test_pca_sign_convention_deterministic(rng):
    X = rng.normal(size=(12, 6))
    a, b = fit_pca(X, 3), fit_pca(X.copy(), 3)
    assert np.array_equal(a.components, b.components)
    big = np.argmax(np.abs(a.components), axis=1)
    assert (a.components[np.arange(3), big] > 0).all()


def test_pca_standardize(rng):
    X = rng.normal(size=(15, 4)) * np.array([1, 10, 100, 1000.0])
    pca = fit_pca(X, 2, standardize=True)
    Xs = (X - X.mean(0)) / X.std(0, ddof=1)
    _, V = oracle_pca(Xs, 2)
    assert np.max(subspace_angles(pca.components.T, V)) < 1e-6


def test_pca_bounds(rng):
    X = rng.normal(size=(5, 8))
    with pytest.raises(ModelError):
        fit_pca(X, 5)
    with pytest.raises(ModelError):
        fit_pca(X[:1], 1)
    with pytest.raises(ModelError):
        project(fit_pca(X, 2), X[:, :3])


def test_variance_threshold():
    assert variance_threshold_dim([0.5, 0.9, 0.96, 1.0], 0.95) == 3
    assert variance_threshold_dim([0.5, 0.9], 0.95) == 2
    assert variance_threshold_dim([0.99, 1.0], 0.95) == 1


def test_lda_midpoint_half_equal_priors(rng):
    for _ in range(10):
        d = int(rng.integers(1, 6))
        X = rng.normal(size=(30, d))
        y = np.repeat([0, 1], 15)
        X[y == 1] += rng.normal(size=d)
        m = fit_lda(X, y, shrinkage=float(rng.random()), priors="equal")
        mid = 0.5 * (m.class_means[0] + m.class_means[1])
        assert abs(posterior(m, mid) - 0.5) <= 1e-9


def test_lda_oracle_formula(rng):
    X = rng.normal(size=(25, 3))
    y = (rng.random(25) < 0.4).astype(int)
    y[:2] = [0, 1]
    lam = 0.3
    m = fit_lda(X, y, shrinkage=lam)
    mu0, mu1 = X[y == 0].mean(0), X[y == 1].mean(0)
    S = sum(np.outer(r - (mu1 if c else mu0), r - (mu1 if c else mu0)) for r, c in zip(X, y)) / 23
    C = (1 - lam) * S + lam * np.trace(S) / 3 * np.eye(3)
    Ci = np.linalg.inv(C)
    p1 = y.mean()
    x = rng.normal(size=3)
    g1 = -0.5 * (x - mu1) @ Ci @ (x - mu1) + np.log(p1)
    g0 = -0.5 * (x - mu0) @ Ci @ (x - mu0) + np.log(1 - p1)
    assert np.isclose(log_odds(m, x), g1 - g0, rtol=1e-10, atol=1e-12)
    assert np.isclose(posterior(m, x), 1 / (1 + np.exp(g0 - g1)), rtol=1e-10)


def test_lda_priors_shift(rng):
    X = rng.normal(size=(20, 2))
    y = np.array([0] * 15 + [1] * 5)
    eq = fit_lda(X, y, priors="equal")
    em = fit_lda(X, y, priors="empirical")
    x = rng.normal(size=2)
    assert np.isclose(log_odds(em, x) - log_odds(eq, x), np.log(5 / 15))
    cu = fit_lda(X, y, priors=[1, 3])
    assert np.isclose(log_odds(cu, x) - log_odds(eq, x), np.log(3))
    with pytest.raises(ValueError):
        fit_lda(X, y, priors="bogus")


@given(st.floats(0, 1), st.integers(0, 2 ** 31))
def test_posterior_properties(lam, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 3))
    y = np.array([0, 1] * 6)
    m = fit_lda(X, y, shrinkage=lam)
    P = posterior(m, rng.normal(size=(7, 3)) * 3)
    assert ((P >= 0) & (P <= 1)).all()
    assert m.covariance.shape == (3, 3) and np.allclose(m.covariance, m.covariance.T)


def test_lda_errors(rng):
    X = rng.normal(size=(6, 2))
    with pytest.raises(ModelError):
        fit_lda(X, np.zeros(6))
    with pytest.raises(ValueError):
        fit_lda(X, [0, 1] * 3, shrinkage=1.5)
    with pytest.raises(ModelError):
        fit_lda(np.zeros((6, 2)), [0, 1] * 3, shrinkage=0.0)
    with pytest.raises(ModelError):
        log_odds(fit_lda(X, [0, 1] * 3), np.zeros(3))


def oracle_knn(X, y, x, k, l):
    d = [(float(np.sum((r - x) ** 2)), i) for i, r in enumerate(X)]
    d.sort()
    votes = sum(int(y[i]) for _, i in d[:k])
    return 1 if votes >= l else (0 if votes <= k - l else -1)


def test_knn_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(3, 30))
        X = rng.integers(-3, 4, size=(n, 2)).astype(float)  # integer grid forces distance ties
        y = rng.integers(0, 2, size=n)
        k = int(rng.integers(1, n + 1))
        l = int(rng.integers(1, k + 1))
        m = KnnModel(X, y, k, l)
        Q = rng.integers(-3, 4, size=(5, 2)).astype(float)
        want = [oracle_knn(X, y, q, k, l) for q in Q]
        assert knn_kl_classify(m, Q).tolist() == want
        assert knn_kl_classify(m, Q[0]) == want[0]


@given(st.integers(0, 12).map(lambda h: 2 * h + 1), st.integers(0, 2 ** 31))
def test_majority_never_rejects(k, seed):
    l = majority_l(k)
    assert l == -(-(k + 1) // 2)
    votes = np.arange(k + 1)
    assert (kl_rule(votes, k, l) >= 0).all()
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(k + 3, 2))
    m = KnnModel(X, rng.integers(0, 2, size=k + 3), k, l)
    assert (knn_kl_classify(m, rng.normal(size=(10, 2))) >= 0).all()


def test_unanimous_rule_rejects():
    assert kl_rule(np.array([0, 1, 2, 3]), 3, 3).tolist() == [0, -1, -1, 1]


def test_knn_validation(rng):
    with pytest.raises(ModelError):
        KnnModel(rng.normal(size=(3, 2)), [0, 1, 1], 4, 1)
    with pytest.raises(ModelError):
        KnnModel(rng.normal(size=(3, 2)), [0, 1, 1], 2, 3)
    assert knn_votes(np.array([[0.0], [1.0], [1.0]]), np.array([0, 1, 0]), np.array([1.0]), 1) == 1


def _trained(rng, kind):
    X = rng.normal(size=(20, 6))
    y = np.array([0, 1] * 10)
    pca = fit_pca(X, 3, standardize=(kind == "knn"))
    Z = project(pca, X)
    clf = fit_lda(Z, y) if kind == "lda" else KnnModel(Z, y, 3, 2)
    rec = np.array([0.2, np.nan, 0.1])
    return TrainedApm(pca, clf, rec, 3, kind, tuple(f"c{i}" for i in range(6))), X


@pytest.mark.parametrize("kind", ["lda", "knn"])
def test_trained_round_trip(kind, rng, tmp_path):
    m, X = _trained(rng, kind)
    p = m.save(tmp_path / "m.json")
    back = TrainedApm.load(p)
    assert np.array_equal(back.score(X), m.score(X), equal_nan=True)
    assert back.d_star == 3 and back.columns == m.columns
    assert np.array_equal(back.cv_record, m.cv_record, equal_nan=True)
    assert json.dumps(back.to_json()) == json.dumps(m.to_json())


def test_trained_version_check(rng):
    m, _ = _trained(rng, "lda")
    doc = m.to_json()
    doc["version"] = "other"
    with pytest.raises(ModelError):
        TrainedApm.from_json(doc)


def test_knn_score_nan_on_reject(rng):
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    pca = fit_pca(X, 1)
    Z = project(pca, X)
    m = TrainedApm(pca, KnnModel(Z, [0, 1, 0, 1], 2, 2), np.array([0.0]), 1, "knn")
    s = m.score(np.array([[0.5], [1.5]]))
    assert np.isnan(s).all()
    assert isinstance(m.classifier, KnnModel) and not isinstance(m.classifier, LdaModel)
