"""
Compiled inner-loop kernels for leave-one-out PCA dimension selection.

Inside one training set of N rows with PCA scores ``Y`` (so that
``Y.T @ Y = diag(g)``), leaving row t out turns the scatter matrix into
``diag(g) - rho * z z^T`` with ``z = Y[t]`` and ``rho = N / (N - 1)``. Its
leading eigenpairs come from the secular equation
``1 - rho * sum(z_i^2 / (g_i - sigma)) = 0``, one root between each pair of
consecutive ``g``. The eigenvector for root ``sigma`` is proportional to
``z / (g - sigma)``.

The LDA pooled covariance in the leading-d PCA coordinates is a diagonal
matrix minus a rank-one term in the class-mean difference, so the posterior
for every candidate d follows from Sherman-Morrison in O(d).
"""

import numpy as np
from numba import njit

_EPS = np.finfo(np.float64).eps


@njit(cache=True, nogil=True)
def _secular_root(g, z2, rho, k, zz):
    """Root in (g[k+1], g[k]) as (origin index, offset from g[origin]).

    Each step fits one pole on either side of the bracket to the value and
    slope of the secular function and jumps to the root of that model,
    falling back to bisection when the jump leaves the bracket.
    """
    r = g.size
    hi = g[k]
    last = k + 1 >= r
    lo = g[k] - rho * zz if last else g[k + 1]
    mid = 0.5 * (lo + hi)
    f = 1.0
    for i in range(r):
        f -= rho * z2[i] / (g[i] - mid)
    if f > 0.0 or last:
        o = k
        a = mid - hi if f > 0.0 else lo - hi
        b = 0.0 if f > 0.0 else mid - hi
    else:
        o = k + 1
        a = 0.0
        b = mid - lo
    go = g[o]
    ph = g[k] - go
    pl = 0.0 if last else g[k + 1] - go
    tau = 0.5 * (a + b)
    for _ in range(200):
        phi = 0.0
        dphi = 0.0
        psi = 0.0
        dpsi = 0.0
        for i in range(r):
            inv = 1.0 / ((g[i] - go) - tau)
            q = z2[i] * inv
            if i <= k:
                phi += q
                dphi += q * inv
            else:
                psi += q
                dpsi += q * inv
        f = 1.0 - rho * (phi + psi)
        if abs(f) <= r * _EPS * (1.0 + rho * (phi - psi)):
            break
        if f > 0.0:
            a = tau
        else:
            b = tau
        if b - a <= 4.0 * _EPS * max(abs(a), abs(b)):
            break
        hb = ph - tau
        B = dphi * hb * hb
        c0 = 1.0 - rho * (phi - B / hb)
        if last:
            nt = ph - rho * B / c0 if c0 != 0.0 else 0.5 * (a + b)
        else:
            lb = pl - tau
            E = dpsi * lb * lb
            c0 -= rho * (psi - E / lb)
            qa = c0
            qb = -c0 * (ph + pl) + rho * (B + E)
            qc = c0 * ph * pl - rho * (B * pl + E * ph)
            nt = 0.5 * (a + b)
            if qa == 0.0:
                if qb != 0.0:
                    nt = -qc / qb
            else:
                disc = qb * qb - 4.0 * qa * qc
                if disc >= 0.0:
                    sq = np.sqrt(disc)
                    qq = -0.5 * (qb + sq if qb >= 0.0 else qb - sq)
                    r1 = qq / qa
                    r2 = qc / qq if qq != 0.0 else r1
                    nt = r1 if a < r1 < b else r2
        if not (a < nt < b):
            nt = 0.5 * (a + b)
        if abs(nt - tau) <= 2.0 * _EPS * abs(nt):
            tau = nt
            break
        tau = nt
    return o, tau


@njit(cache=True, nogil=True)
def downdate_eig(g, z, rho, m, sig, W):
    """Top-m eigenpairs of diag(g) - rho z z^T, g strictly descending.

    Fills ``sig`` (m,) and ``W`` (r, m) with unit eigenvectors. Falls back to
    a dense symmetric eigensolver when the secular form is degenerate
    (repeated g or a vanishing z component among the poles involved).
    """
    r = g.size
    z2 = z * z
    zz = z2.sum()
    gmax = g[0]
    degenerate = False
    for k in range(min(m + 1, r)):
        if rho * z2[k] <= 1e-28 * gmax * gmax or (k + 1 < r and g[k] - g[k + 1] <= 1e-13 * gmax):
            degenerate = True
            break
    if degenerate:
        S = np.zeros((r, r))
        for i in range(r):
            S[i, i] = g[i]
        for i in range(r):
            for j in range(r):
                S[i, j] -= rho * z[i] * z[j]
        vals, vecs = np.linalg.eigh(S)
        for k in range(m):
            sig[k] = vals[r - 1 - k]
            for i in range(r):
                W[i, k] = vecs[i, r - 1 - k]
        return 1
    for k in range(m):
        o, tau = _secular_root(g, z2, rho, k, zz)
        sig[k] = g[o] + tau
        nrm = 0.0
        go = g[o]
        for i in range(r):
            u = z[i] / ((g[i] - go) - tau)
            W[i, k] = u
            nrm += u * u
        nrm = np.sqrt(nrm)
        for i in range(r):
            W[i, k] /= nrm
    return 0


@njit(cache=True, nogil=True)
def lda_inner_errors(Y, g, labels, m, shrinkage, equal_priors):
    """0/1 leave-one-out errors (N, m) of PCA(d) + shrinkage LDA at threshold 0.5.

    ``Y`` (N, r) are PCA scores of the training rows with ``Y.T @ Y = diag(g)``.
    Inner fits use empirical priors unless ``equal_priors``.
    """
    N, r = Y.shape
    errs = np.zeros((N, m), dtype=np.int8)
    n1 = 0
    S1 = np.zeros(r)
    S0 = np.zeros(r)
    for i in range(N):
        if labels[i] == 1:
            n1 += 1
            S1 += Y[i]
        else:
            S0 += Y[i]
    n0 = N - n1
    M = N - 1
    rho = N / (N - 1.0)
    den = max(M - 2, 1)
    sig = np.empty(m)
    W = np.empty((r, m))
    dproj = np.empty(m)
    aproj = np.empty(m)
    Dk = np.empty(m)
    for t in range(N):
        ct = labels[t]
        z = Y[t]
        m1 = n1 - (1 if ct == 1 else 0)
        m0 = n0 - (1 if ct == 0 else 0)
        if m1 == 0 or m0 == 0:
            # single-class training rows: constant prediction of the other class
            for d in range(m):
                errs[t, d] = 1
            continue
        dvec = np.empty(r)
        for i in range(r):
            s1 = S1[i] - (z[i] if ct == 1 else 0.0)
            s0 = S0[i] - (z[i] if ct == 0 else 0.0)
            dvec[i] = s1 / m1 - s0 / m0
        downdate_eig(g, z, rho, m, sig, W)
        for k in range(m):
            a = 0.0
            b = 0.0
            for i in range(r):
                a += W[i, k] * dvec[i]
                b += W[i, k] * z[i]
            dproj[k] = a
            aproj[k] = b * rho
        ncc = m0 * m1 / M
        c = (1.0 - shrinkage) * ncc / den
        midf = (m0 - m1) / (2.0 * M)
        prior = 0.0 if equal_priors else np.log(m1 / m0)
        csig = 0.0
        cdel = 0.0
        for d in range(1, m + 1):
            csig += sig[d - 1]
            cdel += dproj[d - 1] * dproj[d - 1]
            mbar = (csig - ncc * cdel) / den / d
            q = 0.0
            lin = 0.0
            bad = False
            for k in range(d):
                Dk[k] = (1.0 - shrinkage) * sig[k] / den + shrinkage * mbar
                if not Dk[k] > 0.0:
                    bad = True
                q += dproj[k] * dproj[k] / Dk[k]
                lin += (aproj[k] - midf * dproj[k]) * dproj[k] / Dk[k]
            denom = 1.0 - c * q
            if bad or not denom > 0.0:
                errs[t, d - 1] = 1
                continue
            pred = 1 if lin / denom + prior > 0.0 else 0
            errs[t, d - 1] = 1 if pred != ct else 0
    return errs
