"""Compiled Cholesky kernels used by the trajectory factors.

All routines work in place on lower-triangular factors stored in the leading
block of a (capacity x capacity) array.
"""

import numpy as np
from numba import njit


class NumericalError(ArithmeticError):
    """A factorization lost positive definiteness."""


@njit(cache=True)
def chol_update(L, x, start, stop):
    """Rank-one update of ``L[start:stop, start:stop]`` by ``x x^T``.

    ``x`` (length ``stop - start``) is overwritten.
    """
    m = stop - start
    for jj in range(m):
        j = start + jj
        ljj = L[j, j]
        r = np.sqrt(ljj * ljj + x[jj] * x[jj])
        c = r / ljj
        s = x[jj] / ljj
        L[j, j] = r
        for ii in range(jj + 1, m):
            i = start + ii
            L[i, j] = (L[i, j] + s * x[ii]) / c
            x[ii] = c * x[ii] - s * L[i, j]


@njit(cache=True)
def chol_downdate(L, x, start, stop):
    """Rank-one downdate of ``L[start:stop, start:stop]`` by ``x x^T``.

    Returns False if the downdated matrix is not positive definite; ``L`` is
    then left partially modified and must be rebuilt by the caller.
    """
    m = stop - start
    for jj in range(m):
        j = start + jj
        ljj = L[j, j]
        r2 = ljj * ljj - x[jj] * x[jj]
        if not r2 > 0.0:
            return False
        r = np.sqrt(r2)
        c = r / ljj
        s = x[jj] / ljj
        L[j, j] = r
        for ii in range(jj + 1, m):
            i = start + ii
            L[i, j] = (L[i, j] - s * x[ii]) / c
            x[ii] = c * x[ii] - s * L[i, j]
    return True


@njit(cache=True)
def forward_solve(L, b, n):
    """Solve ``L[:n, :n] v = b[:n]``."""
    v = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= L[i, j] * v[j]
        v[i] = acc / L[i, i]
    return v


@njit(cache=True)
def forward_solve_from(L, r, alpha, start, n):
    """Finish ``L alpha = r`` for rows ``start..n-1`` given ``alpha[:start]``."""
    for i in range(start, n):
        acc = r[i]
        for j in range(i):
            acc -= L[i, j] * alpha[j]
        alpha[i] = acc / L[i, i]


@njit(cache=True)
def se_column(Z, n, z, inv_ell, sf2):
    """SE-ARD covariances between the rows ``Z[:n]`` and the point ``z``."""
    out = np.empty(n)
    d = z.shape[0]
    for i in range(n):
        s = 0.0
        for j in range(d):
            diff = (Z[i, j] - z[j]) * inv_ell[j]
            s += diff * diff
        out[i] = sf2 * np.exp(-0.5 * s)
    return out


@njit(cache=True)
def replace_row(L, Z, n, k, z, inv_ell, sf2, diag_add):
    """Swap input ``k`` of a kernel-plus-noise factor for ``z``.

    The leading ``k`` rows are untouched; row ``k`` is re-solved against
    them and the trailing block absorbs one rank-one update (old column)
    and one downdate (new column). ``Z[k]`` itself is not read.
    Returns False when the downdate breaks positive definiteness.
    """
    c = se_column(Z, n, z, inv_ell, sf2)
    ckk = sf2 + diag_add
    l21 = forward_solve(L, c, k)
    s = ckk
    for j in range(k):
        s -= l21[j] * l21[j]
    if not s > 0.0:
        return False
    l22 = np.sqrt(s)
    m = n - k - 1
    old = np.empty(m)
    new = np.empty(m)
    for ii in range(m):
        i = k + 1 + ii
        old[ii] = L[i, k]
        acc = c[i]
        for j in range(k):
            acc -= L[i, j] * l21[j]
        new[ii] = acc / l22
    for j in range(k):
        L[k, j] = l21[j]
    L[k, k] = l22
    for ii in range(m):
        L[k + 1 + ii, k] = new[ii]
    if m > 0:
        chol_update(L, old, k + 1, n)
        if not chol_downdate(L, new, k + 1, n):
            return False
    return True


@njit(cache=True)
def batch_forward_solve(L, B):
    """Solve ``L[p] V[p] = B[p]`` for a stack of lower-triangular factors."""
    P, M = B.shape
    V = np.empty((P, M))
    for p in range(P):
        for i in range(M):
            acc = B[p, i]
            for j in range(i):
                acc -= L[p, i, j] * V[p, j]
            V[p, i] = acc / L[p, i, i]
    return V


@njit(cache=True)
def batch_chol_update(L, X):
    """Rank-one update of every factor in a stack; ``X`` is overwritten."""
    P, M = X.shape
    for p in range(P):
        chol_update(L[p], X[p], 0, M)


@njit(cache=True)
def batch_chol_downdate(L, X):
    """Rank-one downdate of every factor; returns per-factor success flags."""
    P, M = X.shape
    ok = np.ones(P, dtype=np.bool_)
    for p in range(P):
        ok[p] = chol_downdate(L[p], X[p], 0, M)
    return ok
