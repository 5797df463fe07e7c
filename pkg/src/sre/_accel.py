"""Hot kernels for the Gaussian-mixture posterior.

Two interchangeable implementations compute the same quantities:

* a numba ``@njit`` kernel looping over chains and components with a small
  hand-written Cholesky (fast when every chain has its own noise levels);
* a pure-numpy path built on stacked ``np.linalg`` calls.

Set ``SRE_DISABLE_NUMBA=1`` to force the numpy path. The numba path is also
skipped when numba cannot be imported.
"""

from __future__ import annotations

import math
import os

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _numba_requested() -> bool:
    return os.environ.get("SRE_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("disabled by SRE_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


def _posterior_numpy(x, a, b, logw, means, covs):
    """Stacked-linalg posterior. x, a, b: (B, D); a and b may have B == 1."""
    shared = a.shape[0] == 1 and x.shape[0] != 1
    k, D = means.shape
    # innovation S = A Sigma A + B^2, shape (B or 1, k, D, D)
    S = a[:, None, :, None] * covs[None] * a[:, None, None, :]
    idx = np.arange(D)
    S[..., idx, idx] += (b * b)[:, None, :]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    M = a[:, None, :, None] * covs[None]  # rows scaled by a
    W = np.linalg.solve(L, M)  # L^-1 A Sigma
    post_diag = np.diagonal(covs, axis1=-2, axis2=-1)[None] - np.sum(W * W, axis=-2)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)

    if shared:
        L0, W0 = L[0], W[0]
        y = x[None, :, :] - (a[0] * means)[:, None, :]  # (k, B, D)
        z = np.linalg.solve(L0, np.swapaxes(y, 1, 2))  # (k, D, B)
        quad = np.sum(z * z, axis=1).T  # (B, k)
        # Sigma A S^-1 y = (L^-1 A Sigma)^T (L^-1 y)
        gain = np.swapaxes(W0, 1, 2) @ z  # (k, D, B)
        comp_mean = means[None] + np.transpose(gain, (2, 0, 1))
        comp_diag = np.broadcast_to(post_diag[0], (x.shape[0], k, D))
        logdet = np.broadcast_to(logdet[0], (x.shape[0], k))
    else:
        y = x[:, None, :] - a[:, None, :] * means[None]  # (B, k, D)
        z = np.linalg.solve(L, y[..., None])[..., 0]
        quad = np.sum(z * z, axis=-1)
        gain = np.einsum("bkij,bki->bkj", W, z)
        comp_mean = means[None] + gain
        comp_diag = post_diag
    loglik = logw[None] - 0.5 * (quad + logdet + D * LOG_2PI)
    return comp_mean, comp_diag, loglik


if HAVE_NUMBA:

    @njit(cache=True)
    def _posterior_kernel(x, a, b, logw, means, covs, comp_mean, comp_diag, loglik, status):
        B, D = x.shape
        k = means.shape[0]
        L = np.empty((D, D))
        W = np.empty((D, D))
        z = np.empty(D)
        for bi in range(B):
            for c in range(k):
                # innovation matrix, lower triangle only
                for i in range(D):
                    for j in range(i + 1):
                        L[i, j] = a[bi, i] * covs[c, i, j] * a[bi, j]
                    L[i, i] += b[bi, i] * b[bi, i]
                # in-place Cholesky
                ok = True
                for j in range(D):
                    s = L[j, j]
                    for p in range(j):
                        s -= L[j, p] * L[j, p]
                    if s <= 0.0:
                        ok = False
                        break
                    L[j, j] = math.sqrt(s)
                    for i in range(j + 1, D):
                        s = L[i, j]
                        for p in range(j):
                            s -= L[i, p] * L[j, p]
                        L[i, j] = s / L[j, j]
                if not ok:
                    status[0] = 1
                    return
                logdet = 0.0
                for i in range(D):
                    logdet += 2.0 * math.log(L[i, i])
                # z = L^-1 (x - a mu)
                quad = 0.0
                for i in range(D):
                    s = x[bi, i] - a[bi, i] * means[c, i]
                    for p in range(i):
                        s -= L[i, p] * z[p]
                    z[i] = s / L[i, i]
                    quad += z[i] * z[i]
                # W = L^-1 (A Sigma), column by column
                for col in range(D):
                    for i in range(D):
                        s = a[bi, i] * covs[c, i, col]
                        for p in range(i):
                            s -= L[i, p] * W[p, col]
                        W[i, col] = s / L[i, i]
                for j in range(D):
                    g = 0.0
                    w2 = 0.0
                    for i in range(D):
                        g += W[i, j] * z[i]
                        w2 += W[i, j] * W[i, j]
                    comp_mean[bi, c, j] = means[c, j] + g
                    comp_diag[bi, c, j] = covs[c, j, j] - w2
                loglik[bi, c] = logw[c] - 0.5 * (quad + logdet + D * LOG_2PI)


def _posterior_numba(x, a, b, logw, means, covs):
    B, D = x.shape
    k = means.shape[0]
    if a.shape[0] != B:
        a = np.ascontiguousarray(np.broadcast_to(a, (B, D)))
        b = np.ascontiguousarray(np.broadcast_to(b, (B, D)))
    comp_mean = np.empty((B, k, D))
    comp_diag = np.empty((B, k, D))
    loglik = np.empty((B, k))
    status = np.zeros(1, dtype=np.int64)
    _posterior_kernel(x, a, b, logw, means, covs, comp_mean, comp_diag, loglik, status)
    if status[0]:
        raise NotPositiveDefinite("innovation matrix is not positive definite")
    return comp_mean, comp_diag, loglik


def component_posteriors(x, a, b, weights, means, covs, backend: str = "auto"):
    """Per-component posterior moments of x0 given x = a * x0 + b * eps.

    Returns ``(comp_mean (B, k, D), comp_diag (B, k, D), loglik (B, k))`` where
    ``loglik`` is log w_c plus the log density of x under component c.

    ``backend``: "numpy", "numba" or "auto". Auto uses numba when chains carry
    their own levels and the numpy shared-factorization path otherwise.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    a = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    b = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(weights, dtype=np.float64))
    if backend == "auto":
        per_chain = a.shape[0] > 1
        backend = "numba" if (HAVE_NUMBA and per_chain) else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _posterior_numba(x, a, b, logw, means, covs)
    return _posterior_numpy(x, a, b, logw, means, covs)
