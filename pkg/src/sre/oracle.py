"""Exact posterior denoiser for Gaussian-mixture data.

For a mixture over the flattened variable vector x0 (length D = n * dim) and
per-variable levels, x_t = A x0 + B eps with diagonal A, B. Each component
stays Gaussian under this map, so the posterior of x0 given x_t is again a
mixture with closed-form responsibilities and moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from . import _accel
from .paradigm import Paradigm, coefficients
from .variables import ReasoningState

SYM_TOL = 1e-12


class MixtureError(ValueError):
    pass


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[None, :]
        cov = np.array(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        k, D = mu.shape
        if w.shape != (k,) or cov.shape != (k, D, D):
            raise MixtureError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise MixtureError("mixture weights must be nonnegative and sum to 1")
        if np.any(np.abs(cov - np.swapaxes(cov, 1, 2)) > SYM_TOL):
            raise MixtureError("component covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise MixtureError("component covariances must be positive definite") from None
        for name, arr in (("weights", w), ("means", mu), ("covs", cov), ("chol", chol)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("c,cij->ij", self.weights, self.covs) + np.einsum(
            "c,ci,cj->ij", self.weights, dev, dev
        )


@dataclass
class Prediction:
    """Denoiser output for one state (n, dim) or a batch (B, n, dim).

    ``var`` is the per-variable scalar uncertainty (trace of that variable's
    posterior covariance for the oracle). ``interp`` is the learned-variance
    interpolation weight in [0, 1] when a net provides one.
    """

    x0_mean: np.ndarray
    var: np.ndarray
    responsibilities: np.ndarray | None = None
    interp: np.ndarray | None = None

    def __getitem__(self, idx) -> "Prediction":
        pick = lambda arr: None if arr is None else arr[idx]  # noqa: E731
        return Prediction(pick(self.x0_mean), pick(self.var), pick(self.responsibilities), pick(self.interp))


def posterior(gmm: GaussianMixture, paradigm: Paradigm, values, levels, backend: str = "auto") -> Prediction:
    """Batched exact posterior.

    values: (B, n, dim); levels: (B, n), or (n,) when every chain shares the
    same levels (one factorization per component serves the whole batch).
    """
    values = np.asarray(values, dtype=np.float64)
    B, n, dim = values.shape
    if n * dim != gmm.D:
        raise OracleError(f"mixture dimension {gmm.D} does not match n*dim = {n}*{dim}")
    levels = np.asarray(levels, dtype=np.float64)
    c = coefficients(paradigm, levels)
    a = np.repeat(np.atleast_2d(c.a), dim, axis=-1)
    b = np.repeat(np.atleast_2d(c.b), dim, axis=-1)
    x = values.reshape(B, gmm.D)
    try:
        comp_mean, comp_diag, loglik = _accel.component_posteriors(
            x, a, b, gmm.weights, gmm.means, gmm.covs, backend=backend
        )
    except np.linalg.LinAlgError:
        raise OracleError(
            "singular innovation matrix: a component covariance is degenerate on clean variables"
        ) from None
    resp = softmax(loglik, axis=-1)
    mean = np.einsum("bk,bkd->bd", resp, comp_mean)
    spread = comp_mean - mean[:, None, :]
    diag = np.einsum("bk,bkd->bd", resp, comp_diag + spread * spread)

    # clean coordinates are their own posterior
    clean = np.broadcast_to(b == 0.0, x.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(clean, x / a, mean)
    diag = np.where(clean, 0.0, np.maximum(diag, 0.0))
    var = diag.reshape(B, n, dim).sum(axis=-1)
    return Prediction(mean.reshape(B, n, dim), var, resp)


def oracle_denoise(gmm: GaussianMixture, state: ReasoningState, paradigm: Paradigm) -> Prediction:
    """Exact E[x0 | x_t] and per-variable posterior variance for one state."""
    return posterior(gmm, paradigm, state.values[None], state.levels[None])[0]


class OracleDenoiser:
    """Callable denoiser backed by the exact mixture posterior."""

    def __init__(self, gmm: GaussianMixture, paradigm: Paradigm, n: int, dim: int = 1, backend: str = "auto"):
        if n * dim != gmm.D:
            raise OracleError(f"mixture dimension {gmm.D} does not match n*dim = {n}*{dim}")
        self.gmm = gmm
        self.paradigm = paradigm
        self.n = n
        self.dim = dim
        self.backend = backend

    def __call__(self, values, levels) -> Prediction:
        levels = np.asarray(levels, dtype=np.float64)
        if levels.ndim == 2 and np.all(levels == levels[:1]):
            levels = levels[0]
        return posterior(self.gmm, self.paradigm, values, levels, backend=self.backend)


def gmm_log_density(gmm: GaussianMixture, x) -> np.ndarray | float:
    """log sum_c w_c N(x; mu_c, Sigma_c) for x of shape (D,) or (N, D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != gmm.D:
        raise MixtureError(f"dimension mismatch: expected {gmm.D}, got {x.shape[1]}")
    y = x[None, :, :] - gmm.means[:, None, :]  # (k, N, D)
    z = np.linalg.solve(gmm.chol, np.swapaxes(y, 1, 2))  # (k, D, N)
    quad = np.sum(z * z, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(gmm.chol, axis1=1, axis2=2)), axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    terms = logw[:, None] - 0.5 * (quad + logdet[:, None] + gmm.D * _accel.LOG_2PI)
    out = logsumexp(terms, axis=0)
    return float(out[0]) if single else out


def gmm_sample(gmm: GaussianMixture, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from the mixture: component by weight, then mean + chol @ z."""
    count = 1 if size is None else size
    comp = rng.choice(gmm.k, size=count, p=gmm.weights)
    z = rng.standard_normal((count, gmm.D))
    out = gmm.means[comp] + np.einsum("nij,nj->ni", gmm.chol[comp], z)
    return out[0] if size is None else out
