"""Task domains (variable mappers over concrete data) and evaluation metrics."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import spearmanr

from .oracle import GaussianMixture, Prediction, gmm_log_density
from .variables import DependencyGraph, ReasoningState


class TaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TaskDomain:
    """A data domain mapped onto n variables of width dim.

    ``encode`` turns a domain object into an (n, dim) value matrix and
    ``decode`` turns values back into a domain object.
    """

    name: str
    n: int
    dim: int
    positions: np.ndarray
    mixture: GaussianMixture | None
    encode: Callable[[object], np.ndarray]
    decode: Callable[[np.ndarray], object]
    graph: DependencyGraph | None = None
    order: int | None = None


def identity_task(mixture: GaussianMixture, n: int, dim: int = 1, name: str = "gaussian") -> TaskDomain:
    if n * dim != mixture.D:
        raise TaskError(f"mixture dimension {mixture.D} does not match {n} x {dim}")
    return TaskDomain(
        name, n, dim, np.arange(n, dtype=np.float64), mixture,
        encode=lambda obj: np.asarray(obj, dtype=np.float64).reshape(n, dim),
        decode=lambda values: np.asarray(values, dtype=np.float64).reshape(n, dim),
    )


def linear_task(mixture_of_latents: GaussianMixture, matrix, n: int, dim: int = 1, name: str = "linear") -> TaskDomain:
    """Domain objects are ``matrix @ latent``; variables hold the latent (a fixed, invertible codec)."""
    M = np.asarray(matrix, dtype=np.float64)
    Minv = np.linalg.inv(M)
    return TaskDomain(
        name, n, dim, np.arange(n, dtype=np.float64), mixture_of_latents,
        encode=lambda obj: (Minv @ np.asarray(obj, dtype=np.float64).ravel()).reshape(n, dim),
        decode=lambda values: M @ np.asarray(values, dtype=np.float64).ravel(),
    )


def correlated_gaussian(mean=(0.0, 0.0), rho: float = 0.8, scale=(1.0, 1.0)) -> tuple[GaussianMixture, TaskDomain]:
    s = np.asarray(scale, dtype=np.float64)
    cov = np.array([[s[0] ** 2, rho * s[0] * s[1]], [rho * s[0] * s[1], s[1] ** 2]])
    gmm = GaussianMixture([1.0], [np.asarray(mean, dtype=np.float64)], [cov])
    return gmm, identity_task(gmm, 2, 1, "gaussian")


def latin_squares(order: int) -> list[np.ndarray]:
    """All order x order Latin squares over digits 0..order-1, in lexicographic order."""
    perms = list(itertools.permutations(range(order)))
    out = []

    def extend(rows):
        if len(rows) == order:
            out.append(np.array(rows, dtype=np.int64))
            return
        for p in perms:
            if all(p[c] != r[c] for r in rows for c in range(order)):
                extend(rows + [p])

    extend([])
    return out


def encode_digits(grid, order: int) -> np.ndarray:
    return 2.0 * np.asarray(grid, dtype=np.float64) / (order - 1) - 1.0


def decode_digits(values, order: int) -> np.ndarray:
    g = np.rint((np.asarray(values, dtype=np.float64) + 1.0) * (order - 1) / 2.0)
    return np.clip(g, 0, order - 1).astype(np.int64)


def is_latin(grid) -> bool:
    grid = np.asarray(grid)
    order = grid.shape[0]
    want = np.arange(order)
    return all(np.array_equal(np.sort(grid[r]), want) for r in range(order)) and all(
        np.array_equal(np.sort(grid[:, c]), want) for c in range(order)
    )


def latin_square_mixture(order: int, sigma: float = 0.1) -> tuple[GaussianMixture, TaskDomain]:
    """One isotropic component per valid board, cells in row-major order."""
    if order not in (2, 3):
        raise TaskError(f"Latin-square order must be 2 or 3, got {order}")
    if not sigma > 0:
        raise TaskError("sigma must be positive")
    boards = latin_squares(order)
    n = order * order
    means = np.stack([encode_digits(b, order).ravel() for b in boards])
    covs = np.broadcast_to(sigma**2 * np.eye(n), (len(boards), n, n))
    gmm = GaussianMixture(np.full(len(boards), 1.0 / len(boards)), means, covs)
    task = TaskDomain(
        "latin-square", n, 1, np.arange(n, dtype=np.float64), gmm,
        encode=lambda grid: encode_digits(grid, order).reshape(n, 1),
        decode=lambda values: decode_digits(values, order).reshape(order, order),
        order=order,
    )
    return gmm, task


def decode_board(state: ReasoningState | np.ndarray, order: int) -> tuple[np.ndarray, bool]:
    values = state.values if isinstance(state, ReasoningState) else np.asarray(state)
    if values.size != order * order:
        raise TaskError(f"state has {values.size} values, a board of order {order} needs {order * order}")
    grid = decode_digits(values, order).reshape(order, order)
    return grid, is_latin(grid)


def sequence_task(length: int, phi: float) -> tuple[GaussianMixture, TaskDomain]:
    """Stationary AR(1) frames x_{s+1} = phi x_s + unit noise as one joint Gaussian."""
    if not abs(phi) < 1:
        raise TaskError("AR(1) coefficient must satisfy |phi| < 1")
    if length < 2:
        raise TaskError("sequence needs at least two frames")
    idx = np.arange(length)
    cov = phi ** np.abs(idx[:, None] - idx[None, :]) / (1.0 - phi * phi)
    gmm = GaussianMixture([1.0], [np.zeros(length)], [cov])
    task = identity_task(gmm, length, 1, "sequence")
    graph = DependencyGraph(length, [(s, s + 1) for s in range(length - 1)])
    return gmm, TaskDomain(task.name, length, 1, idx.astype(np.float64), gmm, task.encode, task.decode, graph)


def condition_mixture(gmm: GaussianMixture, observed, values) -> GaussianMixture:
    """Mixture over the unobserved coordinates given exact values of the observed ones."""
    obs = np.asarray(observed, dtype=np.int64)
    free = np.setdiff1d(np.arange(gmm.D), obs)
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size != obs.size:
        raise TaskError("one value per observed coordinate is required")
    if free.size == 0:
        raise TaskError("nothing left to condition on")
    logw, means, covs = [], [], []
    for w, mu, S in zip(gmm.weights, gmm.means, gmm.covs):
        Soo = S[np.ix_(obs, obs)]
        Sfo = S[np.ix_(free, obs)]
        L = np.linalg.cholesky(Soo)
        r = np.linalg.solve(L, x - mu[obs])
        G = np.linalg.solve(L, Sfo.T)  # L^-1 S_of
        with np.errstate(divide="ignore"):
            logw.append(np.log(w) - 0.5 * (r @ r) - np.sum(np.log(np.diag(L))))
        means.append(mu[free] + G.T @ r)
        C = S[np.ix_(free, free)] - G.T @ G
        covs.append(0.5 * (C + C.T))
    logw = np.array(logw)
    weights = np.exp(logw - logw.max())
    return GaussianMixture(weights / weights.sum(), means, covs)


def forced_cells(board: np.ndarray, revealed: np.ndarray, boards: list[np.ndarray]) -> np.ndarray:
    """Cells on which every Latin square agreeing with the revealed cells has the same digit."""
    flat = board.ravel()
    consistent = [b.ravel() for b in boards if np.array_equal(b.ravel()[revealed], flat[revealed])]
    stack = np.stack(consistent)
    return np.all(stack == stack[:1], axis=0) & ~revealed


@dataclass
class Metrics:
    moment_error: float | None = None
    nll: float | None = None
    validity_rate: float | None = None
    uncertainty_calibration: float | None = None
    extras: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("extras")
        return out


def _as_array(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples.astype(np.float64)
    return np.stack([s.values if isinstance(s, ReasoningState) else np.asarray(s) for s in samples]).astype(np.float64)


def evaluate_samples(samples, task: TaskDomain, predictions: Prediction | list | None = None) -> Metrics:
    """Moment error and NLL against the task mixture, validity for boards,
    and rank correlation between predicted variance and squared x0 error."""
    x = _as_array(samples)
    if x.shape[0] < 2:
        raise TaskError("need at least two samples to evaluate")
    flat = x.reshape(x.shape[0], -1)
    m = Metrics()
    if task.mixture is not None:
        gmm = task.mixture
        mean_err = np.max(np.abs(flat.mean(axis=0) - gmm.mean()))
        cov_err = np.max(np.abs(np.cov(flat, rowvar=False).reshape(gmm.D, gmm.D) - gmm.covariance()))
        m.moment_error = float(max(mean_err, cov_err))
        m.nll = float(-np.mean(gmm_log_density(gmm, flat)))
    if task.order is not None:
        m.validity_rate = float(np.mean([decode_board(v, task.order)[1] for v in x]))
    if predictions is not None:
        if isinstance(predictions, list):
            x0 = np.stack([p.x0_mean for p in predictions])
            var = np.stack([p.var for p in predictions])
        else:
            x0, var = predictions.x0_mean, predictions.var
        sq = np.sum((x0 - x) ** 2, axis=-1).ravel()
        var = np.asarray(var).ravel()
        if np.ptp(var) > 0 and np.ptp(sq) > 0:
            m.uncertainty_calibration = float(spearmanr(var, sq).statistic)
        else:
            m.uncertainty_calibration = 0.0
    return m


def entropy_estimate(gmm: GaussianMixture, draws: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo differential entropy and its standard error."""
    from .oracle import gmm_sample

    lp = gmm_log_density(gmm, gmm_sample(gmm, rng, size=draws))
    return float(-lp.mean()), float(lp.std(ddof=1) / math.sqrt(draws))
