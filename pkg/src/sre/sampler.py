"""Denoising steps and full inference runs over heterogeneous noise levels.

Everything here works on batches of independent chains: values (B, n, dim),
levels (B, n). A denoiser is any callable ``denoiser(values, levels) ->
Prediction`` returning the x0 estimate and per-variable uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .oracle import Prediction
from .paradigm import Paradigm, ParadigmError, coefficients
from .schedule import ScheduleMatrix, ScheduleSpec, adaptive_ramp_length, select_batch
from .variables import DependencyGraph, ReasoningState, make_state

Denoiser = Callable[[np.ndarray, np.ndarray], Prediction]
METHODS = ("ddpm-ancestral", "ddim", "euler-flow", "heun-flow")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class StepMethod:
    kind: str = "ddim"
    eta: float = 0.0
    learned_variance: bool = False

    def __post_init__(self):
        if self.kind not in METHODS:
            raise SamplerError(f"unknown step method {self.kind!r}")
        if not self.eta >= 0.0:
            raise SamplerError("eta must be nonnegative")
        if self.learned_variance and self.kind != "ddpm-ancestral":
            raise SamplerError("learned variance is only supported with ddpm-ancestral steps")

    @property
    def stochastic(self) -> bool:
        return self.kind == "ddpm-ancestral" or (self.kind == "ddim" and self.eta > 0)


def check_method(method: StepMethod, paradigm: Paradigm) -> None:
    if method.kind == "ddpm-ancestral" and not paradigm.is_discrete:
        raise SamplerError(f"ddpm-ancestral steps need the ddpm-discrete paradigm, not {paradigm.kind}")
    if method.kind in ("euler-flow", "heun-flow") and not paradigm.has_velocity:
        raise SamplerError(f"{method.kind} needs a paradigm with a velocity; {paradigm.kind} has none")


class NoiseSource:
    """Fresh standard normals keyed by (seed, column, variable).

    Chain c always receives row c of its substream, so results do not depend
    on how chains are split into batches or on evaluation order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def draw(self, column: int, variable: int, chains: int, dim: int, offset: int = 0, tag: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.seed, tag, column, variable])
        return rng.standard_normal((offset + chains, dim))[offset:]

    def block(self, column: int, n: int, chains: int, dim: int, offset: int = 0, tag: int = 0) -> np.ndarray:
        """(chains, n, dim) with one independent substream per variable."""
        return np.stack([self.draw(column, i, chains, dim, offset, tag) for i in range(n)], axis=1)


def initial_noise(seed: int, chains: int, n: int, dim: int, offset: int = 0) -> np.ndarray:
    return NoiseSource(seed).block(0, n, chains, dim, offset, tag=1)


def _col(arr) -> np.ndarray:
    return np.asarray(arr)[..., None]


def _step_batch(
    x, t, t_new, pred: Prediction, paradigm: Paradigm, method: StepMethod, conditioned,
    noise: Callable[[], np.ndarray] | None, denoiser: Denoiser | None,
):
    if np.any(t_new > t):
        raise SamplerError("target level above current level")
    moving = (t_new < t) & ~conditioned
    if not moving.any():
        return x.copy()
    x0 = pred.x0_mean
    # only moving entries are evaluated; others get harmless placeholder levels
    tc = np.where(moving, t, 1.0)
    tn = np.where(moving, t_new, 0.0)
    if paradigm.is_discrete:
        try:
            paradigm.grid_index(tc), paradigm.grid_index(tn)
        except ParadigmError as exc:
            raise SamplerError(f"discrete paradigm steps need levels on its grid: {exc}") from None
    c = coefficients(paradigm, tc)
    a, b = _col(c.a), _col(c.b)
    eps = (x - a * x0) / b

    if method.kind == "ddpm-ancestral":
        i = paradigm.grid_index(tc)
        j = paradigm.grid_index(tn)
        if np.any(moving & (j != i - 1)):
            raise SamplerError("ancestral steps must move exactly one grid level")
        betas, abar = paradigm.betas, paradigm.alpha_bars
        beta = betas[i - 1]
        c0 = np.sqrt(abar[i - 1]) * beta / (1.0 - abar[i])
        c1 = np.sqrt(1.0 - beta) * (1.0 - abar[i - 1]) / (1.0 - abar[i])
        out = _col(c0) * x0 + _col(c1) * x
        log_beta, log_tilde = paradigm.posterior_variances()
        if method.learned_variance:
            if pred.interp is None:
                raise SamplerError("learned variance requested but the denoiser has no variance head")
            h = pred.interp
            logvar = h * log_beta[i - 1] + (1.0 - h) * log_tilde[i - 1]
        else:
            logvar = log_tilde[i - 1]
        sigma = np.where(i > 1, np.exp(0.5 * logvar), 0.0)
        out = out + _col(sigma) * noise()
    elif method.kind == "ddim":
        cn = coefficients(paradigm, tn)
        an, bn = _col(cn.a), _col(cn.b)
        if method.eta > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(an > 0, (a * bn) ** 2 / (an * b) ** 2, 1.0)
            sigma = np.minimum(method.eta * bn * np.sqrt(np.clip(1.0 - ratio, 0.0, None)), bn)
            out = an * x0 + np.sqrt(np.clip(bn**2 - sigma**2, 0.0, None)) * eps + sigma * noise()
        else:
            out = an * x0 + bn * eps
    else:
        dt = _col(tn - tc)
        u1 = _col(c.da) * x0 + _col(c.db) * eps
        out = x + dt * u1
        if method.kind == "heun-flow":
            if denoiser is None:
                raise SamplerError("heun-flow steps need the denoiser for the corrector stage")
            x_mid = np.where(moving[..., None], out, x)
            pred2 = denoiser(x_mid, np.where(moving, t_new, t))
            cn = coefficients(paradigm, tn)
            an, bn = _col(cn.a), _col(cn.b)
            safe = bn > 0
            eps2 = np.where(safe, (x_mid - an * pred2.x0_mean) / np.where(safe, bn, 1.0), 0.0)
            u2 = _col(cn.da) * pred2.x0_mean + _col(cn.db) * eps2
            # the corrector is singular at level 0; keep the Euler result there
            out = np.where(safe, x + dt * 0.5 * (u1 + u2), out)
    return np.where(moving[..., None], out, x)


def denoise_step(
    state: ReasoningState,
    pred: Prediction,
    target_levels,
    paradigm: Paradigm,
    method: StepMethod,
    noise: NoiseSource | None = None,
    column: int = 1,
    denoiser: Denoiser | None = None,
) -> ReasoningState:
    """Move every variable from its current level to its target level.

    Variables whose target equals their level, and conditioned variables, are
    returned bit-for-bit unchanged. ``noise`` supplies fresh normals for the
    stochastic methods.
    """
    check_method(method, paradigm)
    target = np.asarray(target_levels, dtype=np.float64)
    if target.shape != state.levels.shape:
        raise SamplerError("target levels do not match the number of variables")
    if np.any(target[state.conditioned] != 0.0):
        raise SamplerError("conditioned variables must stay at level 0")
    if method.stochastic and noise is None:
        raise SamplerError(f"{method.kind} with eta={method.eta} needs a noise source")
    draw = (lambda: noise.block(column, state.n, 1, state.dim)) if noise is not None else None
    pred_b = Prediction(
        pred.x0_mean[None], np.asarray(pred.var)[None], None, None if pred.interp is None else np.asarray(pred.interp)[None]
    )
    out = _step_batch(
        state.values[None], state.levels[None], target[None], pred_b, paradigm, method,
        state.conditioned[None], draw, denoiser,
    )
    return make_state(out[0], target, state.conditioned)


@dataclass
class Trajectory:
    """Snapshots after each column: values (B, n, dim), levels (B, n) and the prediction used."""

    columns: list[int] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    levels: list[np.ndarray] = field(default_factory=list)
    predictions: list[Prediction | None] = field(default_factory=list)

    def add(self, column, values, levels, pred):
        self.columns.append(column)
        self.values.append(values.copy())
        self.levels.append(levels.copy())
        self.predictions.append(pred)


@dataclass
class InferenceResult:
    values: np.ndarray
    levels: np.ndarray
    first_prediction: Prediction
    trajectory: Trajectory | None = None


@dataclass(frozen=True)
class AdaptivePolicy:
    """Certainty-ordered schedule: start the k most certain unstarted variables when idle."""

    k: int
    d: int
    graph: DependencyGraph | None = None

    @classmethod
    def from_spec(cls, spec: ScheduleSpec) -> "AdaptivePolicy":
        return cls(spec.k, spec.d, spec.graph)


def run_chains(
    denoiser: Denoiser,
    values,
    conditioned,
    policy: ScheduleMatrix | AdaptivePolicy | ScheduleSpec,
    paradigm: Paradigm,
    method: StepMethod,
    seed: int = 0,
    record: bool = False,
    chain_offset: int = 0,
) -> InferenceResult:
    """Run B independent chains from their initial values to level 0.

    ``conditioned`` is an (n,) or (B, n) mask; conditioned variables start and
    stay clean. With a ScheduleMatrix, every chain follows the same columns;
    with an adaptive policy, each chain picks its own order from the
    denoiser's uncertainties.
    """
    check_method(method, paradigm)
    x = np.array(values, dtype=np.float64)
    B, n, dim = x.shape
    cond = np.broadcast_to(np.asarray(conditioned, bool), (B, n))
    noise = NoiseSource(seed)

    def draw(column):
        return lambda: noise.block(column, n, B, dim, offset=chain_offset)

    traj = Trajectory() if record else None
    if isinstance(policy, ScheduleSpec):
        if policy.kind != "adaptive-certainty":
            raise SamplerError("pass a built ScheduleMatrix for non-adaptive schedules")
        policy = AdaptivePolicy.from_spec(policy)

    if isinstance(policy, ScheduleMatrix) and not policy.adaptive:
        T = policy.levels
        if T.shape[0] != n:
            raise SamplerError(f"schedule has {T.shape[0]} rows for {n} variables")
        levels = np.broadcast_to(T[:, 0], (B, n)).copy()
        if np.any(levels[cond] != 0.0):
            raise SamplerError("schedule column 0 must keep conditioned variables clean")
        first = None
        if record:
            traj.add(0, x, levels, None)
        for col in range(1, T.shape[1]):
            target = np.broadcast_to(T[:, col], (B, n))
            pred = None
            if np.any(target != levels):
                pred = denoiser(x, levels)
                first = pred if first is None else first
                x = _step_batch(x, levels, target, pred, paradigm, method, cond, draw(col), denoiser)
                levels = target.copy()
            if record:
                traj.add(col, x, levels, pred)
        if first is None:
            first = denoiser(x, levels)
        return InferenceResult(x, levels, first, traj)

    if isinstance(policy, ScheduleMatrix):
        raise SamplerError("adaptive schedule stubs need an AdaptivePolicy carrying k and d")
    return _run_adaptive(denoiser, x, cond, policy, paradigm, method, draw, traj)


def _run_adaptive(denoiser, x, cond, policy: AdaptivePolicy, paradigm, method, draw, traj):
    B, n, _ = x.shape
    active = ~cond
    m = int(active[0].sum())
    ramp = adaptive_ramp_length(policy.d, m, policy.k)
    parents = policy.graph.parents() if policy.graph is not None else None
    progress = np.where(active, -1, ramp)  # -1: not started; ramp: clean
    levels = np.where(active, 1.0, 0.0)
    first = None
    if traj is not None:
        traj.add(0, x, levels, None)
    max_rounds = n * (policy.d + 1) + 1
    for rnd in range(1, max_rounds + 1):
        if np.all(levels == 0.0):
            break
        pred = denoiser(x, levels)
        first = pred if first is None else first
        in_flight = (progress >= 0) & (progress < ramp)
        idle = ~in_flight.any(axis=1) & (levels > 0).any(axis=1)
        if idle.any():
            pick = select_batch(levels[idle], pred.var[idle], cond[idle], policy.k, parents)
            if np.any(~pick.any(axis=1)):
                raise SamplerError("adaptive schedule made no progress: nothing selectable")
            prog_idle = progress[idle]
            prog_idle[pick] = 0
            progress[idle] = prog_idle
            in_flight = (progress >= 0) & (progress < ramp)
        progress = np.where(in_flight, progress + 1, progress)
        target = np.where(progress >= 0, (ramp - np.clip(progress, 0, ramp)) / ramp, 1.0)
        target = np.where(active, target, 0.0)
        x = _step_batch(x, levels, target, pred, paradigm, method, cond, draw(rnd), denoiser)
        levels = target
        if traj is not None:
            traj.add(rnd, x, levels, pred)
    else:
        raise SamplerError("adaptive schedule did not terminate")
    if first is None:
        first = denoiser(x, levels)
    return InferenceResult(x, levels, first, traj)


def run_inference(
    denoiser: Denoiser,
    initial: ReasoningState,
    policy,
    paradigm: Paradigm,
    method: StepMethod,
    seed: int = 0,
    record: bool = False,
):
    """Single-chain inference. Returns the final state, plus the trajectory if ``record``."""
    if isinstance(policy, ScheduleMatrix) and not policy.adaptive:
        if not np.array_equal(policy.levels[:, 0], initial.levels):
            raise SamplerError("schedule column 0 does not match the initial levels")
    elif np.any(initial.levels[~initial.conditioned] != 1.0):
        raise SamplerError("adaptive runs start with every free variable at level 1")
    res = run_chains(
        denoiser, initial.values[None], initial.conditioned, policy, paradigm, method, seed, record
    )
    final = make_state(res.values[0], res.levels[0], initial.conditioned)
    return (final, res.trajectory) if record else final
