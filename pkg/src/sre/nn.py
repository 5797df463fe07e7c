"""A small token-wise MLP denoiser with hand-written reverse-mode gradients.

Each variable becomes one token ``[values, emb(level), emb(position)]``. A
shared tanh trunk maps every token to a hidden vector; the mean over tokens is
appended to each token as global context, then shared head layers produce the
per-variable outputs::

    mean (dim) | log_variance (1, optional) | variance_interp logit (1, optional)

The mean head is read in the net's prediction kind and converted to x0.
Everything works on batches: values (B, n, dim), levels (B, n).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .oracle import Prediction, gmm_sample
from .paradigm import ConversionError, Paradigm, PredictionKind, coefficients, forward_diffuse
from .tsampling import TSampler, sample_training_levels
from .variables import ReasoningState

MAGIC = b"SRNN1"
SINGULAR_TOL = 1e-12
VAR_FLOOR = 1e-6
LOSS_KINDS = ("mse", "nll", "vlb", "cosine")
_KIND_CODES = {PredictionKind.EPSILON: 0, PredictionKind.X0: 1, PredictionKind.V: 2, PredictionKind.U: 3}
_ACTIVATIONS = {"tanh": 0}


class NetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def sinusoidal(x, width: int) -> np.ndarray:
    """``[sin(w x), cos(w x)]`` with width/2 frequencies w geometric from 1 to 1000."""
    if width % 2:
        raise NetError(f"embedding width must be even, got {width}")
    half = width // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    ang = np.asarray(x, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class Tokenizer:
    dim: int
    emb_dim: int = 16
    pos_dim: int = 16

    @property
    def width(self) -> int:
        return self.dim + self.emb_dim + self.pos_dim

    def __call__(self, values, levels, positions) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        levels = np.asarray(levels, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.float64)
        if values.shape[-1] != self.dim:
            raise NetError(f"values have width {values.shape[-1]}, tokenizer expects {self.dim}")
        n = values.shape[-2]
        if positions.shape != (n,):
            raise NetError(f"got {positions.shape[0] if positions.ndim else 0} positions for {n} variables")
        if levels.shape != values.shape[:-1]:
            raise NetError(f"levels shape {levels.shape} does not match values {values.shape}")
        pos = np.broadcast_to(sinusoidal(positions, self.pos_dim), values.shape[:-1] + (self.pos_dim,))
        return np.concatenate([values, sinusoidal(levels, self.emb_dim), pos], axis=-1)


def tokenize(state: ReasoningState, positions, emb_dim: int = 16, pos_dim: int = 16) -> np.ndarray:
    return Tokenizer(state.dim, emb_dim, pos_dim)(state.values, state.levels, positions)


@dataclass(frozen=True)
class NetConfig:
    dim: int
    trunk: tuple[int, ...] = (64,)
    head: tuple[int, ...] = (64,)
    emb_dim: int = 16
    pos_dim: int = 16
    log_var: bool = False
    var_interp: bool = False
    kind: PredictionKind = PredictionKind.X0
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(w) for w in self.trunk))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        object.__setattr__(self, "kind", PredictionKind(self.kind))
        if self.dim < 1 or any(w < 1 for w in self.trunk + self.head):
            raise NetError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise NetError(f"unknown activation {self.activation!r}")
        Tokenizer(self.dim, self.emb_dim, self.pos_dim)
        if self.emb_dim % 2 or self.pos_dim % 2:
            raise NetError("embedding widths must be even")

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.dim, self.emb_dim, self.pos_dim)

    @property
    def out_width(self) -> int:
        return self.dim + int(self.log_var) + int(self.var_interp)

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.tokenizer.width, *self.trunk]
        shapes = list(zip(widths[:-1], widths[1:]))
        head = [2 * widths[-1], *self.head, self.out_width]
        return shapes + list(zip(head[:-1], head[1:]))


@dataclass
class ForwardCache:
    trunk_acts: list[np.ndarray]
    head_acts: list[np.ndarray]


@dataclass
class NetOutput:
    """Raw head outputs plus the derived prediction."""

    mean: np.ndarray  # (B, n, dim) in the net's prediction kind
    log_var: np.ndarray | None  # (B, n)
    interp: np.ndarray | None  # (B, n), after the sigmoid
    prediction: Prediction
    cache: ForwardCache = field(repr=False)


class DenoiserNet:
    def __init__(self, config: NetConfig, params: list[tuple[np.ndarray, np.ndarray]]):
        shapes = config.layer_shapes()
        if len(params) != len(shapes):
            raise NetError(f"expected {len(shapes)} layers, got {len(params)}")
        for (W, b), (i, o) in zip(params, shapes):
            if W.shape != (i, o) or b.shape != (o,):
                raise NetError(f"layer shape {W.shape}/{b.shape} does not match ({i}, {o})")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NetError("parameters must be finite")
        self.config = config
        self.params = [(np.array(W), np.array(b)) for W, b in params]

    @classmethod
    def init(cls, config: NetConfig, rng: np.random.Generator, scale: float = 1.0) -> "DenoiserNet":
        params = []
        for i, o in config.layer_shapes():
            params.append((rng.standard_normal((i, o)) * (scale / math.sqrt(i)), np.zeros(o)))
        return cls(config, params)

    @classmethod
    def zeros(cls, config: NetConfig) -> "DenoiserNet":
        return cls(config, [(np.zeros((i, o)), np.zeros(o)) for i, o in config.layer_shapes()])

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.params)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.params])

    def with_flat(self, theta: np.ndarray) -> "DenoiserNet":
        out, pos = [], 0
        for i, o in self.config.layer_shapes():
            W = theta[pos : pos + i * o].reshape(i, o)
            pos += i * o
            out.append((W, theta[pos : pos + o]))
            pos += o
        net = DenoiserNet.__new__(DenoiserNet)
        net.config, net.params = self.config, out
        return net

    def copy(self) -> "DenoiserNet":
        return DenoiserNet(self.config, self.params)

    def forward(self, values, levels, positions, paradigm: Paradigm, conditioned=None) -> NetOutput:
        cfg = self.config
        values = np.asarray(values)
        single = values.ndim == 2
        if single:
            values, levels = values[None], np.asarray(levels)[None]
        levels = np.asarray(levels, dtype=np.float64)
        dtype = self.params[0][0].dtype
        tokens = cfg.tokenizer(values.astype(np.float64), levels, positions).astype(dtype)
        if tokens.shape[-1] * (1 if cfg.trunk else 2) != self.params[0][0].shape[0]:
            raise NetError(f"token width {tokens.shape[-1]} does not match the first layer")
        n_trunk = len(cfg.trunk)
        h = tokens
        trunk_acts = [h]
        for W, b in self.params[:n_trunk]:
            h = np.tanh(h @ W + b)
            trunk_acts.append(h)
        z = np.concatenate([h, np.broadcast_to(h.mean(axis=1, keepdims=True), h.shape)], axis=-1)
        head_acts = [z]
        for W, b in self.params[n_trunk:-1]:
            z = np.tanh(z @ W + b)
            head_acts.append(z)
        W, b = self.params[-1]
        out = z @ W + b

        mean = out[..., : cfg.dim]
        col = cfg.dim
        log_var = interp = None
        if cfg.log_var:
            log_var = out[..., col]
            col += 1
        if cfg.var_interp:
            interp = expit(out[..., col])

        B, n = levels.shape
        cond = np.zeros((B, n), bool) if conditioned is None else np.broadcast_to(np.asarray(conditioned, bool), (B, n))
        alpha, beta, valid = affine_map(paradigm, cfg.kind, PredictionKind.X0, levels)
        if np.any(~valid & ~cond):
            raise ConversionError(f"cannot recover x0 from a {cfg.kind.value} prediction at these levels")
        x0 = alpha[..., None] * mean + beta[..., None] * values
        var = cfg.dim * np.maximum(np.exp(log_var), VAR_FLOOR) if log_var is not None else np.zeros((B, n), dtype)
        x0 = np.where(cond[..., None], values, x0)
        var = np.where(cond, 0.0, var)
        pred = Prediction(x0, var, None, interp)
        res = NetOutput(mean, log_var, interp, pred, ForwardCache(trunk_acts, head_acts))
        if single:
            res.prediction = pred[0]
        return res

    def backward(self, output: NetOutput, grads: dict) -> list[tuple[np.ndarray, np.ndarray]]:
        """Parameter gradients given loss gradients w.r.t. the raw head outputs."""
        cfg = self.config
        trunk_acts, head_acts = output.cache.trunk_acts, output.cache.head_acts
        B, n = trunk_acts[0].shape[:2]
        dout = np.zeros((B, n, cfg.out_width), dtype=trunk_acts[0].dtype)
        dout[..., : cfg.dim] = grads["mean"]
        col = cfg.dim
        if cfg.log_var:
            dout[..., col] = grads.get("log_var", 0.0)
            col += 1
        if cfg.var_interp:
            h = output.interp
            dout[..., col] = grads.get("interp", 0.0) * h * (1.0 - h)

        n_trunk = len(cfg.trunk)
        out = [None] * len(self.params)

        def linear_back(k, x, dy):
            W = self.params[k][0]
            out[k] = (np.einsum("bni,bno->io", x, dy), dy.sum(axis=(0, 1)))
            return dy @ W.T

        dz = linear_back(len(self.params) - 1, head_acts[-1], dout)
        for k in range(len(self.params) - 2, n_trunk - 1, -1):
            z = head_acts[k - n_trunk + 1]
            dz = linear_back(k, head_acts[k - n_trunk], dz * (1.0 - z * z))
        H = dz.shape[-1] // 2
        dh = dz[..., :H] + dz[..., H:].sum(axis=1, keepdims=True) / n
        for k in range(n_trunk - 1, -1, -1):
            h = trunk_acts[k + 1]
            dh = linear_back(k, trunk_acts[k], dh * (1.0 - h * h))
        return out


class NeuralDenoiser:
    """Adapts a net to the sampler's ``denoiser(values, levels)`` contract."""

    def __init__(self, net: DenoiserNet, paradigm: Paradigm, positions, conditioned=None):
        self.net = net
        self.paradigm = paradigm
        self.positions = np.asarray(positions, dtype=np.float64)
        self.conditioned = None if conditioned is None else np.asarray(conditioned, bool)

    def __call__(self, values, levels) -> Prediction:
        levels = np.asarray(levels, dtype=np.float64)
        if levels.ndim == 1 and np.asarray(values).ndim == 3:
            levels = np.broadcast_to(levels, np.asarray(values).shape[:2])
        return self.net.forward(values, levels, self.positions, self.paradigm, self.conditioned).prediction


# --- parameterization as an affine map -------------------------------------


def _pq(kind: PredictionKind, c):
    """A prediction of ``kind`` equals p * x0 + q * eps."""
    one, zero = np.ones_like(c.a), np.zeros_like(c.a)
    if kind == PredictionKind.X0:
        return one, zero
    if kind == PredictionKind.EPSILON:
        return zero, one
    if kind == PredictionKind.V:
        return -c.b, c.a
    return c.da, c.db


def affine_map(paradigm: Paradigm, src, dst, levels):
    """Per-variable (alpha, beta, valid) with ``dst = alpha * src + beta * x_t``.

    ``valid`` is False where the source prediction does not determine x0 and
    eps jointly (e.g. epsilon at a = 0).
    """
    src, dst = PredictionKind(src), PredictionKind(dst)
    levels = np.asarray(levels, dtype=np.float64)
    if src == dst:
        return np.ones_like(levels), np.zeros_like(levels), np.ones(levels.shape, bool)
    if not paradigm.has_velocity and PredictionKind.U in (src, dst):
        raise ConversionError(f"{paradigm.kind} defines no velocity (u) parameterization")
    c = coefficients(paradigm, levels)
    c = type(c)(*(np.asarray(v, dtype=np.float64) for v in c))
    ps, qs = _pq(src, c)
    pd, qd = _pq(dst, c)
    det = c.a * qs - c.b * ps
    valid = np.abs(det) >= SINGULAR_TOL
    safe = np.where(valid, det, 1.0)
    alpha = (c.a * qd - c.b * pd) / safe
    beta = (pd * qs - qd * ps) / safe
    return np.where(valid, alpha, 0.0), np.where(valid, beta, 0.0), valid


# --- losses -----------------------------------------------------------------


@dataclass(frozen=True)
class LossTerm:
    kind: str
    weight: float = 1.0
    target: PredictionKind = PredictionKind.EPSILON

    def __post_init__(self):
        object.__setattr__(self, "target", PredictionKind(self.target))
        if self.kind not in LOSS_KINDS:
            raise NetError(f"unknown loss kind {self.kind!r}")
        if not self.weight >= 0:
            raise NetError("loss weights must be nonnegative")
        if self.kind == "cosine" and self.target != PredictionKind.U:
            raise NetError("cosine loss needs target parameterization u")


@dataclass(frozen=True)
class LossSpec:
    terms: tuple[LossTerm, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not any(t.weight > 0 for t in self.terms):
            raise NetError("loss spec needs at least one term with positive weight")

    @classmethod
    def single(cls, kind: str, target=PredictionKind.EPSILON, weight: float = 1.0) -> "LossSpec":
        return cls((LossTerm(kind, weight, target),))

    def check(self, paradigm: Paradigm, config: NetConfig | None = None) -> None:
        kinds = {t.kind for t in self.terms}
        if "vlb" in kinds and not paradigm.is_discrete:
            raise NetError(f"vlb loss needs the ddpm-discrete paradigm, not {paradigm.kind}")
        if not paradigm.has_velocity and any(t.target == PredictionKind.U for t in self.terms):
            raise NetError(f"{paradigm.kind} has no velocity target (u)")
        if config is not None:
            if "nll" in kinds and not config.log_var:
                raise NetError("nll loss needs the log-variance head")
            if "vlb" in kinds and not config.var_interp:
                raise NetError("vlb loss needs the variance-interpolation head")


def compute_loss(
    out: NetOutput,
    target_x0,
    target_eps,
    paradigm: Paradigm,
    levels,
    spec: LossSpec,
    kind: PredictionKind = PredictionKind.X0,
    conditioned=None,
    detached_x0=None,
):
    """Weighted loss and its gradients w.r.t. the raw head outputs.

    ``kind`` is the parameterization of ``out.mean``. Every term is averaged
    over the scalar entries of unconditioned variables; cosine is averaged over
    samples. ``detached_x0`` fixes the x0 estimate seen by the vlb term (the
    stop-gradient); by default it is the current prediction.
    """
    kind = PredictionKind(kind)
    spec.check(paradigm)
    x0 = np.asarray(target_x0)
    eps = np.asarray(target_eps)
    levels = np.asarray(levels, dtype=np.float64)
    mean = out.mean
    if mean.ndim == 2:
        raise NetError("compute_loss works on batched outputs (B, n, dim)")
    B, n, dim = mean.shape
    if x0.shape != mean.shape or eps.shape != mean.shape or levels.shape != (B, n):
        raise NetError("prediction, targets and levels disagree in shape")
    active = np.ones((B, n), bool) if conditioned is None else ~np.broadcast_to(np.asarray(conditioned, bool), (B, n))
    x_t = forward_diffuse(paradigm, x0, eps, levels)
    c = coefficients(paradigm, levels)
    a_x0, b_x0, ok_x0 = affine_map(paradigm, kind, PredictionKind.X0, levels)
    x0_hat = a_x0[..., None] * mean + b_x0[..., None] * x_t

    total = 0.0
    g_mean = np.zeros_like(mean)
    g_logvar = np.zeros((B, n), dtype=mean.dtype) if out.log_var is not None else None
    g_interp = np.zeros((B, n), dtype=mean.dtype) if out.interp is not None else None

    for term in spec.terms:
        if term.weight == 0:
            continue
        w = term.weight
        if term.kind == "mse":
            alpha, beta, ok = affine_map(paradigm, kind, term.target, levels)
            p, q = _pq(term.target, type(c)(*(np.asarray(v, dtype=np.float64) for v in c)))
            mask = active & ok
            count = max(int(mask.sum()), 1) * dim
            pred_t = alpha[..., None] * mean + beta[..., None] * x_t
            r = np.where(mask[..., None], pred_t - (p[..., None] * x0 + q[..., None] * eps), 0.0)
            total = total + w * np.sum(r * r) / count
            g_mean = g_mean + w * 2.0 * alpha[..., None] * r / count
        elif term.kind == "nll":
            if out.log_var is None:
                raise NetError("nll loss needs the log-variance head")
            mask = active & ok_x0
            count = max(int(mask.sum()), 1) * dim
            raw = np.exp(out.log_var)
            s2 = np.maximum(raw, VAR_FLOOR)
            r = np.where(mask[..., None], x0_hat - x0, 0.0)
            r2 = np.sum(r * r, axis=-1)
            per = 0.5 * (dim * np.log(2.0 * np.pi * s2) + r2 / s2)
            total = total + w * np.sum(np.where(mask, per, 0.0)) / count
            g_mean = g_mean + w * a_x0[..., None] * r / s2[..., None] / count
            dlv = np.where(mask & (raw > VAR_FLOOR), 0.5 * dim - 0.5 * r2 / s2, 0.0)
            g_logvar = g_logvar + w * dlv / count
        elif term.kind == "vlb":
            if out.interp is None:
                raise NetError("vlb loss needs the variance-interpolation head")
            value, dh = _vlb(paradigm, x0, x_t, levels, active, out.interp, x0_hat if detached_x0 is None else detached_x0)
            total = total + w * value
            g_interp = g_interp + w * dh
        else:
            value, gm = _cosine(paradigm, kind, mean, x0, eps, x_t, levels, active)
            total = total + w * value
            g_mean = g_mean + w * gm
    grads = {"mean": g_mean}
    if g_logvar is not None:
        grads["log_var"] = g_logvar
    if g_interp is not None:
        grads["interp"] = g_interp
    return total, grads


def _vlb(paradigm: Paradigm, x0, x_t, levels, active, h, x0_model):
    """iDDPM variational term with the model mean held fixed.

    Step i >= 2: KL(q(x_{i-1} | x_i, x0) || N(mu(x_i, x0_model), sigma^2)).
    Step i = 1: Gaussian negative log-likelihood of x0 under the model.
    Variables at level 0 contribute nothing.
    """
    i = paradigm.grid_index(levels)
    dim = x0.shape[-1]
    betas, abar = paradigm.betas, paradigm.alpha_bars
    log_beta, log_tilde = paradigm.posterior_variances()
    mask = active & (i >= 1)
    ii = np.where(mask, i, 1)
    beta = betas[ii - 1]
    c0 = (np.sqrt(abar[ii - 1]) * beta / (1.0 - abar[ii]))[..., None]
    c1 = (np.sqrt(1.0 - beta) * (1.0 - abar[ii - 1]) / (1.0 - abar[ii]))[..., None]
    lb, lt = log_beta[ii - 1], log_tilde[ii - 1]
    logvar = h * lb + (1.0 - h) * lt
    var = np.exp(logvar)
    mu_model = c0 * x0_model + c1 * x_t
    first = ii == 1
    mu_true = c0 * x0 + c1 * x_t
    ref = np.where(first[..., None], x0, mu_true)
    d2 = np.sum((ref - mu_model) ** 2, axis=-1)
    true_var = np.exp(lt)  # clipped posterior variance, never evaluated at i = 1
    kl = 0.5 * (dim * (logvar - lt) + (dim * true_var + d2) / var - dim)
    nll = 0.5 * (dim * (np.log(2.0 * np.pi) + logvar) + d2 / var)
    per = np.where(first, nll, kl)
    dlogvar = np.where(first, 0.5 * (dim - d2 / var), 0.5 * (dim - (dim * true_var + d2) / var))
    count = max(int(mask.sum()), 1) * dim
    value = np.sum(np.where(mask, per, 0.0)) / count
    dh = np.where(mask, dlogvar * (lb - lt), 0.0) / count
    return value, dh


def _cosine(paradigm, kind, mean, x0, eps, x_t, levels, active):
    alpha, beta, ok = affine_map(paradigm, kind, PredictionKind.U, levels)
    c = coefficients(paradigm, levels)
    mask = (active & ok)[..., None]
    u_hat = np.where(mask, alpha[..., None] * mean + beta[..., None] * x_t, 0.0)
    u = np.where(mask, np.asarray(c.da)[..., None] * x0 + np.asarray(c.db)[..., None] * eps, 0.0)
    B = mean.shape[0]
    uh, ut = u_hat.reshape(B, -1), u.reshape(B, -1)
    nh = np.sqrt(np.sum(uh * uh, axis=1))
    nt = np.sqrt(np.sum(ut * ut, axis=1))
    good = (nh > 1e-12) & (nt > 1e-12)
    nh_s, nt_s = np.where(good, nh, 1.0), np.where(good, nt, 1.0)
    cos = np.sum(uh * ut, axis=1) / (nh_s * nt_s)
    count = max(int(good.sum()), 1)
    value = np.sum(np.where(good, 1.0 - cos, 0.0)) / count
    dcos = ut / (nh_s * nt_s)[:, None] - cos[:, None] * uh / (nh_s * nh_s)[:, None]
    g = np.where(good[:, None], -dcos / count, 0.0).reshape(mean.shape)
    return value, alpha[..., None] * g


# --- batches, gradients, training ---------------------------------------------


@dataclass(frozen=True)
class Batch:
    x0: np.ndarray  # (B, n, dim)
    eps: np.ndarray
    levels: np.ndarray  # (B, n)
    positions: np.ndarray
    conditioned: np.ndarray | None = None


def loss_and_grad(net: DenoiserNet, batch: Batch, paradigm: Paradigm, spec: LossSpec, detached_x0=None):
    x_t = forward_diffuse(paradigm, batch.x0, batch.eps, batch.levels)
    out = net.forward(x_t, batch.levels, batch.positions, paradigm)
    loss, g = compute_loss(
        out, batch.x0, batch.eps, paradigm, batch.levels, spec, net.config.kind, batch.conditioned, detached_x0
    )
    return loss, net.backward(out, g), out


def _loss_only(net, batch, paradigm, spec, detached_x0):
    x_t = forward_diffuse(paradigm, batch.x0, batch.eps, batch.levels)
    out = net.forward(x_t, batch.levels, batch.positions, paradigm)
    return compute_loss(
        out, batch.x0, batch.eps, paradigm, batch.levels, spec, net.config.kind, batch.conditioned, detached_x0
    )[0]


def gradient_check(
    net: DenoiserNet, batch: Batch, spec: LossSpec, paradigm: Paradigm,
    rng: np.random.Generator | None = None, n_params: int = 200, h: float = 1e-5,
) -> float:
    """Max relative error between analytic and finite-difference parameter gradients.

    Differences use a fourth-order central stencil with step h, evaluated in
    extended precision. The vlb term sees the base x0 estimate in both, which
    is what its stop-gradient means.
    """
    if batch.x0.shape[0] == 0:
        raise NetError("gradient check needs a nonempty batch")
    rng = np.random.default_rng(0) if rng is None else rng
    _, grads, out = loss_and_grad(net, batch, paradigm, spec)
    g = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    detached = out.prediction.x0_mean.astype(np.longdouble)
    theta = net.flat().astype(np.longdouble)
    pick = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    ld = Batch(
        np.asarray(batch.x0, np.longdouble), np.asarray(batch.eps, np.longdouble),
        batch.levels, batch.positions, batch.conditioned,
    )
    worst = 0.0
    for idx in pick:
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            th = theta.copy()
            th[idx] += step
            vals.append(_loss_only(net.with_flat(th), ld, paradigm, spec, detached))
        fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        ga = g[idx]
        err = abs(float(ga) - float(fd)) / max(abs(float(ga)), abs(float(fd)), 1e-8)
        worst = max(worst, err)
    return worst


def snap_to_grid(paradigm: Paradigm, levels) -> np.ndarray:
    """Map continuous training levels onto DDPM steps 1..d; flows pass through."""
    levels = np.asarray(levels, dtype=np.float64)
    if not paradigm.is_discrete:
        return levels
    d = paradigm.d_steps
    return np.clip(np.ceil(levels * d), 1, d) / d


@dataclass(frozen=True)
class Optimizer:
    kind: str = "adam"
    lr: float = 1e-3
    steps: int = 1000
    batch: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise NetError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0 or self.steps < 0 or self.batch < 1:
            raise NetError("optimizer needs lr >= 0, steps >= 0, batch >= 1")


def draw_batch(task, paradigm: Paradigm, tsampler: TSampler, size: int, rng: np.random.Generator) -> Batch:
    x0 = gmm_sample(task.mixture, rng, size).reshape(size, task.n, task.dim)
    levels = snap_to_grid(paradigm, sample_training_levels(tsampler, task.n, rng, batch=size))
    eps = rng.standard_normal(x0.shape)
    return Batch(x0, eps, levels, np.asarray(task.positions, dtype=np.float64))


def train(
    net: DenoiserNet, task, tsampler: TSampler, optimizer: Optimizer, paradigm: Paradigm, spec: LossSpec,
    rng: np.random.Generator,
) -> tuple[DenoiserNet, np.ndarray]:
    """Optimise a copy of ``net``; returns it with the per-step loss trace."""
    if task.mixture is None:
        raise NetError("training needs a task with a sampling distribution")
    spec.check(paradigm, net.config)
    net = net.copy()
    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    trace = np.empty(optimizer.steps)
    b1, b2 = optimizer.beta1, optimizer.beta2
    for step in range(optimizer.steps):
        batch = draw_batch(task, paradigm, tsampler, optimizer.batch, rng)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, _ = loss_and_grad(net, batch, paradigm, spec)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(gW)) and np.all(np.isfinite(gb)) for gW, gb in grads):
            raise TrainingError(f"non-finite loss or gradient at step {step} (loss={loss})")
        trace[step] = loss
        if optimizer.kind == "sgd":
            net.params = [(W - optimizer.lr * gW, b - optimizer.lr * gb) for (W, b), (gW, gb) in zip(net.params, grads)]
            continue
        k = step + 1
        new = []
        for j, ((W, b), (gW, gb)) in enumerate(zip(net.params, grads)):
            pair = []
            for p, g, mi, vi in ((W, gW, m[j][0], v[j][0]), (b, gb, m[j][1], v[j][1])):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                mhat = mi / (1 - b1**k)
                vhat = vi / (1 - b2**k)
                pair.append(p - optimizer.lr * mhat / (np.sqrt(vhat) + optimizer.eps))
            new.append(tuple(pair))
        net.params = new
    return net, trace


# --- serialization ------------------------------------------------------------


def save_net(net: DenoiserNet, path) -> None:
    """Header: magic, then little-endian int32 words, then float64 parameters in layer order.

    Words: count of following words, dim, emb_dim, pos_dim, len(trunk), trunk
    widths, len(head), head widths, log_var flag, var_interp flag, prediction
    kind code, activation code.
    """
    cfg = net.config
    words = [cfg.dim, cfg.emb_dim, cfg.pos_dim, len(cfg.trunk), *cfg.trunk, len(cfg.head), *cfg.head,
             int(cfg.log_var), int(cfg.var_interp), _KIND_CODES[cfg.kind], _ACTIVATIONS[cfg.activation]]
    header = MAGIC + struct.pack(f"<{len(words) + 1}i", len(words), *words)
    Path(path).write_bytes(header + net.flat().astype("<f8").tobytes())


def load_net(path) -> DenoiserNet:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise NetError(f"{path}: not a net checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<i", data, pos)
        words = list(struct.unpack_from(f"<{count}i", data, pos + 4))
    except struct.error:
        raise NetError(f"{path}: truncated header") from None
    pos += 4 * (count + 1)
    dim, emb, pdim, nt = words[:4]
    trunk = words[4 : 4 + nt]
    nh = words[4 + nt]
    head = words[5 + nt : 5 + nt + nh]
    lv, vi, kc, ac = words[5 + nt + nh : 9 + nt + nh]
    kinds = {v: k for k, v in _KIND_CODES.items()}
    acts = {v: k for k, v in _ACTIVATIONS.items()}
    cfg = NetConfig(dim, tuple(trunk), tuple(head), emb, pdim, bool(lv), bool(vi), kinds[kc], acts[ac])
    theta = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    expected = sum(i * o + o for i, o in cfg.layer_shapes())
    if theta.size != expected:
        raise NetError(f"{path}: expected {expected} parameters, found {theta.size}")
    net = DenoiserNet.zeros(cfg).with_flat(theta)
    return DenoiserNet(cfg, net.params)
