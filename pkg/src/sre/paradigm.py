"""Denoising paradigms: mixing coefficients, forward noising, parameterization algebra.

Every paradigm writes the noisy variable as ``x_t = a_t * x0 + b_t * eps`` with
``t`` in [0, 1] (0 clean, 1 pure noise). Discrete DDPM maps step index ``i`` of
``d`` to ``t = i / d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import NamedTuple

import numpy as np

GRID_TOL = 1e-9
SINGULAR_TOL = 1e-12


class ParadigmError(ValueError):
    pass


class ConversionError(ParadigmError):
    pass


class PredictionKind(str, Enum):
    EPSILON = "epsilon"
    X0 = "x0"
    V = "v"
    U = "u"


class Coeffs(NamedTuple):
    a: np.ndarray | float
    b: np.ndarray | float
    da: np.ndarray | float
    db: np.ndarray | float


@dataclass(frozen=True)
class Paradigm:
    kind: str
    d_steps: int = 1000
    beta_schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cosine_offset: float = 0.008

    def __post_init__(self):
        if self.kind not in ("ddpm-discrete", "cosine-flow", "rectified-flow"):
            raise ParadigmError(f"unknown paradigm kind {self.kind!r}")
        if self.kind == "ddpm-discrete":
            if self.d_steps < 1:
                raise ParadigmError("ddpm-discrete needs d_steps >= 1")
            if self.beta_schedule not in ("linear", "cosine"):
                raise ParadigmError(f"unknown beta schedule {self.beta_schedule!r}")

    @property
    def is_discrete(self) -> bool:
        return self.kind == "ddpm-discrete"

    @property
    def has_velocity(self) -> bool:
        return not self.is_discrete

    @property
    def variance_preserving(self) -> bool:
        return self.kind != "rectified-flow"

    @cached_property
    def betas(self) -> np.ndarray:
        """beta_1..beta_d of the discrete chain (index 0 holds beta_1)."""
        if not self.is_discrete:
            raise ParadigmError(f"{self.kind} has no discrete beta schedule")
        d = self.d_steps
        if self.beta_schedule == "linear":
            if d == 1:
                return np.array([self.beta_end])
            return np.linspace(self.beta_start, self.beta_end, d, dtype=np.float64)
        s = self.cosine_offset
        steps = np.arange(d + 1, dtype=np.float64) / d
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        return np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products with a leading 1 for step 0, length d + 1."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def grid_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        scaled = t * self.d_steps
        idx = np.rint(scaled)
        if np.any(np.abs(scaled - idx) > GRID_TOL * self.d_steps):
            raise ParadigmError(
                f"level off the ddpm-discrete grid (d={self.d_steps}): {t}"
            )
        return idx.astype(np.int64)

    def posterior_variances(self) -> tuple[np.ndarray, np.ndarray]:
        """(log beta_i, clipped log beta-tilde_i) for i = 1..d at index i - 1.

        beta-tilde_1 is zero, so its log is replaced by the value at i = 2.
        """
        betas = self.betas
        abar = self.alpha_bars
        tilde = betas * (1.0 - abar[:-1]) / (1.0 - abar[1:])
        log_tilde = np.empty_like(tilde)
        log_tilde[1:] = np.log(tilde[1:])
        log_tilde[0] = log_tilde[1] if tilde.size > 1 else np.log(betas[0])
        return np.log(betas), log_tilde


def coefficients(paradigm: Paradigm, t) -> Coeffs:
    """Mixing coefficients (a, b, da/dt, db/dt) at level(s) t.

    Works elementwise on arrays. The discrete paradigm has no time derivative;
    its da and db are NaN.
    """
    scalar = np.ndim(t) == 0
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ParadigmError(f"level outside [0, 1]: {t}")
    if paradigm.kind == "rectified-flow":
        a, b = 1.0 - t, t.copy()
        da, db = np.full_like(t, -1.0), np.ones_like(t)
    elif paradigm.kind == "cosine-flow":
        h = 0.5 * np.pi
        a, b = np.cos(h * t), np.sin(h * t)
        # exact endpoints; cos(pi/2) is 6e-17 in floating point
        a = np.where(t == 1.0, 0.0, a)
        b = np.where(t == 1.0, 1.0, b)
        da, db = -h * b, h * a
    else:
        abar = paradigm.alpha_bars[paradigm.grid_index(t)]
        a, b = np.sqrt(abar), np.sqrt(1.0 - abar)
        da = db = np.full_like(t, np.nan)
    if scalar:
        return Coeffs(float(a), float(b), float(da), float(db))
    return Coeffs(a, b, da, db)


def forward_diffuse(paradigm: Paradigm, x0, eps, levels) -> np.ndarray:
    """Noise each variable row to its own level: a_t * x0 + b_t * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParadigmError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    levels = np.asarray(levels, dtype=np.float64)
    if levels.shape != x0.shape[:-1]:
        raise ParadigmError(f"shape mismatch: levels {levels.shape} vs x0 {x0.shape}")
    c = coefficients(paradigm, levels)
    return np.asarray(c.a)[..., None] * x0 + np.asarray(c.b)[..., None] * eps


def _split(pred, kind, x_t, c):
    """Recover (x0, eps) from a prediction of ``kind``."""
    a, b, da, db = (np.asarray(v)[..., None] for v in c)
    if kind == PredictionKind.X0:
        if np.any(np.abs(b) < SINGULAR_TOL):
            raise ConversionError("cannot recover epsilon from x0 at level 0 (b = 0)")
        return pred, (x_t - a * pred) / b
    if kind == PredictionKind.EPSILON:
        if np.any(np.abs(a) < SINGULAR_TOL):
            raise ConversionError("cannot recover x0 from epsilon at level 1 (a = 0)")
        return (x_t - b * pred) / a, pred
    if kind == PredictionKind.V:
        norm = a * a + b * b
        return (a * x_t - b * pred) / norm, (b * x_t + a * pred) / norm
    det = a * db - b * da
    return (db * x_t - b * pred) / det, (a * pred - da * x_t) / det


def convert_prediction(paradigm: Paradigm, pred, src, dst, x_t, levels) -> np.ndarray:
    """Convert a denoiser output between the epsilon, x0, v and u parameterizations.

    Uses x_t = a x0 + b eps, v = a eps - b x0 and u = da x0 + db eps at fixed
    (x_t, t). Shapes: pred and x_t are (..., n, dim), levels (..., n).
    """
    src, dst = PredictionKind(src), PredictionKind(dst)
    pred = np.asarray(pred, dtype=np.float64)
    if src == dst:
        return pred
    if not paradigm.has_velocity and PredictionKind.U in (src, dst):
        raise ConversionError(f"{paradigm.kind} defines no velocity (u) parameterization")
    x_t = np.asarray(x_t, dtype=np.float64)
    c = coefficients(paradigm, np.asarray(levels, dtype=np.float64))
    x0, eps = _split(pred, src, x_t, c)
    a, b, da, db = (np.asarray(v)[..., None] for v in c)
    if dst == PredictionKind.X0:
        return x0
    if dst == PredictionKind.EPSILON:
        return eps
    if dst == PredictionKind.V:
        return a * eps - b * x0
    return da * x0 + db * eps


def x0_jacobian(paradigm: Paradigm, kind, levels) -> np.ndarray:
    """d x0 / d pred for a prediction of ``kind``; the conversion is affine and diagonal."""
    kind = PredictionKind(kind)
    levels = np.asarray(levels, dtype=np.float64)
    if kind == PredictionKind.X0:
        return np.ones_like(levels)
    a, b, da, db = (np.asarray(v) for v in coefficients(paradigm, levels))
    if kind == PredictionKind.EPSILON:
        return -b / a
    if kind == PredictionKind.V:
        return -b / (a * a + b * b)
    return -b / (a * db - b * da)
