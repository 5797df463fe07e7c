"""Training-time noise-level samplers over variable sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

KINDS = ("independent-uniform", "uniform-tbar", "shared-scalar")
REWEIGHTERS = ("uniform", "logit-normal")


@dataclass(frozen=True)
class TSampler:
    kind: str = "independent-uniform"
    reweighter: str = "uniform"
    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown t-sampler kind {self.kind!r}")
        if self.reweighter not in REWEIGHTERS:
            raise ValueError(f"unknown scalar reweighter {self.reweighter!r}")
        if self.reweighter == "logit-normal" and not self.s > 0:
            raise ValueError("logit-normal scale s must be positive")

    def scalar(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.reweighter == "uniform":
            return rng.random(shape)
        return expit(self.m + self.s * rng.standard_normal(shape))


def levels_given_tbar(tbar, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-variable levels i.i.d. uniform on [max(0, 2 tbar - 1), min(1, 2 tbar)].

    The interval is centred on tbar, so E[t_i | tbar] = tbar. ``tbar`` may be a
    scalar or an array of shape (B,), giving output (n,) or (B, n).
    """
    tbar = np.asarray(tbar, dtype=np.float64)
    lo = np.maximum(0.0, 2.0 * tbar - 1.0)[..., None]
    hi = np.minimum(1.0, 2.0 * tbar)[..., None]
    u = rng.random(tbar.shape + (n,))
    return np.clip(lo + (hi - lo) * u, 0.0, 1.0)


def sample_training_levels(sampler: TSampler, n: int, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """Levels for n variables, shape (n,) or (batch, n) when ``batch`` is given."""
    if n < 1:
        raise ValueError("need at least one variable")
    lead = () if batch is None else (batch,)
    if sampler.kind == "independent-uniform":
        out = sampler.scalar(rng, lead + (n,))
    elif sampler.kind == "shared-scalar":
        out = np.repeat(sampler.scalar(rng, lead + (1,)), n, axis=-1)
    else:
        out = levels_given_tbar(sampler.scalar(rng, lead), n, rng)
    return np.clip(out, 0.0, 1.0)
