"""Inference schedules: the per-variable level matrix and adaptive ordering.

A schedule stores ``d + 1`` columns: column 0 holds the starting levels and
column k the target levels after step k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .variables import DependencyGraph, ReasoningState, validate_graph

KINDS = ("parallel", "sequential", "next-k", "rolling-window", "adaptive-certainty")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str
    d: int
    order: Sequence[int] | str | None = None  # explicit list, "random", "graph" or None (index order)
    seed: int = 0
    overlap: float = 0.0
    k: int = 1
    window: int = 1
    stride: int = 1
    graph: DependencyGraph | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.d < 1:
            raise ScheduleError("schedule needs d >= 1 steps")
        if not 0.0 <= self.overlap <= 1.0:
            raise ScheduleError("overlap must lie in [0, 1]")
        if self.k < 1:
            raise ScheduleError("k must be at least 1")
        if self.window < 1 or not 1 <= self.stride <= self.window:
            raise ScheduleError("rolling window needs 1 <= stride <= window")
        if self.window % self.stride:
            raise ScheduleError("rolling window size must be a multiple of the stride")
        if isinstance(self.order, str) and self.order not in ("random", "graph"):
            raise ScheduleError(f"unknown order {self.order!r}")


@dataclass(frozen=True, eq=False)
class ScheduleMatrix:
    levels: np.ndarray
    conditioned: np.ndarray = field(default=None)
    adaptive: bool = False

    def __post_init__(self):
        lv = np.array(self.levels, dtype=np.float64)
        cond = np.zeros(lv.shape[0], bool) if self.conditioned is None else np.array(self.conditioned, bool)
        lv.setflags(write=False)
        cond.setflags(write=False)
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "conditioned", cond)

    @property
    def n(self) -> int:
        return self.levels.shape[0]

    @property
    def d(self) -> int:
        return self.levels.shape[1] - 1


@dataclass(frozen=True)
class Violation:
    row: int
    column: int
    reason: str


def _resolve_order(spec: ScheduleSpec, n: int, active: np.ndarray) -> list[int]:
    if spec.order is None:
        order = list(range(n))
    elif isinstance(spec.order, str) and spec.order == "random":
        order = [int(i) for i in np.random.default_rng(spec.seed).permutation(n)]
    elif isinstance(spec.order, str):
        if spec.graph is None:
            raise ScheduleError("graph order requested without a dependency graph")
        if spec.graph.n != n:
            raise ScheduleError(f"graph has {spec.graph.n} nodes, schedule has {n} variables")
        order = validate_graph(spec.graph)
    else:
        order = [int(i) for i in spec.order]
        if sorted(order) != list(range(n)):
            raise ScheduleError(f"explicit order must be a permutation of 0..{n - 1}")
    return [i for i in order if active[i]]


def _grid_column(x: float, d: int) -> int:
    return min(d, int(math.floor(x * d + 0.5 + 1e-9)))


def window_ramp(start: float, width: float, d: int) -> np.ndarray:
    """Linear 1 -> 0 ramp over the progress window [start, start + width].

    Window ends are snapped to the nearest grid column so that abutting
    windows share a column exactly; the ramp is linear between them.
    """
    c0 = _grid_column(start, d)
    c1 = max(_grid_column(start + width, d), c0 + 1)
    cols = np.arange(d + 1, dtype=np.float64)
    return np.clip((c1 - cols) / (c1 - c0), 0.0, 1.0)


def _grouped_ramps(groups: list[list[int]], overlap: float, n: int, d: int) -> np.ndarray:
    m = len(groups)
    width = 1.0 / (m - overlap * (m - 1))
    if width * d < 1.0 - 1e-9:
        raise ScheduleError(
            f"d={d} steps cannot separate {m} sequential windows; need d >= {math.ceil(m - overlap * (m - 1) - 1e-9)}"
        )
    out = np.zeros((n, d + 1))
    for j, group in enumerate(groups):
        out[group] = window_ramp(j * width * (1.0 - overlap), width, d)
    return out


def build_schedule(spec: ScheduleSpec, n: int, conditioned=None) -> ScheduleMatrix:
    """Level matrix for a schedule spec over n variables (conditioned rows stay 0)."""
    cond = np.zeros(n, bool) if conditioned is None else np.asarray(conditioned, bool)
    if cond.shape != (n,):
        raise ScheduleError(f"conditioning mask has shape {cond.shape}, expected ({n},)")
    active = ~cond
    d = spec.d
    if spec.kind == "adaptive-certainty":
        if spec.k > max(int(active.sum()), 1):
            raise ScheduleError("k exceeds the number of active variables")
        return ScheduleMatrix(active.astype(np.float64)[:, None], cond, adaptive=True)
    if not active.any():
        return ScheduleMatrix(np.zeros((n, d + 1)), cond)
    if spec.kind == "parallel":
        levels = np.zeros((n, d + 1))
        levels[active] = window_ramp(0.0, 1.0, d)
        return ScheduleMatrix(levels, cond)

    order = _resolve_order(spec, n, active)
    if spec.kind == "sequential":
        groups, overlap = [[i] for i in order], spec.overlap
    elif spec.kind == "next-k":
        if spec.k > len(order):
            raise ScheduleError("k exceeds the number of active variables")
        groups, overlap = [order[i : i + spec.k] for i in range(0, len(order), spec.k)], 0.0
    else:
        # groups of `stride` start every stride/window of a ramp, so `window` variables are in flight
        groups = [order[i : i + spec.stride] for i in range(0, len(order), spec.stride)]
        overlap = 1.0 - spec.stride / spec.window
    return ScheduleMatrix(_grouped_ramps(groups, overlap, n, d), cond)


def validate_schedule(schedule: ScheduleMatrix) -> Violation | None:
    """First violated invariant as (row, column, reason), or None if the matrix is valid."""
    lv = schedule.levels
    for i in range(schedule.n):
        row = lv[i]
        for k in range(row.size):
            if not 0.0 <= row[k] <= 1.0:
                return Violation(i, k, "level outside [0, 1]")
            if schedule.conditioned[i] and row[k] != 0.0:
                return Violation(i, k, "conditioned row must be zero")
            if k and row[k] > row[k - 1]:
                return Violation(i, k, "level increases")
        if not schedule.adaptive and row[-1] != 0.0:
            return Violation(i, row.size - 1, "variable does not end clean")
    return None


def adaptive_ramp_length(d: int, active: int, k: int) -> int:
    """Columns a newly selected group takes to descend, so the whole run costs about d steps."""
    return max(1, math.ceil(d / max(1, math.ceil(active / k))))


def select_batch(levels, uncertainties, conditioned, k: int, parents: list[list[int]] | None = None) -> np.ndarray:
    """Boolean (B, n) mask of up to k newly started variables per chain."""
    levels = np.atleast_2d(levels)
    unc = np.atleast_2d(np.asarray(uncertainties, dtype=np.float64))
    cand = (levels == 1.0) & ~np.asarray(conditioned, bool)
    if parents:
        for i, ps in enumerate(parents):
            if ps:
                cand[:, i] &= np.all(levels[:, ps] == 0.0, axis=1)
    score = np.where(cand, unc, np.inf)
    ranked = np.argsort(score, axis=1, kind="stable")[:, :k]
    pick = np.zeros_like(cand)
    rows = np.arange(levels.shape[0])[:, None]
    pick[rows, ranked] = True
    return pick & cand


def adaptive_select(state: ReasoningState, uncertainties, k: int, graph: DependencyGraph | None = None) -> set[int]:
    """Up to k unstarted variables with the smallest uncertainty, skipping blocked children.

    A variable is blocked while any of its graph parents is not yet clean.
    Ties go to the smaller index.
    """
    if k < 1:
        raise ScheduleError("k must be at least 1")
    unc = np.asarray(uncertainties, dtype=np.float64)
    if not np.all(np.isfinite(unc)):
        raise ScheduleError("uncertainties must be finite")
    parents = graph.parents() if graph is not None else None
    mask = select_batch(state.levels, unc, state.conditioned, k, parents)[0]
    return {int(i) for i in np.flatnonzero(mask)}
