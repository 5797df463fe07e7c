"""Variable-set state and dependency graphs."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


class StateError(ValueError):
    pass


class GraphError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ReasoningState:
    """Values, per-variable noise levels and the conditioning mask of n variables.

    Level 0 is clean data, level 1 is pure noise. Conditioned variables are
    always clean and never change during inference.
    """

    values: np.ndarray
    levels: np.ndarray
    conditioned: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def replace(self, values=None, levels=None) -> "ReasoningState":
        return make_state(
            self.values if values is None else values,
            self.levels if levels is None else levels,
            self.conditioned,
        )


def make_state(values, levels, conditioned=None) -> ReasoningState:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise StateError(f"values must be an n x dim matrix, got shape {values.shape}")
    n = values.shape[0]
    levels = np.asarray(levels, dtype=np.float64).reshape(-1)
    if conditioned is None:
        conditioned = np.zeros(n, dtype=bool)
    conditioned = np.asarray(conditioned, dtype=bool).reshape(-1)
    if levels.shape[0] != n or conditioned.shape[0] != n:
        raise StateError(
            f"dimension mismatch: {n} variables, {levels.shape[0]} levels, "
            f"{conditioned.shape[0]} conditioning flags"
        )
    if not np.all(np.isfinite(values)):
        raise StateError("values must be finite")
    bad = np.flatnonzero(~((levels >= 0.0) & (levels <= 1.0)))
    if bad.size:
        raise StateError(f"level out of range at variable {bad[0]}: {levels[bad[0]]}")
    bad = np.flatnonzero(conditioned & (levels != 0.0))
    if bad.size:
        raise StateError(f"conditioned variable must be clean (variable {bad[0]})")
    return ReasoningState(_frozen(values), _frozen(levels), _frozen(conditioned))


@dataclass(frozen=True)
class DependencyGraph:
    n: int
    edges: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(p), int(c)) for p, c in self.edges))

    def parents(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for p, c in self.edges:
            out[c].append(p)
        return out


def validate_graph(graph: DependencyGraph) -> list[int]:
    """Topological order of the graph; ties go to the smallest index.

    Raises GraphError on out-of-range indices, self-loops or cycles. A cycle
    error names one edge lying on the cycle.
    """
    n = graph.n
    children: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for p, c in graph.edges:
        if not (0 <= p < n and 0 <= c < n):
            raise GraphError(f"edge ({p}, {c}) has an index out of range for n={n}")
        if p == c:
            raise GraphError(f"cycle detected: self-loop on node {p}")
        children[p].append(c)
        indeg[c] += 1

    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        node = heapq.heappop(heap)
        order.append(node)
        for c in children[node]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) == n:
        return order

    # every remaining node has a remaining parent, so walking parents must loop
    remaining = {i for i in range(n) if indeg[i] > 0}
    parents = {c: [] for c in remaining}
    for p, c in graph.edges:
        if p in remaining and c in remaining:
            parents[c].append(p)
    node = min(remaining)
    seen: dict[int, int] = {}
    while node not in seen:
        seen[node] = len(seen)
        node = parents[node][0]
    parent = parents[node][0]
    raise GraphError(f"cycle detected through edge ({parent}, {node})")
