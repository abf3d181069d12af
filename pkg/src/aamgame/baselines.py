"""Non-learned comparison policies: centralized linear assignment and random."""

from __future__ import annotations

import math
from typing import Optional, TextIO

import numpy as np

from .sim import PayloadRequest, WorldState, net_reward


def lap_solve(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost matching of a rectangular cost matrix.

    ``+inf`` entries are forbidden pairs and never matched.  The matching
    has maximum cardinality over the allowed pairs and, among those, minimum
    total cost.  Returns sorted ``(row, col)`` pairs.

    Successive shortest augmenting paths with Bellman-Ford on the residual
    graph: after ``k`` augmentations the flow is a min-cost ``k``-matching,
    and the search stops when no augmenting path remains.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n_rows, n_cols = cost.shape
    if np.isnan(cost).any() or np.isneginf(cost).any():
        raise ValueError("cost may only contain finite values and +inf")
    allowed = [[j for j in range(n_cols) if math.isfinite(cost[i, j])] for i in range(n_rows)]
    row_match = [-1] * n_rows
    col_match = [-1] * n_cols

    while True:
        # distances over rows/cols reachable from free rows in the residual graph
        dist_row = [0.0 if row_match[i] < 0 else math.inf for i in range(n_rows)]
        dist_col = [math.inf] * n_cols
        parent_col = [-1] * n_cols
        for _ in range(n_rows + n_cols + 1):
            changed = False
            for i in range(n_rows):
                if dist_row[i] == math.inf:
                    continue
                for j in allowed[i]:
                    if row_match[i] == j:
                        continue
                    d = dist_row[i] + cost[i, j]
                    if d < dist_col[j] - 1e-12:
                        dist_col[j] = d
                        parent_col[j] = i
                        changed = True
            for j in range(n_cols):
                i = col_match[j]
                if i >= 0 and dist_col[j] < math.inf:
                    d = dist_col[j] - cost[i, j]
                    if d < dist_row[i] - 1e-12:
                        dist_row[i] = d
                        changed = True
            if not changed:
                break
        free_cols = [j for j in range(n_cols) if col_match[j] < 0 and dist_col[j] < math.inf]
        if not free_cols:
            break
        j = min(free_cols, key=lambda c: (dist_col[c], c))
        while j >= 0:
            i = parent_col[j]
            prev = row_match[i]
            row_match[i] = j
            col_match[j] = i
            j = prev
    return [(i, row_match[i]) for i in range(n_rows) if row_match[i] >= 0]


def assignment_cost(cost: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    return float(sum(cost[i, j] for i, j in pairs))


def odla_cost_matrix(world: WorldState, vehicle_ids: list[int]) -> tuple[np.ndarray, list[PayloadRequest]]:
    """Rows: vehicles; columns: every queued request; entries: negative net reward."""
    requests = [p for d in world.depots for p in d.queue]
    cost = np.full((len(vehicle_ids), len(requests)), math.inf)
    for r, vid in enumerate(vehicle_ids):
        v = world.vehicles[vid]
        for c, p in enumerate(requests):
            if p.capacity <= v.capacity:
                cost[r, c] = -net_reward(v.position, world.depots[p.origin].position, p)
    return cost, requests


class OdlaPolicy:
    """Fully observed central planner: one linear assignment per event.

    Matched vehicles head to their request's depot; unmatched vehicles stay
    idle and are re-planned at the next availability or arrival event.
    """

    def __init__(self, audit: Optional[TextIO] = None) -> None:
        self.audit = audit

    def act(self, world: WorldState, vehicle_ids: list[int], rng: np.random.Generator) -> list[Optional[int]]:
        cost, requests = odla_cost_matrix(world, vehicle_ids)
        pairs = lap_solve(cost)
        choice: list[Optional[int]] = [None] * len(vehicle_ids)
        for r, c in pairs:
            choice[r] = requests[c].origin
        if self.audit is not None:
            self._dump(world, vehicle_ids, cost, requests, pairs)
        return choice

    def _dump(self, world, vehicle_ids, cost, requests, pairs) -> None:
        out = self.audit
        out.write(f"# tick {world.clock}\tvehicles {','.join(map(str, vehicle_ids))}\t"
                  f"requests {','.join(str(p.id) for p in requests)}\n")
        for row in cost:
            out.write("\t".join("inf" if not math.isfinite(x) else f"{x:.6f}" for x in row) + "\n")
        for r, c in pairs:
            out.write(f"match\t{vehicle_ids[r]}\t{requests[c].id}\t{requests[c].origin}\t{cost[r, c]:.6f}\n")


def random_choice(world: WorldState, rng: np.random.Generator) -> int:
    return int(rng.integers(len(world.depots)))


class RandomPolicy:
    """Uniform over all depots."""

    def act(self, world: WorldState, vehicle_ids: list[int], rng: np.random.Generator) -> list[int]:
        return [random_choice(world, rng) for _ in vehicle_ids]
