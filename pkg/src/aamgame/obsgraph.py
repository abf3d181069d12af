"""Local observations as typed graphs.

Two graphs are built per decision: the interaction graph over observed
vehicles, all depots and the payloads queued at observed depots, and the
fixed decoder graph over depots, a graph-embedding node and a value node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sim import PayloadRequest, WorldState

VEHICLE = "vehicle"
DEPOT = "depot"
PAYLOAD = "payload"
GRAPH = "graph"
VALUE = "value"
META_TYPES = (VEHICLE, DEPOT, PAYLOAD, GRAPH, VALUE)

# relation -> (source type, target type)
HIG_RELATIONS = {
    "has": (PAYLOAD, DEPOT),
    "visits": (VEHICLE, DEPOT),
    "depends": (PAYLOAD, PAYLOAD),
    "assigned_to": (PAYLOAD, VEHICLE),
    "communicates": (VEHICLE, VEHICLE),
}
HDG_RELATIONS = {
    "g_contributes_val": (GRAPH, VALUE),
    "d_contributes_g": (DEPOT, GRAPH),
    "d_contributes_val": (DEPOT, VALUE),
    "d_near_d": (DEPOT, DEPOT),
}
RELATIONS = {**HIG_RELATIONS, **HDG_RELATIONS}

HIG_WIDTHS = {VEHICLE: 5, DEPOT: 4, PAYLOAD: 4}


@dataclass
class HeteroGraph:
    """Typed nodes and edges with one feature table per node type."""

    num_nodes: dict[str, int]
    edges: dict[str, tuple[np.ndarray, np.ndarray]]
    features: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for rel, (src, dst) in self.edges.items():
            if rel not in RELATIONS:
                raise ValueError(f"unknown relation {rel!r}")
            s_type, d_type = RELATIONS[rel]
            if len(src) != len(dst):
                raise ValueError(f"{rel}: source/target length mismatch")
            if len(src) and (src.min() < 0 or src.max() >= self.num_nodes.get(s_type, 0)):
                raise ValueError(f"{rel}: dangling source index")
            if len(dst) and (dst.min() < 0 or dst.max() >= self.num_nodes.get(d_type, 0)):
                raise ValueError(f"{rel}: dangling target index")
        for t, x in self.features.items():
            if x.shape[0] != self.num_nodes[t]:
                raise ValueError(f"{t}: {x.shape[0]} feature rows for {self.num_nodes[t]} nodes")

    def edge_counts(self) -> dict[str, int]:
        return {rel: int(len(src)) for rel, (src, _) in self.edges.items()}

    def to_json(self) -> str:
        payload = {
            "num_nodes": dict(sorted(self.num_nodes.items())),
            "edges": {
                rel: [[int(s), int(d)] for s, d in zip(*self.edges[rel])] for rel in sorted(self.edges)
            },
            "features": {t: self.features[t].tolist() for t in sorted(self.features)},
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HeteroGraph":
        data = json.loads(text)
        edges = {}
        for rel, pairs in data["edges"].items():
            arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            edges[rel] = (arr[:, 0].copy(), arr[:, 1].copy())
        features = {}
        for t, rows in data["features"].items():
            width = HIG_WIDTHS.get(t, 0)
            features[t] = np.asarray(rows, dtype=float).reshape(len(rows), -1 if rows else width)
        return cls(num_nodes=data["num_nodes"], edges=edges, features=features)


@dataclass
class Neighborhood:
    ego: int
    vehicles: list[int]
    depots: list[int]
    payloads: list[PayloadRequest]


def observe(world: WorldState, vehicle_id: int, k_v: int, k_d: int) -> Neighborhood:
    """k-nearest vehicles (ego first) and depots; ties go to the lower id."""
    ego = world.vehicles[vehicle_id]
    pos = ego.position

    def dist(p):
        return float(np.hypot(p[0] - pos[0], p[1] - pos[1]))

    others = sorted((v for v in world.vehicles if v.id != vehicle_id), key=lambda v: (dist(v.position), v.id))
    vehicles = [vehicle_id] + [v.id for v in others[: max(k_v - 1, 0)]]
    ranked = sorted(world.depots, key=lambda d: (dist(d.position), d.id))
    depots = [d.id for d in ranked[: min(k_d, len(world.depots))]]
    payloads = [p for d in depots for p in world.depots[d].queue]
    return Neighborhood(ego=vehicle_id, vehicles=vehicles, depots=depots, payloads=payloads)


def feature_vectors(world: WorldState, nb: Neighborhood) -> dict[str, np.ndarray]:
    """Per-type feature rows; positions scaled to [0, 1) by the grid size."""
    g = float(world.grid_size)
    vehicle_rows = []
    for vid in nb.vehicles:
        v = world.vehicles[vid]
        prev = world.node_position(v.prev_stop) / g
        nxt = world.node_position(v.next_stop) / g
        vehicle_rows.append([prev[0], prev[1], nxt[0], nxt[1], float(v.capacity)])
    depot_rows = [
        [d.position[0] / g, d.position[1] / g, d.arrival_rate, d.expected_size] for d in world.depots
    ]
    payload_rows = []
    for p in nb.payloads:
        dest = world.node_position(p.destination) / g
        payload_rows.append([p.payoff, dest[0], dest[1], float(p.capacity)])
    return {
        VEHICLE: np.asarray(vehicle_rows, dtype=float).reshape(-1, 5),
        DEPOT: np.asarray(depot_rows, dtype=float).reshape(-1, 4),
        PAYLOAD: np.asarray(payload_rows, dtype=float).reshape(-1, 4),
    }


def _pairs(pairs: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def build_hig(
    nb: Neighborhood,
    num_depots: int,
    vehicle_caps: list[int],
    features: Optional[dict[str, np.ndarray]] = None,
) -> HeteroGraph:
    """Interaction graph of one vehicle's neighborhood.

    ``vehicle_caps`` is aligned with ``nb.vehicles``.  Depot node ``i`` is
    depot id ``i``; every observed vehicle visits every depot, observed or
    not.
    """
    observed = set(nb.depots)
    for p in nb.payloads:
        if p.origin not in observed:
            raise ValueError(f"payload {p.id} sits at unobserved depot {p.origin}")
    nv, npay = len(nb.vehicles), len(nb.payloads)
    visits = [(i, d) for i in range(nv) for d in range(num_depots)]
    communicates = [(i, j) for i in range(nv) for j in range(nv)]
    has = [(k, p.origin) for k, p in enumerate(nb.payloads)]
    assigned = [
        (k, i) for k, p in enumerate(nb.payloads) for i in range(nv) if p.capacity <= vehicle_caps[i]
    ]
    depends = [(k, k) for k in range(npay)]
    edges = {
        "visits": _pairs(visits),
        "communicates": _pairs(communicates),
        "has": _pairs(has),
        "assigned_to": _pairs(assigned),
        "depends": _pairs(depends),
    }
    counts = {VEHICLE: nv, DEPOT: num_depots, PAYLOAD: npay}
    return HeteroGraph(num_nodes=counts, edges=edges, features=features or {})


def build_hdg(num_depots: int) -> HeteroGraph:
    if num_depots < 1:
        raise ValueError("decoder graph needs at least one depot")
    d = range(num_depots)
    edges = {
        "g_contributes_val": _pairs([(0, 0)]),
        "d_contributes_g": _pairs([(i, 0) for i in d]),
        "d_contributes_val": _pairs([(i, 0) for i in d]),
        "d_near_d": _pairs([(i, j) for i in d for j in d]),
    }
    return HeteroGraph(num_nodes={GRAPH: 1, DEPOT: num_depots, VALUE: 1}, edges=edges)


def rebalancing_mask(nb: Neighborhood, vehicle_capacity: int, num_depots: int) -> np.ndarray:
    """True marks an observed depot with nothing this vehicle can carry.

    Unobserved depots are never masked.  If every depot would be masked the
    mask is dropped so the policy stays defined.
    """
    suitable = {p.origin for p in nb.payloads if p.capacity <= vehicle_capacity}
    mask = np.zeros(num_depots, dtype=bool)
    for d in nb.depots:
        if d not in suitable:
            mask[d] = True
    if mask.all():
        mask[:] = False
    return mask


def observation(world: WorldState, vehicle_id: int, k_v: int, k_d: int) -> tuple[HeteroGraph, np.ndarray]:
    """HIG with features plus the rebalancing mask for one deciding vehicle."""
    nb = observe(world, vehicle_id, k_v, k_d)
    caps = [world.vehicles[v].capacity for v in nb.vehicles]
    hig = build_hig(nb, len(world.depots), caps, feature_vectors(world, nb))
    hig.meta["ego"] = vehicle_id
    mask = rebalancing_mask(nb, world.vehicles[vehicle_id].capacity, len(world.depots))
    return hig, mask
