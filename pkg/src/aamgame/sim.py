"""Discrete-time world model for the partially observable air-mobility game.

The world advances in integer ticks.  Vehicles only take decisions at
*active* ticks, i.e. ticks at which their availability indicator flipped.
A decision sends a vehicle to a depot; the depot hands out the first
payload in its FIFO queue that fits the vehicle (``assign_payload``), and
the vehicle travels at constant velocity to the depot and then to the
payload destination.  Rewards are credited when the trip completes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

GRID_SIZE = 24
QUEUE_CAPACITY = 5
ARRIVAL_INTERVAL = 50
MAX_DECISIONS = 50
SPEED = 1.0
CAPACITY_STD = 0.1

HIGH_RATES = (0.01, 0.05, 0.025)
LOW_RATES = (0.005, 0.025, 0.0125)

# payoff / reward coefficients
Q_QUAD = -0.0167
Q_LIN = 1.0
Q_FLAG = 2.0
Q_TRAVEL = 0.2
INVALID_PENALTY = -5.0

ONE_SHOT = "one-shot"
ON_DEMAND = "on-demand"

EVENT_KINDS = ("ARRIVE", "DECIDE", "PICKUP", "DROPOFF", "PENALTY", "DROP_REQUEST")

_AT_NODE_TOL = 1e-9


class ContractViolation(RuntimeError):
    """Raised when a world operation is called outside its precondition."""


def payoff(origin_pos: Sequence[float], dest_pos: Sequence[float], cap: int) -> float:
    """Concave trip payoff: quadratic in trip distance plus a per-class flag fall."""
    dist = float(np.hypot(dest_pos[0] - origin_pos[0], dest_pos[1] - origin_pos[1]))
    return Q_QUAD * dist * dist + Q_LIN * dist + Q_FLAG * cap


def payoff_vertex() -> float:
    """Trip distance at which ``payoff`` peaks."""
    return -Q_LIN / (2.0 * Q_QUAD)


@dataclass(frozen=True)
class PayloadRequest:
    id: int
    origin: int
    destination: int
    capacity: int
    payoff: float
    arrival_tick: int


def net_reward(
    vehicle_pos: Sequence[float],
    depot_pos: Sequence[float],
    assigned: Optional[PayloadRequest],
) -> float:
    """Reward a vehicle earns for choosing a depot.

    With a payload this is its payoff minus the deadhead cost to reach the
    depot.  Without one it is 0 when the vehicle already sits on the depot
    and the invalid-depot penalty otherwise.
    """
    gap = float(np.hypot(depot_pos[0] - vehicle_pos[0], depot_pos[1] - vehicle_pos[1]))
    if assigned is not None:
        return assigned.payoff - Q_TRAVEL * gap
    if gap <= _AT_NODE_TOL:
        return 0.0
    return INVALID_PENALTY


def assign_payload(vehicle_capacity: int, queue: list[PayloadRequest]) -> Optional[PayloadRequest]:
    """FIFO first-fit: pop the oldest request the vehicle can carry."""
    for i, request in enumerate(queue):
        if request.capacity <= vehicle_capacity:
            return queue.pop(i)
    return None


@dataclass
class Leg:
    target: int
    start_pos: np.ndarray
    start_tick: int
    arrive_tick: int


@dataclass
class VehicleState:
    id: int
    position: np.ndarray
    capacity: int
    prev_stop: int
    next_stop: int
    available: bool = True
    committed_payload: Optional[PayloadRequest] = None
    arrival_clock: Optional[int] = None
    # internal trip bookkeeping
    legs: list[Leg] = field(default_factory=list)
    chosen_depot: Optional[int] = None
    pending_reward: Optional[float] = None
    decisions: int = 0
    idle: bool = False

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)
        if self.capacity not in (1, 2, 3):
            raise ValueError(f"vehicle capacity must be 1, 2 or 3, got {self.capacity}")


@dataclass
class DepotState:
    id: int
    position: np.ndarray
    arrival_rate: float
    expected_size: float
    queue: list[PayloadRequest] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float)


@dataclass
class EpisodeConfig:
    mode: str = ONE_SHOT
    fleet: tuple[int, int, int] = (2, 2, 2)
    num_depots: int = 10
    num_clients: int = 12
    k_v: int = 5
    k_d: int = 5
    rates: str = "high"
    duration_ticks: Optional[int] = None
    max_decisions: int = MAX_DECISIONS
    arrival_interval: int = ARRIVAL_INTERVAL
    grid_size: int = GRID_SIZE
    seed: int = 0

    def __post_init__(self) -> None:
        self.fleet = tuple(int(n) for n in self.fleet)
        if self.mode not in (ONE_SHOT, ON_DEMAND):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.fleet) != 3 or min(self.fleet) < 0 or sum(self.fleet) <= 0:
            raise ValueError(f"fleet must be three non-negative counts with a positive sum, got {self.fleet}")
        if self.rates not in ("high", "low"):
            raise ValueError(f"rates must be 'high' or 'low', got {self.rates!r}")
        for name in ("num_depots", "k_v", "k_d", "max_decisions", "arrival_interval", "grid_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_clients < 0:
            raise ValueError("num_clients must be non-negative")
        if self.k_d > self.num_depots:
            raise ValueError("k_d cannot exceed the number of depots")
        if self.k_v > self.num_vehicles:
            raise ValueError("k_v cannot exceed the number of vehicles")
        if self.duration_ticks is None:
            self.duration_ticks = 100 if self.mode == ONE_SHOT else 400
        if self.duration_ticks < 0:
            raise ValueError("duration_ticks must be non-negative")

    @property
    def num_vehicles(self) -> int:
        return sum(self.fleet)

    @property
    def rate_set(self) -> tuple[float, ...]:
        return HIGH_RATES if self.rates == "high" else LOW_RATES

    def environment_key(self) -> dict:
        """Fields that define the environment (everything but the seed)."""
        return {
            "mode": self.mode,
            "fleet": list(self.fleet),
            "num_depots": self.num_depots,
            "num_clients": self.num_clients,
            "k_v": self.k_v,
            "k_d": self.k_d,
            "rates": self.rates,
            "duration_ticks": self.duration_ticks,
            "max_decisions": self.max_decisions,
            "arrival_interval": self.arrival_interval,
            "grid_size": self.grid_size,
        }


@dataclass
class Event:
    tick: int
    kind: str
    vehicle: Optional[int] = None
    depot: Optional[int] = None
    payload: Optional[PayloadRequest] = None
    reward: Optional[float] = None

    def format(self) -> str:
        def opt(x):
            return "-" if x is None else str(x)

        if self.payload is None:
            payload_cols = ["-"] * 4
        else:
            p = self.payload
            payload_cols = [str(p.id), str(p.destination), str(p.capacity), f"{p.payoff:.6f}"]
        reward = "-" if self.reward is None else f"{self.reward:.6f}"
        cols = [str(self.tick), self.kind, opt(self.vehicle), opt(self.depot), *payload_cols, reward]
        return "\t".join(cols)


EVENT_LOG_HEADER = "tick\tkind\tvehicle\tdepot\tpayload\tdestination\tcapacity\tpayoff\treward"


@dataclass
class WorldState:
    vehicles: list[VehicleState]
    depots: list[DepotState]
    clients: list[np.ndarray]
    rng: np.random.Generator
    mode: str = ONE_SHOT
    grid_size: int = GRID_SIZE
    duration_ticks: int = 100
    max_decisions: int = MAX_DECISIONS
    arrival_interval: int = ARRIVAL_INTERVAL
    clock: int = 0
    requests_arrived: int = 0
    requests_fulfilled: int = 0
    requests_dropped: int = 0
    vehicle_rewards: list[float] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    credits: list[tuple[int, float]] = field(default_factory=list)
    active: set[int] = field(default_factory=set)
    populated_this_tick: bool = False
    populate_calls: int = 0
    next_payload_id: int = 0

    def __post_init__(self) -> None:
        self.clients = [np.asarray(c, dtype=float) for c in self.clients]
        if not self.vehicle_rewards:
            self.vehicle_rewards = [0.0] * len(self.vehicles)
        for i, v in enumerate(self.vehicles):
            if v.id != i:
                raise ValueError("vehicle ids must be 0..n-1 in order")
        for i, d in enumerate(self.depots):
            if d.id != i:
                raise ValueError("depot ids must be 0..n-1 in order")

    # node ids: depots first, then clients
    @property
    def num_nodes(self) -> int:
        return len(self.depots) + len(self.clients)

    def node_position(self, node: int) -> np.ndarray:
        if node < len(self.depots):
            return self.depots[node].position
        return self.clients[node - len(self.depots)]

    def in_flight(self) -> int:
        return sum(1 for v in self.vehicles if v.committed_payload is not None)

    def queued(self) -> int:
        return sum(len(d.queue) for d in self.depots)

    @property
    def fleet_reward(self) -> float:
        return float(sum(self.vehicle_rewards))

    @property
    def done(self) -> bool:
        if self.clock >= self.duration_ticks:
            return True
        return self.mode == ONE_SHOT and self.queued() == 0 and self.in_flight() == 0

    def log(self, event: Event) -> None:
        self.events.append(event)

    def event_log(self) -> str:
        return "".join(e.format() + "\n" for e in self.events)


def _place_nodes(rng: np.random.Generator, count: int, grid: int, taken: set) -> list[np.ndarray]:
    """Integer cells spread round-robin over the four quadrants."""
    half = grid // 2
    corners = [(0, 0), (half, 0), (0, half), (half, half)]
    start = int(rng.integers(4))
    out = []
    for i in range(count):
        ox, oy = corners[(start + i) % 4]
        w = half if ox == 0 else grid - half
        h = half if oy == 0 else grid - half
        for _ in range(1000):
            cell = (ox + int(rng.integers(w)), oy + int(rng.integers(h)))
            if cell not in taken:
                break
        else:
            raise ValueError("grid too small for the requested number of nodes")
        taken.add(cell)
        out.append(np.array(cell, dtype=float))
    return out


def make_world(config: EpisodeConfig, seed: Optional[int] = None) -> WorldState:
    """Build a freshly randomized world and run the tick-0 population."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([int(seed), 0])
    taken: set = set()
    depot_pos = _place_nodes(rng, config.num_depots, config.grid_size, taken)
    client_pos = _place_nodes(rng, config.num_clients, config.grid_size, taken)
    rates = config.rate_set
    depots = [
        DepotState(
            id=i,
            position=pos,
            arrival_rate=float(rates[int(rng.integers(len(rates)))]),
            expected_size=float(rng.uniform(1.0, 3.0)),
        )
        for i, pos in enumerate(depot_pos)
    ]
    caps = [c for c, n in zip((1, 2, 3), config.fleet) for _ in range(n)]
    vehicles = []
    for i, cap in enumerate(caps):
        home = int(rng.integers(config.num_depots))
        vehicles.append(
            VehicleState(id=i, position=depots[home].position.copy(), capacity=cap, prev_stop=home, next_stop=home)
        )
    world = WorldState(
        vehicles=vehicles,
        depots=depots,
        clients=client_pos,
        rng=rng,
        mode=config.mode,
        grid_size=config.grid_size,
        duration_ticks=config.duration_ticks,
        max_decisions=config.max_decisions,
        arrival_interval=config.arrival_interval,
    )
    start_world(world)
    return world


def start_world(world: WorldState) -> None:
    """Tick-0 bookkeeping: populate once and mark every vehicle active."""
    world.clock = 0
    _populate_all(world)
    world.active = {v.id for v in world.vehicles if v.available}


def sample_destination(world: WorldState, origin: int) -> int:
    """Distance-ranked destination draw: nearer nodes are more likely."""
    origin_pos = world.depots[origin].position
    candidates = [n for n in range(world.num_nodes) if n != origin]
    dists = [float(np.hypot(*(world.node_position(n) - origin_pos))) for n in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (dists[i], candidates[i]))
    m = len(candidates)
    idx = int(round(abs(world.rng.normal(0.0, m / 3.0))))
    idx = min(max(idx, 0), m - 1)
    return candidates[order[idx]]


def sample_capacity(rng: np.random.Generator, expected_size: float) -> int:
    return int(min(max(round(rng.normal(expected_size, CAPACITY_STD)), 1), 3))


def populate_depot(world: WorldState, depot: DepotState) -> list[PayloadRequest]:
    """Poisson batch of new requests for one arrival interval.

    Requests that find the queue full are logged as ``DROP_REQUEST`` and
    counted in both ``requests_arrived`` and ``requests_dropped``.
    Returns the requests that were actually enqueued.
    """
    rng = world.rng
    k = int(rng.poisson(depot.arrival_rate * world.arrival_interval))
    if world.num_nodes < 2:
        return []
    added = []
    for _ in range(k):
        cap = sample_capacity(rng, depot.expected_size)
        dest = sample_destination(world, depot.id)
        request = PayloadRequest(
            id=world.next_payload_id,
            origin=depot.id,
            destination=dest,
            capacity=cap,
            payoff=payoff(depot.position, world.node_position(dest), cap),
            arrival_tick=world.clock,
        )
        world.next_payload_id += 1
        world.requests_arrived += 1
        if len(depot.queue) >= QUEUE_CAPACITY:
            world.requests_dropped += 1
            world.log(Event(world.clock, "DROP_REQUEST", depot=depot.id, payload=request))
            continue
        depot.queue.append(request)
        added.append(request)
        world.log(Event(world.clock, "ARRIVE", depot=depot.id, payload=request))
    return added


def _populate_all(world: WorldState) -> None:
    world.populate_calls += 1
    world.populated_this_tick = True
    for depot in world.depots:
        populate_depot(world, depot)


def _travel_ticks(a: np.ndarray, b: np.ndarray) -> int:
    dist = float(np.hypot(*(b - a)))
    return int(math.ceil(dist / SPEED - 1e-9)) if dist > _AT_NODE_TOL else 0


def commit_vehicle(world: WorldState, vehicle_id: int, depot_id: int) -> Optional[PayloadRequest]:
    """Send an available vehicle to ``depot_id``; returns the assigned payload, if any."""
    vehicle = world.vehicles[vehicle_id]
    if not vehicle.available:
        raise ContractViolation(f"vehicle {vehicle_id} is not available")
    if not 0 <= depot_id < len(world.depots):
        raise ContractViolation(f"unknown depot {depot_id}")
    depot = world.depots[depot_id]
    t = world.clock
    start = vehicle.position.copy()
    payload = assign_payload(vehicle.capacity, depot.queue)
    vehicle.pending_reward = net_reward(start, depot.position, payload)
    vehicle.chosen_depot = depot_id
    vehicle.decisions += 1
    vehicle.available = False
    vehicle.idle = False
    vehicle.next_stop = depot_id
    world.log(Event(t, "DECIDE", vehicle_id, depot_id, payload))

    tau1 = _travel_ticks(start, depot.position)
    legs = []
    if payload is not None:
        vehicle.committed_payload = payload
        dest_pos = world.node_position(payload.destination)
        tau2 = max(1, _travel_ticks(depot.position, dest_pos))
        if tau1 > 0:
            legs.append(Leg(depot_id, start, t, t + tau1))
        else:
            world.log(Event(t, "PICKUP", vehicle_id, depot_id, payload))
            vehicle.prev_stop = depot_id
            vehicle.next_stop = payload.destination
        legs.append(Leg(payload.destination, depot.position.copy(), t + tau1, t + tau1 + tau2))
    else:
        legs.append(Leg(depot_id, start, t, t + max(1, tau1)))
    vehicle.legs = legs
    vehicle.arrival_clock = legs[-1].arrive_tick
    return payload


def _advance_vehicle(world: WorldState, vehicle: VehicleState) -> bool:
    """Move one tick; returns True when the vehicle became available."""
    t = world.clock
    while vehicle.legs and vehicle.legs[0].arrive_tick <= t:
        leg = vehicle.legs.pop(0)
        target_pos = world.node_position(leg.target)
        vehicle.position = target_pos.copy()
        vehicle.prev_stop = leg.target
        if vehicle.legs:
            # reached the pickup depot
            vehicle.next_stop = vehicle.legs[0].target
            world.log(Event(t, "PICKUP", vehicle.id, leg.target, vehicle.committed_payload))
            continue
        vehicle.next_stop = leg.target
        reward = float(vehicle.pending_reward)
        payload = vehicle.committed_payload
        if payload is not None:
            world.requests_fulfilled += 1
            world.log(Event(t, "DROPOFF", vehicle.id, vehicle.chosen_depot, payload, reward))
        else:
            world.log(Event(t, "PENALTY", vehicle.id, vehicle.chosen_depot, None, reward))
        world.vehicle_rewards[vehicle.id] += reward
        world.credits.append((vehicle.id, reward))
        vehicle.committed_payload = None
        vehicle.pending_reward = None
        vehicle.chosen_depot = None
        vehicle.arrival_clock = None
        vehicle.available = True
        return True
    if vehicle.legs:
        leg = vehicle.legs[0]
        if t > leg.start_tick:
            target_pos = world.node_position(leg.target)
            delta = target_pos - leg.start_pos
            dist = float(np.hypot(*delta))
            travelled = min(dist, SPEED * (t - leg.start_tick))
            vehicle.position = leg.start_pos + delta * (travelled / dist)
    return False


def step_world(world: WorldState) -> set[int]:
    """Advance one tick and return the set of vehicles that became active.

    A vehicle is active at tick ``t`` when its availability differs from its
    availability after the decisions of tick ``t - 1``; decisions themselves
    happen between steps, so the active set holds the vehicles whose trip
    completed during this step.
    """
    world.clock += 1
    world.populated_this_tick = False
    active = set()
    for vehicle in world.vehicles:
        if not vehicle.available and _advance_vehicle(world, vehicle):
            active.add(vehicle.id)
    if (
        world.mode == ON_DEMAND
        and world.clock % world.arrival_interval == 0
        and world.clock < world.duration_ticks
    ):
        _populate_all(world)
    world.active = active
    return active


def deciders(world: WorldState) -> list[int]:
    """Vehicles that must be queried for a decision at the current tick.

    Active available vehicles always decide.  Vehicles a policy left idle
    are re-polled whenever something changed (an availability flip or a
    population event).
    """
    if world.done:
        return []
    event = bool(world.active) or world.populated_this_tick
    out = []
    for v in world.vehicles:
        if not v.available or v.decisions >= world.max_decisions:
            continue
        if v.id in world.active or (v.idle and event):
            out.append(v.id)
    return out


class Policy(Protocol):
    def act(self, world: WorldState, vehicle_ids: list[int], rng: np.random.Generator) -> list[Optional[int]]:
        """Return one depot id (or None to stay idle) per queried vehicle."""


@dataclass
class EpisodeMetrics:
    fleet_reward: float
    fulfillment_ratio: float
    rewards_by_class: dict[int, float]
    arrived: int
    fulfilled: int
    dropped: int

    def to_dict(self) -> dict:
        return {
            "fleet_reward": self.fleet_reward,
            "fulfillment_ratio": self.fulfillment_ratio,
            "rewards_by_class": {str(k): v for k, v in sorted(self.rewards_by_class.items())},
            "arrived": self.arrived,
            "fulfilled": self.fulfilled,
            "dropped": self.dropped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def episode_metrics(world: WorldState) -> EpisodeMetrics:
    by_class = {1: 0.0, 2: 0.0, 3: 0.0}
    for v in world.vehicles:
        by_class[v.capacity] += world.vehicle_rewards[v.id]
    arrived = world.requests_arrived
    ratio = world.requests_fulfilled / arrived if arrived else 1.0
    return EpisodeMetrics(
        fleet_reward=world.fleet_reward,
        fulfillment_ratio=ratio,
        rewards_by_class=by_class,
        arrived=arrived,
        fulfilled=world.requests_fulfilled,
        dropped=world.requests_dropped,
    )


def apply_decisions(world: WorldState, vehicle_ids: Iterable[int], choices: Iterable[Optional[int]]) -> None:
    for vid, choice in zip(vehicle_ids, choices):
        if choice is None:
            world.vehicles[vid].idle = True
        else:
            commit_vehicle(world, vid, int(choice))


def advance_to_decision(world: WorldState) -> list[int]:
    """Step until some vehicle needs a decision or the episode ends."""
    ids = deciders(world)
    while not ids and not world.done:
        step_world(world)
        ids = deciders(world)
    return ids


def run_world(
    world: WorldState,
    policy: Policy,
    rng: np.random.Generator,
    on_tick: Optional[Callable[[WorldState], None]] = None,
) -> EpisodeMetrics:
    while not world.done:
        ids = deciders(world)
        if ids:
            apply_decisions(world, ids, policy.act(world, ids, rng))
        if on_tick is not None:
            on_tick(world)
        step_world(world)
    if on_tick is not None:
        on_tick(world)
    return episode_metrics(world)


def run_episode(config: EpisodeConfig, policy: Policy, seed: Optional[int] = None) -> tuple[EpisodeMetrics, WorldState]:
    """Play one episode; the world and the policy draw from separate streams of ``seed``."""
    seed = config.seed if seed is None else seed
    world = make_world(config, seed)
    rng = np.random.default_rng([int(seed), 1])
    metrics = run_world(world, policy, rng)
    return metrics, world
