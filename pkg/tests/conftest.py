from __future__ import annotations

import numpy as np
import pytest

from aamgame.sim import DepotState, PayloadRequest, VehicleState, WorldState, payoff, start_world


def make_request(rid, origin, dest, cap, world=None, payoff_value=None, tick=0):
    if payoff_value is None and world is not None:
        payoff_value = payoff(world.depots[origin].position, world.node_position(dest), cap)
    return PayloadRequest(rid, origin, dest, cap, payoff_value if payoff_value is not None else 0.0, tick)


def small_world(
    depots,
    vehicles,
    clients=(),
    mode="one-shot",
    duration=100,
    rates=None,
    sizes=None,
    seed=0,
    start=False,
):
    """Hand-built world. ``vehicles`` is a list of (position, capacity, stop)."""
    depot_states = [
        DepotState(
            id=i,
            position=np.array(p, dtype=float),
            arrival_rate=(rates[i] if rates else 0.0),
            expected_size=(sizes[i] if sizes else 1.0),
        )
        for i, p in enumerate(depots)
    ]
    vehicle_states = [
        VehicleState(id=i, position=np.array(p, dtype=float), capacity=c, prev_stop=s, next_stop=s)
        for i, (p, c, s) in enumerate(vehicles)
    ]
    world = WorldState(
        vehicles=vehicle_states,
        depots=depot_states,
        clients=[np.array(c, dtype=float) for c in clients],
        rng=np.random.default_rng(seed),
        mode=mode,
        duration_ticks=duration,
    )
    if start:
        start_world(world)
    else:
        world.active = {v.id for v in world.vehicles}
    return world


@pytest.fixture
def world_factory():
    return small_world


def random_world(rng, mode="on-demand", max_depots=8, max_vehicles=7):
    """Random world mid-episode, with partially filled queues."""
    from aamgame.sim import EpisodeConfig, make_world

    n_d = int(rng.integers(1, max_depots + 1))
    fleet = tuple(int(x) for x in rng.integers(0, 3, size=3))
    if sum(fleet) == 0:
        fleet = (1, 0, 0)
    fleet = tuple(min(x, max_vehicles) for x in fleet)
    cfg = EpisodeConfig(mode=mode, fleet=fleet, num_depots=n_d, num_clients=int(rng.integers(0, 6)),
                        k_v=1, k_d=1)
    world = make_world(cfg, int(rng.integers(1 << 30)))
    # scatter vehicles so distances differ
    for v in world.vehicles:
        v.position = rng.uniform(0, world.grid_size - 1, size=2)
    return world


# acceptance lines, repeated after the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
