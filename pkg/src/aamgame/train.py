"""Shared-parameter PPO over active-timestep transitions.

Every vehicle in every world acts with the same network.  A transition is
recorded per decision; its reward is the net reward credited when the
resulting trip completes.  Advantages are computed per agent sequence,
indexed by decision count rather than by tick.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import tensor as tn
from .obsgraph import HeteroGraph
from .policy import LearnedPolicy, PolicyNet, batch_graphs, entropy, masked_log_probs
from .sim import EpisodeConfig, advance_to_decision, apply_decisions, episode_metrics, make_world, step_world

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("active_timesteps", "mean_fleet_reward", "mean_fulfillment", "entropy", "clip_fraction")


@dataclass
class PPOConfig:
    batch: int = 1200
    minibatch: int = 48
    sgd_iters: int = 8
    clip: float = 0.1
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coeff: Optional[float] = None
    value_coeff: float = 5e-3
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    lr_decay_steps: int = 300_000
    max_grad_norm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.batch % self.minibatch:
            raise ValueError("minibatch must divide batch")

    def entropy_for(self, arch: str) -> float:
        if self.entropy_coeff is not None:
            return self.entropy_coeff
        return 1e-2 if arch == "encdec" else 1e-3

    def lr_at(self, steps: int) -> float:
        frac = min(max(steps / self.lr_decay_steps, 0.0), 1.0)
        return self.lr_start + frac * (self.lr_end - self.lr_start)


@dataclass
class Transition:
    graph: HeteroGraph
    mask: np.ndarray
    action: int
    logp: float
    value: float
    agent: int
    world: int
    episode: int
    tick: int
    step: int
    reward: float = 0.0
    done: bool = False


@dataclass
class RolloutBuffer:
    transitions: list[Transition]
    bootstrap: dict[tuple[int, int, int], float] = field(default_factory=dict)
    episodes: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)


def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[bool],
    gamma: float,
    lam: float,
    bootstrap: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates for one ordered agent sequence.

    ``bootstrap`` is the value of the state after the last step when that
    step is not terminal.  Returns raw (unnormalized) advantages and returns.
    """
    if not len(rewards) == len(values) == len(dones):
        raise ValueError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = bootstrap
    for t in reversed(range(n)):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + np.asarray(values, dtype=float)


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


def buffer_advantages(buffer: RolloutBuffer, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent GAE over the buffer, returned in buffer order."""
    groups: dict[tuple[int, int, int], list[int]] = {}
    for i, tr in enumerate(buffer.transitions):
        groups.setdefault((tr.world, tr.episode, tr.agent), []).append(i)
    adv = np.zeros(len(buffer))
    ret = np.zeros(len(buffer))
    for key, idx in groups.items():
        idx.sort(key=lambda i: buffer.transitions[i].step)
        trs = [buffer.transitions[i] for i in idx]
        a, r = compute_gae(
            [t.reward for t in trs],
            [t.value for t in trs],
            [t.done for t in trs],
            gamma,
            lam,
            buffer.bootstrap.get(key, 0.0),
        )
        adv[idx] = a
        ret[idx] = r
    return adv, ret


def collect_rollouts(
    config: EpisodeConfig,
    policy: LearnedPolicy,
    count: int,
    rng: np.random.Generator,
    seeds: "SeedCounter",
    num_worlds: int = 16,
) -> RolloutBuffer:
    """Run episodes on parallel worlds until ``count`` decisions are recorded.

    Worlds advance independently to their next decision point; all pending
    decisions are evaluated in one batched forward pass.  Episodes in
    flight when the count is reached are finished, then the merged buffer
    (ordered by world, episode, tick, agent) is cut to exactly ``count``.
    A cut agent sequence bootstraps from the value of its first dropped
    transition.
    """
    transitions: list[Transition] = []
    episodes: list[dict] = []
    worlds: list = [None] * num_worlds
    episode_ids = [0] * num_worlds
    last: list[dict[int, Transition]] = [dict() for _ in range(num_worlds)]
    steps: list[dict[int, int]] = [dict() for _ in range(num_worlds)]

    def start(slot: int) -> None:
        worlds[slot] = make_world(config, seeds.next())
        last[slot] = {}
        steps[slot] = {}

    for slot in range(num_worlds):
        start(slot)
    while any(w is not None for w in worlds):
        pending = []
        for slot, world in enumerate(worlds):
            if world is None:
                continue
            ids = advance_to_decision(world)
            _credit(world, last[slot])
            if world.done:
                for tr in last[slot].values():
                    tr.done = True
                m = episode_metrics(world)
                episodes.append({"world": slot, "episode": episode_ids[slot], **m.to_dict()})
                episode_ids[slot] += 1
                if len(transitions) < count:
                    start(slot)
                    ids = advance_to_decision(worlds[slot])
                else:
                    worlds[slot] = None
                    continue
            pending.extend((slot, vid) for vid in ids)
        if not pending:
            continue
        graphs, masks = [], []
        for slot, vid in pending:
            g, m = policy.observe(worlds[slot], [vid])
            graphs.extend(g)
            masks.append(m[0])
        masks = np.stack(masks)
        logp, values = policy.evaluate(graphs, masks)
        actions = policy.choose(logp, rng)
        for k, (slot, vid) in enumerate(pending):
            world = worlds[slot]
            step = steps[slot].get(vid, 0)
            tr = Transition(
                graph=graphs[k],
                mask=masks[k],
                action=actions[k],
                logp=float(logp[k, actions[k]]),
                value=float(values[k]),
                agent=vid,
                world=slot,
                episode=episode_ids[slot],
                tick=world.clock,
                step=step,
            )
            steps[slot][vid] = step + 1
            last[slot][vid] = tr
            transitions.append(tr)
        for slot in sorted({s for s, _ in pending}):
            world = worlds[slot]
            ids = [vid for s, vid in pending if s == slot]
            acts = [actions[k] for k, (s, _) in enumerate(pending) if s == slot]
            apply_decisions(world, ids, acts)
            step_world(world)

    transitions.sort(key=lambda t: (t.world, t.episode, t.tick, t.agent))
    kept, dropped = transitions[:count], transitions[count:]
    bootstrap = {}
    for tr in dropped:
        key = (tr.world, tr.episode, tr.agent)
        bootstrap.setdefault(key, tr.value)
    return RolloutBuffer(kept, bootstrap, episodes)


def _credit(world, last: dict[int, Transition]) -> None:
    for vid, reward in world.credits:
        if vid in last:
            last[vid].reward += reward
    world.credits.clear()


class SeedCounter:
    def __init__(self, base: int) -> None:
        self.base = int(base)
        self.n = 0

    def next(self) -> int:
        seed = self.base * 1_000_003 + self.n
        self.n += 1
        return seed


def ppo_loss(
    model: PolicyNet,
    transitions: Sequence[Transition],
    advantages: np.ndarray,
    returns: np.ndarray,
    clip: float,
    value_coeff: float,
    entropy_coeff: float,
):
    batch = batch_graphs([t.graph for t in transitions], model.dtype)
    masks = torch.from_numpy(np.stack([t.mask for t in transitions]))
    actions = torch.tensor([t.action for t in transitions])
    old_logp = torch.tensor([t.logp for t in transitions], dtype=model.dtype)
    adv = torch.from_numpy(advantages).to(model.dtype)
    ret = torch.from_numpy(returns).to(model.dtype)
    scores, values = model(batch)
    logp_all = masked_log_probs(scores, masks)
    logp = logp_all.gather(1, actions.view(-1, 1)).squeeze(1)
    ratio = torch.exp(logp - old_logp)
    clipped = torch.clamp(ratio, 1 - clip, 1 + clip)
    policy_loss = -torch.min(ratio * adv, clipped * adv).mean()
    value_loss = ((values - ret) ** 2).mean()
    ent = entropy(logp_all).mean()
    loss = policy_loss + value_coeff * value_loss - entropy_coeff * ent
    with torch.no_grad():
        stats = {
            "policy_loss": policy_loss.item(),
            "value_loss": value_loss.item(),
            "entropy": ent.item(),
            "ratio": ratio.mean().item(),
            "clip_fraction": ((ratio - 1).abs() > clip).to(model.dtype).mean().item(),
        }
    return loss, stats


def ppo_update(
    buffer: RolloutBuffer,
    model: PolicyNet,
    optimizer: torch.optim.Optimizer,
    config: PPOConfig,
    lr: float,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; returns mean stats."""
    if len(buffer) != config.batch:
        raise ValueError(f"buffer holds {len(buffer)} transitions, expected {config.batch}")
    adv, ret = buffer_advantages(buffer, config.gamma, config.lam)
    adv = normalize(adv)
    ent_coeff = config.entropy_for(model.arch)
    totals: dict[str, float] = {}
    n_mb = 0
    for _ in range(config.sgd_iters):
        order = rng.permutation(len(buffer))
        for start in range(0, len(buffer), config.minibatch):
            idx = order[start : start + config.minibatch]
            loss, stats = ppo_loss(
                model,
                [buffer.transitions[i] for i in idx],
                adv[idx],
                ret[idx],
                config.clip,
                config.value_coeff,
                ent_coeff,
            )
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss in minibatch {n_mb} (indices {idx.tolist()})")
            optimizer.zero_grad()
            loss.backward()
            if config.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            tn.adam_step(optimizer, lr)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            n_mb += 1
    return {k: v / max(n_mb, 1) for k, v in totals.items()}


@dataclass
class RunConfig:
    env: EpisodeConfig = field(default_factory=EpisodeConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    arch: str = "encdec"
    use_mask: bool = False
    budget: int = 20_000
    seed: int = 0
    num_worlds: int = 16
    dtype: str = "float32"
    out_dir: Optional[str] = None
    checkpoint_every: int = 0


def train(cfg: RunConfig, progress: bool = False) -> tuple[PolicyNet, list[dict]]:
    """Alternate rollouts and PPO updates until ``budget`` active timesteps are used."""
    torch.manual_seed(cfg.seed)
    dtype = getattr(torch, cfg.dtype)
    model = PolicyNet(cfg.arch, dtype=dtype, seed=cfg.seed)
    optimizer = tn.make_adam(model.parameters(), lr=cfg.ppo.lr_start)
    policy = LearnedPolicy(model, cfg.env.k_v, cfg.env.k_d, cfg.use_mask)
    rng = np.random.default_rng([cfg.seed, 2])
    seeds = SeedCounter(cfg.seed)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve: list[dict] = []
    steps = 0
    milestone = cfg.checkpoint_every
    t0 = time.time()
    while steps + cfg.ppo.batch <= cfg.budget:
        model.eval()
        buffer = collect_rollouts(cfg.env, policy, cfg.ppo.batch, rng, seeds, cfg.num_worlds)
        model.train()
        lr = cfg.ppo.lr_at(steps)
        stats = ppo_update(buffer, model, optimizer, cfg.ppo, lr, rng)
        steps += len(buffer)
        eps = buffer.episodes
        row = {
            "active_timesteps": steps,
            "mean_fleet_reward": float(np.mean([e["fleet_reward"] for e in eps])) if eps else 0.0,
            "mean_fulfillment": float(np.mean([e["fulfillment_ratio"] for e in eps])) if eps else 0.0,
            "entropy": stats.get("entropy", 0.0),
            "clip_fraction": stats.get("clip_fraction", 0.0),
        }
        curve.append(row)
        if progress:
            log.info("steps=%d reward=%.2f fulfil=%.3f ent=%.3f clip=%.3f (%.0fs)", steps,
                     row["mean_fleet_reward"], row["mean_fulfillment"], row["entropy"],
                     row["clip_fraction"], time.time() - t0)
        if out is not None and milestone and steps >= milestone:
            save_policy(out / f"checkpoint_{steps}.json", model, cfg)
            milestone += cfg.checkpoint_every
    if out is not None:
        save_policy(out / "checkpoint.json", model, cfg)
        write_curve(out / "curve.csv", curve)
    return model, curve


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in CURVE_COLUMNS})


def save_policy(path, model: PolicyNet, cfg: Optional[RunConfig] = None) -> None:
    meta = {"arch": model.arch}
    if cfg is not None:
        meta["use_mask"] = cfg.use_mask
        meta["env"] = cfg.env.environment_key()
        meta["ppo"] = asdict(cfg.ppo)
    tn.save_checkpoint(path, model.state_dict(), meta)


def load_policy(path, dtype=None) -> tuple[PolicyNet, dict]:
    state, meta = tn.load_checkpoint(path)
    arch = meta.get("arch", "encdec")
    first = next(iter(state.values()))
    model = PolicyNet(arch, dtype=dtype or first.dtype)
    model.load_state_dict({k: v.to(model.dtype) for k, v in state.items()})
    return model, meta
