"""Command-line front end: train, eval, compare, oracle and trace.

Every command reads a flat JSON run specification, applies the ``AAMGAME_SEED``
environment variable and then ``key=value`` overrides from the command line,
and writes its outputs under the run's output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import OdlaPolicy, RandomPolicy
from .policy import LearnedPolicy
from .sim import EVENT_LOG_HEADER, EpisodeConfig, WorldState, make_world, run_world
from .train import PPOConfig, RunConfig, load_policy, save_policy, train, write_curve

log = logging.getLogger(__name__)

COMMANDS = ("train", "eval", "compare", "oracle", "trace")
SELECTORS = ("encdec", "encdec-masked", "hetgat", "hetgcn", "random", "odla")
LEARNED = {"encdec": ("encdec", False), "encdec-masked": ("encdec", True),
           "hetgat": ("hetgat", False), "hetgcn": ("hetgcn", False)}
ENV_FIELDS = tuple(f.name for f in fields(EpisodeConfig) if f.name != "seed")
METRIC_COLUMNS = ("fleet_reward", "fulfillment_ratio", "reward_class1", "reward_class2",
                  "reward_class3", "arrived", "fulfilled", "dropped")
PLOT_METRICS = ("fleet_reward", "fulfillment_ratio")
SEED_ENV = "AAMGAME_SEED"
# Training draws episode seeds seed * 1000003 + n; evaluation lives far above that range.
EVAL_SEED_BASE = 1 << 40


class SpecError(ValueError):
    pass


@dataclass
class RunSpec:
    command: str = "eval"
    policy: str = "random"
    episodes: int = 20
    seed: int = 0
    out_dir: str = "."
    checkpoint: str = "checkpoint.json"
    env: dict = field(default_factory=dict)
    # training only
    budget: int = 20_000
    lr_start: Optional[float] = None
    lr_end: Optional[float] = None
    batch: Optional[int] = None
    num_worlds: int = 16
    checkpoint_every: int = 0
    dtype: str = "float32"
    # trace only
    snapshot_every: int = 10

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise SpecError(f"unknown command {self.command!r}")
        if self.policy not in SELECTORS:
            raise SpecError(f"unknown policy {self.policy!r}; choose from {', '.join(SELECTORS)}")
        if self.policy == "odla" and self.command not in ("eval", "compare", "oracle"):
            raise SpecError("the odla policy is only valid for eval, compare and oracle")
        if self.command == "train" and self.policy not in LEARNED:
            raise SpecError(f"cannot train the {self.policy} policy")
        if self.episodes <= 0:
            raise SpecError("episodes must be positive")
        if self.seed < 0:
            raise SpecError("seed must be non-negative")
        unknown = set(self.env) - set(ENV_FIELDS)
        if unknown:
            raise SpecError(f"unknown environment fields: {', '.join(sorted(unknown))}")
        try:
            self.config()
        except ValueError as exc:
            raise SpecError(f"invalid environment: {exc}") from exc

    def config(self) -> EpisodeConfig:
        return EpisodeConfig(**self.env, seed=self.seed)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def checkpoint_path(self) -> Path:
        path = Path(self.checkpoint)
        return path if path.is_absolute() else self.out / path

    def episode_seed(self, episode: int) -> int:
        return EVAL_SEED_BASE + self.seed * 1_000_003 + episode

    def to_dict(self) -> dict:
        return asdict(self)


def parse_value(key: str, text: str):
    if key == "fleet" and "," in text and not text.startswith("["):
        return [int(x) for x in text.split(",")]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge_spec(base: dict, overrides: Sequence[str], environ=None) -> dict:
    """Combine file values, the seed environment variable and ``key=value`` overrides, in that order."""
    data = {k: v for k, v in base.items() if k != "env"}
    env = dict(base.get("env", {}))
    # environment fields may also appear at the top level of the file
    for key in ENV_FIELDS:
        if key in data:
            env[key] = data.pop(key)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            data["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise SpecError(f"{SEED_ENV} must be an integer") from exc
    known = {f.name for f in fields(RunSpec)} - {"env"}
    for item in overrides:
        if "=" not in item:
            raise SpecError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        value = parse_value(key, text)
        if key in ENV_FIELDS:
            env[key] = value
        elif key in known:
            data[key] = value
        else:
            raise SpecError(f"unknown setting {key!r}")
    data["env"] = env
    return data


def load_spec(path: Optional[str], overrides: Sequence[str] = (), command: Optional[str] = None,
              environ=None) -> RunSpec:
    base = {}
    if path is not None:
        with open(path) as f:
            base = json.load(f)
        if not isinstance(base, dict):
            raise SpecError(f"{path}: run spec must be a JSON object")
    data = merge_spec(base, overrides, environ)
    if command is not None:
        data["command"] = command
    try:
        return RunSpec(**data)
    except TypeError as exc:
        raise SpecError(str(exc)) from exc


# ---------------------------------------------------------------- policies

def build_policy(spec: RunSpec, audit=None):
    if spec.policy == "random":
        return RandomPolicy()
    if spec.policy == "odla":
        return OdlaPolicy(audit)
    arch, use_mask = LEARNED[spec.policy]
    path = spec.checkpoint_path()
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_policy(path)
    if model.arch != arch:
        raise SpecError(f"checkpoint {path} holds a {model.arch} model, not {arch}")
    model.eval()
    cfg = spec.config()
    return LearnedPolicy(model, cfg.k_v, cfg.k_d, use_mask)


# ---------------------------------------------------------------- metrics

def metrics_row(episode: int, metrics) -> dict:
    return {
        "episode": episode,
        "fleet_reward": metrics.fleet_reward,
        "fulfillment_ratio": metrics.fulfillment_ratio,
        "reward_class1": metrics.rewards_by_class[1],
        "reward_class2": metrics.rewards_by_class[2],
        "reward_class3": metrics.rewards_by_class[3],
        "arrived": metrics.arrived,
        "fulfilled": metrics.fulfilled,
        "dropped": metrics.dropped,
    }


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("episode",) + METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["episode"]] + [repr(float(row[c])) if isinstance(row[c], float) else row[c]
                                                 for c in METRIC_COLUMNS])


def read_metrics(path: Path) -> dict[str, np.ndarray]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}


def summarize(columns: dict[str, np.ndarray]) -> dict:
    """Mean and population standard deviation of every metric column."""
    return {c: {"mean": float(np.mean(v)), "std": float(np.std(v))} for c, v in columns.items()}


def evaluate(spec: RunSpec, policy=None, audit=None) -> list[dict]:
    cfg = spec.config()
    policy = policy if policy is not None else build_policy(spec, audit)
    rows = []
    for ep in range(spec.episodes):
        seed = spec.episode_seed(ep)
        world = make_world(cfg, seed)
        if audit is not None:
            audit.write(f"# episode {ep}\tseed {seed}\n")
        metrics = run_world(world, policy, np.random.default_rng([seed, 1]))
        rows.append(metrics_row(ep, metrics))
    return rows


def write_eval(spec: RunSpec, rows: list[dict], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", rows)
    summary = {
        "policy": spec.policy,
        "episodes": len(rows),
        "seed": spec.seed,
        "environment": spec.config().environment_key(),
        "metrics": summarize(read_metrics(out / "metrics.csv")),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_eval(spec: RunSpec) -> dict:
    rows = evaluate(spec)
    return write_eval(spec, rows, spec.out)


def cmd_oracle(spec: RunSpec) -> dict:
    if spec.policy != "odla":
        spec = RunSpec(**{**spec.to_dict(), "policy": "odla"})
    spec.out.mkdir(parents=True, exist_ok=True)
    with open(spec.out / "odla_audit.tsv", "w") as audit:
        rows = evaluate(spec, audit=audit)
    return write_eval(spec, rows, spec.out)


def series_labels(specs: Sequence[RunSpec]) -> list[str]:
    labels, seen = [], {}
    for s in specs:
        seen[s.policy] = seen.get(s.policy, 0) + 1
        labels.append(s.policy if seen[s.policy] == 1 else f"{s.policy}#{seen[s.policy]}")
    return labels


def check_comparable(specs: Sequence[RunSpec]) -> None:
    if len(specs) < 2:
        raise SpecError("compare needs at least two run specs")
    first = specs[0]
    key = first.config().environment_key()
    for s in specs[1:]:
        if s.config().environment_key() != key:
            raise SpecError("compare requires every run spec to share one environment")
        if (s.seed, s.episodes) != (first.seed, first.episodes):
            raise SpecError("compare requires every run spec to use the same seed and episode count")


def cmd_compare(specs: Sequence[RunSpec], out: Path) -> dict:
    check_comparable(specs)
    out.mkdir(parents=True, exist_ok=True)
    labels = series_labels(specs)
    summaries = {}
    for label, spec in zip(labels, specs):
        summaries[label] = write_eval(spec, evaluate(spec), out / label.replace("#", "_"))

    header = ["policy"] + [f"{m}_{s}" for m in PLOT_METRICS for s in ("mean", "std")]
    with open(out / "compare.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for label in labels:
            m = summaries[label]["metrics"]
            writer.writerow([label] + [repr(m[c][s]) for c in PLOT_METRICS for s in ("mean", "std")])

    plot = {
        "metrics": list(PLOT_METRICS),
        "environment": specs[0].config().environment_key(),
        "series": [
            {"policy": label, **{c: summaries[label]["metrics"][c] for c in PLOT_METRICS}}
            for label in labels
        ],
    }
    (out / "plotdata.json").write_text(json.dumps(plot, indent=2) + "\n")
    return {"labels": labels, "summaries": summaries}


def format_table(result: dict) -> str:
    lines = [f"{'policy':<16}{'fleet reward':>22}{'fulfillment':>20}"]
    for label in result["labels"]:
        m = result["summaries"][label]["metrics"]
        r, q = m["fleet_reward"], m["fulfillment_ratio"]
        lines.append(f"{label:<16}{r['mean']:>12.3f} ± {r['std']:<7.3f}{q['mean']:>10.3f} ± {q['std']:<7.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- training

def cmd_train(spec: RunSpec) -> dict:
    arch, use_mask = LEARNED[spec.policy]
    ppo = PPOConfig()
    if spec.lr_start is not None:
        ppo.lr_start = float(spec.lr_start)
        ppo.lr_end = float(spec.lr_end) if spec.lr_end is not None else ppo.lr_start / 10
    elif spec.lr_end is not None:
        ppo.lr_end = float(spec.lr_end)
    if spec.batch is not None:
        ppo.batch = int(spec.batch)
    cfg = RunConfig(env=spec.config(), ppo=ppo, arch=arch, use_mask=use_mask, budget=spec.budget,
                    seed=spec.seed, num_worlds=spec.num_worlds, dtype=spec.dtype,
                    out_dir=str(spec.out), checkpoint_every=spec.checkpoint_every)
    model, curve = train(cfg, progress=True)
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = spec.checkpoint_path()
    if ckpt != out / "checkpoint.json":
        save_policy(ckpt, model, cfg)
    write_curve(out / "curve.csv", curve)
    (out / "policy_info.json").write_text(json.dumps(model.info(), indent=2) + "\n")
    (out / "runspec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return {"steps": curve[-1]["active_timesteps"] if curve else 0, "checkpoint": str(ckpt)}


# ---------------------------------------------------------------- trace

VEHICLE_GLYPHS = {1: "a", 2: "b", 3: "c"}


def render_ascii(grid_size: int, vehicles=(), depots=(), clients=(), status: str = "") -> str:
    """Text rendering of the grid inside a border.

    ``vehicles`` holds (position, capacity, loaded) triples, ``depots`` holds
    (position, queue length) pairs and ``clients`` holds positions. Depots show
    their queue length, clients show ``+``, vehicles show ``a``/``b``/``c`` by
    capacity class (upper case while loaded). Vehicles are drawn on top.
    """
    cells = [[" "] * grid_size for _ in range(grid_size)]

    def put(pos, ch):
        x = min(max(int(round(float(pos[0]))), 0), grid_size - 1)
        y = min(max(int(round(float(pos[1]))), 0), grid_size - 1)
        cells[grid_size - 1 - y][x] = ch

    for pos in clients:
        put(pos, "+")
    for pos, queue in depots:
        put(pos, str(min(int(queue), 9)))
    for pos, cap, loaded in vehicles:
        glyph = VEHICLE_GLYPHS[cap]
        put(pos, glyph.upper() if loaded else glyph)
    border = "+" + "-" * grid_size + "+"
    lines = [status] if status else []
    lines += [border] + ["|" + "".join(row) + "|" for row in cells] + [border]
    return "\n".join(lines)


def snapshot(world: WorldState) -> str:
    status = (f"tick {world.clock}  fleet reward {world.fleet_reward:.3f}  "
              f"fulfilled {world.requests_fulfilled}/{world.requests_arrived}")
    grid = render_ascii(
        world.grid_size,
        vehicles=[(v.position, v.capacity, v.committed_payload is not None) for v in world.vehicles],
        depots=[(d.position, len(d.queue)) for d in world.depots],
        clients=world.clients,
        status=status,
    )
    queues = "queues " + " ".join(f"{d.id}:{len(d.queue)}" for d in world.depots)
    return grid + "\n" + queues + "\n"


def trace_episode(world: WorldState, policy, rng: np.random.Generator, out: Path, every: int = 10) -> dict:
    """Play one episode, writing trace.log and snapshots.txt into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    frames: dict[int, str] = {}

    def on_tick(w: WorldState) -> None:
        if every > 0 and w.clock % every == 0:
            frames.setdefault(w.clock, snapshot(w))

    metrics = run_world(world, policy, rng, on_tick=on_tick)
    frames[world.clock] = snapshot(world)
    frames = list(frames.values())
    (out / "trace.log").write_text(EVENT_LOG_HEADER + "\n" + world.event_log())
    (out / "snapshots.txt").write_text("\n".join(frames))
    return {"events": len(world.events), "snapshots": len(frames), **metrics.to_dict()}


def cmd_trace(spec: RunSpec) -> dict:
    seed = spec.episode_seed(0)
    world = make_world(spec.config(), seed)
    return trace_episode(world, build_policy(spec), np.random.default_rng([seed, 1]), spec.out,
                         spec.snapshot_every)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aamgame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "compare":
            p.add_argument("--runspec", action="append", required=True,
                           help="run spec JSON (repeat once per policy)")
            p.add_argument("--out", default=".", help="directory for the comparison outputs")
        else:
            p.add_argument("--runspec", help="run spec JSON")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if args.command == "compare":
            specs = [load_spec(p, args.overrides, "compare") for p in args.runspec]
            print(format_table(cmd_compare(specs, Path(args.out))))
            return 0
        spec = load_spec(args.runspec, args.overrides, args.command)
        handler: Callable[[RunSpec], dict] = {
            "train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle, "trace": cmd_trace,
        }[args.command]
        print(json.dumps(handler(spec), indent=2))
        return 0
    except (SpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
