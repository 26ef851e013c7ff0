"""Experiment runner: seeded training runs, metrics logging, rank scans,
rank-uncertainty correlation dumps, and run-directory reporting.

A run directory is self-describing: it holds an echo of its configuration,
one sub-directory per seed with a ``metrics.csv`` (schema
``step,average_return,arank_mean,arank_std,wall_time``), checkpoints with
replay-buffer snapshots, and per-seed plus aggregate ``report.json`` files.
Re-running from the echoed configuration reproduces every ``metrics.csv``
byte-for-byte: all randomness derives from the seed through named streams,
and the wall_time column is a deterministic placeholder (0.0) with measured
timings kept in report.json instead.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .agent import Agent, AgentConfig, grid_values
from .envs import ReplayBuffer, make_env
from .linalg import approximate_rank
from .seeding import RunStreams, stream
from .uncertainty import CountTable, EnsembleScorer

log = logging.getLogger("ualqe")

METRICS_HEADER = "step,average_return,arank_mean,arank_std,wall_time"

__all__ = [
    "METRICS_HEADER",
    "RankScanConfig",
    "ExperimentConfig",
    "MetricsRow",
    "run_experiment",
    "rank_scan",
    "RankScanResult",
    "correlate",
    "CorrelationReport",
    "spearman_rho",
    "evaluate_policy",
    "read_metrics",
    "aggregate_report",
]


@dataclass(frozen=True)
class RankScanConfig:
    num_matrices: int = 100
    matrix_size: int = 64
    delta: float = 0.01

    def __post_init__(self):
        if self.num_matrices < 1 or self.matrix_size < 1:
            raise ValueError("rank scan sizes must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment (possibly several seeds)."""

    env_name: str
    agent: AgentConfig
    total_steps: int
    eval_interval: int
    eval_episodes: int = 5
    rank_scan: RankScanConfig = field(default_factory=RankScanConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    env_kwargs: dict = field(default_factory=dict)
    checkpoint_steps: Optional[List[int]] = None  # None: midpoint and end

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be positive")
        if self.total_steps % self.eval_interval != 0:
            raise ValueError("eval_interval must divide total_steps")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not isinstance(self.agent, AgentConfig):
            self.agent = AgentConfig.from_dict(self.agent)
        if not isinstance(self.rank_scan, RankScanConfig):
            self.rank_scan = RankScanConfig(**self.rank_scan)
        # Instantiating validates the env kwargs before any training happens.
        make_env(self.env_name, **self.env_kwargs)

    def resolved_checkpoint_steps(self) -> List[int]:
        if self.checkpoint_steps is not None:
            steps = sorted({int(s) for s in self.checkpoint_steps})
        else:
            steps = sorted({self.total_steps // 2, self.total_steps})
        steps = [s for s in steps if 0 < s <= self.total_steps]
        return steps

    def to_dict(self) -> dict:
        return {
            "env_name": self.env_name,
            "env_kwargs": self.env_kwargs,
            "agent": self.agent.to_dict(),
            "total_steps": self.total_steps,
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
            "rank_scan": {
                "num_matrices": self.rank_scan.num_matrices,
                "matrix_size": self.rank_scan.matrix_size,
                "delta": self.rank_scan.delta,
            },
            "checkpoint_steps": self.checkpoint_steps,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(payload) - allowed
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class MetricsRow:
    step: int
    average_return: float
    arank_mean: float
    arank_std: float
    wall_time: float = 0.0

    def to_csv_line(self) -> str:
        return (
            f"{self.step},{self.average_return!r},{self.arank_mean!r},"
            f"{self.arank_std!r},{self.wall_time!r}"
        )


# -- evaluation, rank scans, correlation ----------------------------------------


def evaluate_policy(env, actor, episodes: int, rng: np.random.Generator) -> float:
    """Mean undiscounted return of the greedy actor over fresh episodes."""
    total = 0.0
    for _ in range(episodes):
        state = env.reset(rng)
        done = False
        ep = 0.0
        while not done:
            action = np.clip(actor.forward(state), env.spec.action_low, env.spec.action_high)
            state, reward, done = env.step(action)
            ep += reward
        total += ep
    return total / episodes


@dataclass
class RankScanResult:
    mean: float
    std: float
    ranks: List[int]

    def histogram(self) -> dict:
        hist: dict[int, int] = {}
        for r in self.ranks:
            hist[r] = hist.get(r, 0) + 1
        return dict(sorted(hist.items()))


def rank_scan(q_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
              state_pool: np.ndarray, action_pool: np.ndarray,
              num_matrices: int, size: int, delta: float,
              rng: np.random.Generator) -> RankScanResult:
    """Approximate-rank statistics of sampled Q-matrices.

    Each matrix pairs ``size`` states and ``size`` actions drawn independently
    from the pools (without replacement inside a matrix, with replacement
    across matrices) and is scored by ``q_fn(states, actions) -> matrix``.
    """
    state_pool = np.atleast_2d(state_pool)
    action_pool = np.atleast_2d(action_pool)
    if len(state_pool) < size or len(action_pool) < size:
        raise ValueError(f"pools must hold at least {size} rows")
    ranks = []
    for _ in range(num_matrices):
        si = rng.choice(len(state_pool), size=size, replace=False)
        ai = rng.choice(len(action_pool), size=size, replace=False)
        matrix = q_fn(state_pool[si], action_pool[ai])
        ranks.append(approximate_rank(matrix, delta))
    arr = np.asarray(ranks, dtype=np.float64)
    return RankScanResult(mean=float(arr.mean()), std=float(arr.std(ddof=0)), ranks=ranks)


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation with average ranks for ties.

    Returns None when either side is constant (the correlation is undefined).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman_rho expects two equal-length 1-D samples, n >= 2")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = math.sqrt(float((sx**2).sum()) * float((sy**2).sum()))
    if denom == 0.0:
        return None
    return float((sx * sy).sum() / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    return ranks


@dataclass
class CorrelationReport:
    rows: List[tuple]  # (u_mean, u_std, arank) per sampled matrix
    spearman: Optional[float]

    @property
    def defined(self) -> bool:
        return self.spearman is not None


def correlate(q_fn, quantifier, state_pool, action_pool,
              num_matrices: int, size: int, delta: float,
              rng: np.random.Generator) -> CorrelationReport:
    """Per-matrix (uncertainty mean, uncertainty std, approximate rank) rows
    plus the Spearman correlation between rank and uncertainty mean.

    A degenerate sample (all ranks equal, or all uncertainty means equal)
    yields ``spearman=None`` rather than a number.
    """
    state_pool = np.atleast_2d(state_pool)
    action_pool = np.atleast_2d(action_pool)
    if len(state_pool) < size or len(action_pool) < size:
        raise ValueError(f"pools must hold at least {size} rows")
    rows = []
    for _ in range(num_matrices):
        si = rng.choice(len(state_pool), size=size, replace=False)
        ai = rng.choice(len(action_pool), size=size, replace=False)
        states, actions = state_pool[si], action_pool[ai]
        matrix = q_fn(states, actions)
        u = quantifier.score_grid(states, actions)
        rows.append((float(u.mean()), float(u.std(ddof=0)), approximate_rank(matrix, delta)))
    if num_matrices < 2:
        rho = None
    else:
        rho = spearman_rho([r[2] for r in rows], [r[0] for r in rows])
    return CorrelationReport(rows=rows, spearman=rho)


def quantifier_from_bundle(bundle, which: str):
    """CB or BB quantifier restored from a checkpoint bundle."""
    if which == "cb":
        if bundle.count_table is None:
            raise ValueError("bundle holds no count table; was count tracking enabled?")
        return bundle.count_table
    if which == "bb":
        if len(bundle.ensemble) < 2:
            raise ValueError("bundle holds no ensemble; was bootstrapped tracking enabled?")
        return EnsembleScorer(bundle.ensemble)
    raise ValueError(f"unknown quantifier {which!r}; choose 'cb' or 'bb'")


# -- the training loop -----------------------------------------------------------


def _critic_q_fn(critic):
    return lambda states, actions: grid_values(critic, states, actions)


def _eval_row(step, config, agent, buffer, seed) -> MetricsRow:
    eval_index = step // config.eval_interval
    eval_rng = stream(seed, "eval", eval_index)
    eval_env = make_env(config.env_name, **config.env_kwargs)
    avg_return = evaluate_policy(eval_env, agent.actor, config.eval_episodes, eval_rng)
    sc = config.rank_scan
    if len(buffer) >= sc.matrix_size:
        scan_rng = stream(seed, "rank_scan", eval_index)
        scan = rank_scan(_critic_q_fn(agent.critic), buffer.state_pool(), buffer.action_pool(),
                         sc.num_matrices, sc.matrix_size, sc.delta, scan_rng)
        arank_mean, arank_std = scan.mean, scan.std
    else:
        # Not enough transitions to form a matrix yet (early evals).
        arank_mean, arank_std = float("nan"), float("nan")
    return MetricsRow(step=step, average_return=avg_return,
                      arank_mean=arank_mean, arank_std=arank_std)


def run_single_seed(config: ExperimentConfig, seed: int, seed_dir: Path) -> dict:
    """Train one seed; returns the per-seed summary written to report.json."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    streams = RunStreams(seed)
    env = make_env(config.env_name, **config.env_kwargs)
    agent = Agent(config.agent, env.spec, streams)
    buffer = ReplayBuffer(config.agent.replay_capacity, env.spec.state_dim, env.spec.action_dim)
    checkpoint_steps = set(config.resolved_checkpoint_steps())

    rows = [_eval_row(0, config, agent, buffer, seed)]
    state = env.reset(streams.env)
    episode_len = 0
    for step in range(1, config.total_steps + 1):
        action = agent.act(state, explore=True)
        next_state, reward, done = env.step(action)
        buffer.add(state, action, reward, next_state, done)
        episode_len += 1
        if config.agent.episodic_updates:
            if done and len(buffer) >= config.agent.batch_size:
                for _ in range(episode_len):
                    agent.train_step(buffer)
        elif len(buffer) >= config.agent.batch_size:
            agent.train_step(buffer)
        if done:
            state = env.reset(streams.env)
            episode_len = 0
        else:
            state = next_state
        if step % config.eval_interval == 0:
            row = _eval_row(step, config, agent, buffer, seed)
            rows.append(row)
            log.info("seed %d step %d return %.3f arank %.2f",
                     seed, step, row.average_return, row.arank_mean)
        if step in checkpoint_steps:
            ckpt_dir = seed_dir / "checkpoints" / f"step_{step:08d}"
            agent.save_bundle(ckpt_dir)
            buffer.save(ckpt_dir / "buffer.npz")

    metrics_path = seed_dir / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.to_csv_line() + "\n")

    summary = {
        "seed": seed,
        "final_step": config.total_steps,
        "final_return": rows[-1].average_return,
        "final_arank_mean": rows[-1].arank_mean,
        "train_steps": agent.train_steps,
        "wall_time_seconds": time.perf_counter() - t_start,
        "checkpoints": sorted(f"step_{s:08d}" for s in checkpoint_steps),
    }
    with open(seed_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def run_experiment(config: ExperimentConfig, out_dir, seed_override: Optional[int] = None,
                   force: bool = False) -> Path:
    """Run every configured seed into ``out_dir``; returns the directory."""
    out_dir = Path(out_dir)
    if out_dir.exists() and (out_dir / "config.json").exists() and not force:
        raise FileExistsError(f"{out_dir} already holds a run; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    seeds = [int(seed_override)] if seed_override is not None else list(config.seeds)
    summaries = [run_single_seed(config, s, out_dir / f"seed_{s}") for s in seeds]
    finals = [s["final_return"] for s in summaries]
    aggregate = {
        "env_name": config.env_name,
        "variant": config.agent.variant,
        "seeds": seeds,
        "final_return_mean": float(np.mean(finals)),
        "final_return_std": float(np.std(finals, ddof=0)),
        "per_seed": summaries,
    }
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
    return out_dir


# -- run-directory reporting ------------------------------------------------------


def read_metrics(path) -> dict:
    """Parse a metrics.csv into column arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = list(zip(*rows)) if rows else [[]] * 5
    return {
        "step": np.array([int(v) for v in cols[0]]),
        "average_return": np.array([float(v) for v in cols[1]]),
        "arank_mean": np.array([float(v) for v in cols[2]]),
        "arank_std": np.array([float(v) for v in cols[3]]),
        "wall_time": np.array([float(v) for v in cols[4]]),
    }


def aggregate_report(run_dirs: Sequence) -> dict:
    """Final-return table across run directories, grouped variant x env."""
    entries = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        with open(run_dir / "config.json", "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
        finals = []
        seed_dirs = sorted(d for d in run_dir.iterdir() if d.is_dir() and d.name.startswith("seed_"))
        for sd in seed_dirs:
            m = read_metrics(sd / "metrics.csv")
            finals.append(float(m["average_return"][-1]))
        if not finals:
            raise ValueError(f"{run_dir} holds no seed sub-runs")
        entries.append({
            "run_dir": str(run_dir),
            "variant": cfg["agent"]["variant"],
            "env": cfg["env_name"],
            "num_seeds": len(finals),
            "final_returns": finals,
            "mean_final_return": float(np.mean(finals)),
            "std_final_return": float(np.std(finals, ddof=0)),
        })
    table: dict = {}
    for e in entries:
        table.setdefault(e["env"], {})[e["variant"]] = {
            "mean": e["mean_final_return"],
            "std": e["std_final_return"],
        }
    return {"runs": entries, "table": table}
