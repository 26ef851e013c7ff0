"""DDPG training with optional low-rank Q-matrix reconstruction.

Seven variants share one loop. The baseline updates the critic by plain TD.
The reconstruction variants build an N x N Q-matrix from the sampled batch
(evaluation kind: online critic on (s_i, a_j); target kind: target critic on
(s'_i, a'_j) with next actions from the target actor), erase a per-row share
of entries (uniformly at random, or the highest-uncertainty ones under a
count-based or ensemble quantifier), complete the matrix, and either take TD
targets from the reconstructed diagonal (target kind) or add a consistency
penalty between the matrix and its reconstruction (evaluation kind).
Reconstructed matrices are always treated as constants: no gradient flows
through the completion.

Step order: sample batch -> critic loss and update -> actor update -> soft
target updates -> uncertainty-estimator update (visit counts or one TD step
per ensemble member). Removal selection therefore always sees the estimator
state from before the current step.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .completion import SoftImputeConfig, reconstruct
from .envs import Batch, EnvSpec, ReplayBuffer
from .nn import (
    MLP,
    Adam,
    StackedCritics,
    load_adam,
    load_mlp,
    save_adam,
    save_mlp,
    soft_update,
    soft_update_stacked,
)
from .seeding import RunStreams
from .uncertainty import (
    CountTable,
    EnsembleScorer,
    StackedEnsembleScorer,
    per_row_removal_count,
    select_top_p_per_row,
    enforce_column_retention,
    uncertainty_matrix,
)

__all__ = [
    "VARIANTS",
    "AgentConfig",
    "QMatrixPair",
    "Agent",
    "AgentBundle",
    "load_bundle",
    "td_loss",
    "actor_gradients",
    "build_q_matrix",
    "choose_removal",
    "target_matrix_loss",
    "consistency_loss",
    "grid_values",
    "pair_grid",
]

VARIANTS = ("ddpg", "svrl-e", "svrl-t", "ualqe-e-cb", "ualqe-e-bb", "ualqe-t-cb", "ualqe-t-bb")

_MATRIX_KIND = {
    "ddpg": None,
    "svrl-e": "evaluation",
    "svrl-t": "target",
    "ualqe-e-cb": "evaluation",
    "ualqe-e-bb": "evaluation",
    "ualqe-t-cb": "target",
    "ualqe-t-bb": "target",
}

_SELECTOR = {
    "ddpg": None,
    "svrl-e": "random",
    "svrl-t": "random",
    "ualqe-e-cb": "cb",
    "ualqe-e-bb": "bb",
    "ualqe-t-cb": "cb",
    "ualqe-t-bb": "bb",
}


def variant_matrix_kind(variant: str) -> Optional[str]:
    return _MATRIX_KIND[variant]


def variant_selector(variant: str) -> Optional[str]:
    return _SELECTOR[variant]


@dataclass
class AgentConfig:
    """Hyperparameters of the training loop and its reconstruction machinery."""

    variant: str = "ddpg"
    batch_size: int = 64
    p: float = 20.0
    beta: float = 0.1
    ensemble_size: int = 10
    gamma: float = 0.99
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    exploration_sigma: Optional[float] = None  # None: 0.1 * action half-range
    hidden_sizes: Tuple[int, ...] = (200, 200)
    soft_impute: SoftImputeConfig = field(default_factory=SoftImputeConfig)
    episodic_updates: bool = False
    bootstrap_at_horizon: bool = True
    replay_capacity: int = 100_000
    track_count_based: Optional[bool] = None  # None: derived from the variant
    track_bootstrapped: Optional[bool] = None

    def __post_init__(self):
        self.variant = str(self.variant).lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.p < 100.0:
            raise ValueError("p must lie in [0, 100)")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.actor_lr <= 0.0 or self.critic_lr <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay_capacity must hold at least one batch")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive")
        if not isinstance(self.soft_impute, SoftImputeConfig):
            self.soft_impute = SoftImputeConfig(**self.soft_impute)
        selector = variant_selector(self.variant)
        if selector == "cb" and self.track_count_based is False:
            raise ValueError(f"{self.variant} requires count tracking")
        if selector == "bb" and self.track_bootstrapped is False:
            raise ValueError(f"{self.variant} requires a bootstrapped ensemble")
        if self.needs_ensemble and self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2 for bootstrapped scoring")

    @property
    def needs_count_table(self) -> bool:
        return variant_selector(self.variant) == "cb" or self.track_count_based is True

    @property
    def needs_ensemble(self) -> bool:
        return variant_selector(self.variant) == "bb" or self.track_bootstrapped is True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "AgentConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(payload) - allowed
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class QMatrixPair:
    """An N x N Q-matrix plus the state/action labels of its rows/columns."""

    matrix: np.ndarray
    row_states: np.ndarray
    col_actions: np.ndarray
    kind: str  # "evaluation" or "target"


# -- grid and loss primitives --------------------------------------------------


def pair_grid(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """All (state_i, action_j) combinations, row-major in i then j."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    ns, na = states.shape[0], actions.shape[0]
    return np.hstack([np.repeat(states, na, axis=0), np.tile(actions, (ns, 1))])


def grid_values(net: MLP, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Matrix of net(state_i, action_j) values, rows indexing states."""
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    return net.forward(pair_grid(states, actions)).reshape(states.shape[0], actions.shape[0])


def _combine_targets(rewards, bootstrap, gamma, terminals, bootstrap_at_horizon):
    # Shared by every target-producing path so identical inputs give
    # bit-identical targets regardless of variant.
    if bootstrap_at_horizon:
        return rewards + gamma * bootstrap
    return rewards + gamma * ((1.0 - terminals) * bootstrap)


def _critic_mse(critic: MLP, states, actions, targets):
    x = np.hstack([states, actions])
    q, cache = critic.forward_cached(x)
    resid = q.ravel() - targets
    loss = float(np.mean(resid**2))
    upstream = (2.0 / resid.size) * resid[:, None]
    grads, _ = critic.backward(cache, upstream)
    return loss, grads


def td_loss(batch: Batch, critic: MLP, target_critic: MLP, target_actor: MLP,
            gamma: float, bootstrap_at_horizon: bool = True):
    """Mean squared TD error and its critic gradients.

    Targets bootstrap from the target critic at the target actor's next
    action and are treated as constants.
    """
    next_actions = target_actor.forward(batch.next_states)
    boot = target_critic.forward(np.hstack([batch.next_states, next_actions])).ravel()
    y = _combine_targets(batch.rewards, boot, gamma, batch.terminals, bootstrap_at_horizon)
    return _critic_mse(critic, batch.states, batch.actions, y)


def actor_gradients(batch: Batch, actor: MLP, critic: MLP):
    """Deterministic policy gradient through the critic.

    Returns (mean Q at the actor's own actions, gradients of -mean Q), so
    feeding the gradients to a minimizer ascends the critic's value surface.
    """
    acts, actor_cache = actor.forward_cached(batch.states)
    x = np.hstack([batch.states, acts])
    q, critic_cache = critic.forward_cached(x)
    n = batch.states.shape[0]
    _, input_grad = critic.backward(critic_cache, np.full((n, 1), 1.0 / n))
    dq_da = input_grad[:, batch.states.shape[1]:]
    grads, _ = actor.backward(actor_cache, -dq_da)
    return float(q.mean()), grads


def build_q_matrix(batch: Batch, kind: str, *, critic: MLP | None = None,
                   target_critic: MLP | None = None, target_actor: MLP | None = None) -> QMatrixPair:
    """Cross-product Q-matrix over the batch.

    Evaluation kind: online critic at (state_i, action_j). Target kind:
    target critic at (next_state_i, next_action_j), next actions from the
    target actor; its diagonal is produced by the same batched evaluation
    the TD-target path uses, so a removal-free reconstruction degenerates to
    the plain TD update bit-for-bit.
    """
    if kind == "evaluation":
        if critic is None:
            raise ValueError("evaluation kind needs the online critic")
        matrix = grid_values(critic, batch.states, batch.actions)
        return QMatrixPair(matrix, np.array(batch.states), np.array(batch.actions), kind)
    if kind == "target":
        if target_critic is None or target_actor is None:
            raise ValueError("target kind needs the target critic and target actor")
        next_actions = target_actor.forward(batch.next_states)
        diag = target_critic.forward(np.hstack([batch.next_states, next_actions])).ravel()
        matrix = grid_values(target_critic, batch.next_states, next_actions)
        np.fill_diagonal(matrix, diag)
        return QMatrixPair(matrix, np.array(batch.next_states), next_actions, kind)
    raise ValueError(f"unknown Q-matrix kind {kind!r}")


def choose_removal(qpair: QMatrixPair, config: AgentConfig, *,
                   rng: np.random.Generator | None = None,
                   count_table: CountTable | None = None,
                   ensemble: Iterable[MLP] | None = None) -> frozenset:
    """Entries of the Q-matrix to erase before reconstruction.

    Random selection draws the same per-row count as the uncertainty-aware
    selectors so the comparison between variants is controlled; every
    selection passes the column-retention guard.
    """
    selector = variant_selector(config.variant)
    if selector is None:
        return frozenset()
    rows, cols = qpair.matrix.shape
    k = per_row_removal_count(config.p, cols)
    if k == 0:
        return frozenset()
    if k > cols - 1:
        raise ValueError("removal percentage would empty a row")
    if selector == "random":
        if rng is None:
            raise ValueError("random selection needs a generator")
        order = np.argsort(rng.random((rows, cols)), axis=1)[:, :k]
        entries = {(r, int(c)) for r in range(rows) for c in order[r]}
        return enforce_column_retention(entries, rows, cols)
    if selector == "cb":
        if count_table is None:
            raise ValueError("count-based selection needs the count table")
        scores = uncertainty_matrix(qpair.row_states, qpair.col_actions, count_table)
    elif selector == "bb":
        if ensemble is None:
            raise ValueError("bootstrapped selection needs the ensemble")
        if hasattr(ensemble, "score_grid"):
            scorer = ensemble
        elif hasattr(ensemble, "forward_all"):
            scorer = StackedEnsembleScorer(ensemble)
        else:
            scorer = EnsembleScorer(ensemble)
        scores = uncertainty_matrix(qpair.row_states, qpair.col_actions, scorer)
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return select_top_p_per_row(scores, config.p)


def target_matrix_loss(batch: Batch, critic: MLP, reconstructed: np.ndarray,
                       gamma: float, bootstrap_at_horizon: bool = True):
    """TD loss whose bootstrap values come from the reconstructed diagonal.

    Only the diagonal of the reconstructed target matrix enters the targets;
    the targets are constants with respect to the critic parameters.
    """
    boot = np.diagonal(reconstructed).copy()
    y = _combine_targets(batch.rewards, boot, gamma, batch.terminals, bootstrap_at_horizon)
    return _critic_mse(critic, batch.states, batch.actions, y)


def _grid_forward(critic: MLP, states, actions):
    x = pair_grid(states, actions)
    values, cache = critic.forward_cached(x)
    return values.reshape(np.atleast_2d(states).shape[0], np.atleast_2d(actions).shape[0]), cache


def _consistency_from_cache(critic: MLP, matrix, cache, reconstructed):
    diff = matrix - reconstructed
    loss = float(np.mean(diff**2))
    upstream = (2.0 / diff.size) * diff.reshape(-1, 1)
    grads, _ = critic.backward(cache, upstream)
    return loss, grads


def consistency_loss(batch: Batch, critic: MLP, reconstructed: np.ndarray):
    """Mean squared gap between the live evaluation Q-matrix and its
    reconstruction, averaged over all N^2 entries.

    The reconstruction is a constant; the gradient flows into the critic
    through every live matrix entry. The caller weights the result when
    adding it to the total critic loss.
    """
    matrix, cache = _grid_forward(critic, batch.states, batch.actions)
    return _consistency_from_cache(critic, matrix, cache, reconstructed)


# -- the agent -----------------------------------------------------------------


class Agent:
    """DDPG agent with the reconstruction variants and uncertainty trackers."""

    def __init__(self, config: AgentConfig, env_spec: EnvSpec, streams: RunStreams):
        self.config = config
        self.env_spec = env_spec
        self.streams = streams
        ds, da = env_spec.state_dim, env_spec.action_dim
        hidden = list(config.hidden_sizes)
        half_range = (env_spec.action_high - env_spec.action_low) / 2.0
        center = (env_spec.action_high + env_spec.action_low) / 2.0
        self.actor = MLP([ds, *hidden, da], output_activation="tanh",
                         output_scale=half_range, output_offset=center,
                         rng=streams.init_rng("actor_init"))
        self.critic = MLP([ds + da, *hidden, 1], rng=streams.init_rng("critic_init"))
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = Adam(self.critic.parameters(), lr=config.critic_lr)
        if config.exploration_sigma is None:
            self.sigma = 0.1 * half_range
        else:
            self.sigma = np.full(da, float(config.exploration_sigma))

        self.count_table = None
        if config.needs_count_table:
            self.count_table = CountTable(
                ds, da, rng=streams.init_rng("hash_hyperplanes"),
                state_scale=env_spec.state_scale, action_scale=half_range,
            )
        self.ensemble: Optional[StackedCritics] = None
        self.ensemble_targets: Optional[StackedCritics] = None
        self.ensemble_opt: Optional[Adam] = None
        if config.needs_ensemble:
            rngs = [streams.init_rng("ensemble_init", i) for i in range(config.ensemble_size)]
            self.ensemble = StackedCritics([ds + da, *hidden, 1], config.ensemble_size, rngs)
            self.ensemble_targets = self.ensemble.copy()
            self.ensemble_opt = Adam(self.ensemble.parameters(), lr=config.critic_lr)
        self.train_steps = 0

    # -- acting ------------------------------------------------------------

    def act(self, state, explore: bool = False) -> np.ndarray:
        action = self.actor.forward(np.asarray(state, dtype=np.float64))
        if explore:
            action = action + self.sigma * self.streams.exploration.standard_normal(self.env_spec.action_dim)
        return np.clip(action, self.env_spec.action_low, self.env_spec.action_high)

    # -- training ----------------------------------------------------------

    def _removal_for(self, qpair: QMatrixPair) -> frozenset:
        return choose_removal(
            qpair, self.config,
            rng=self.streams.random_removal,
            count_table=self.count_table,
            ensemble=self.ensemble,
        )

    def train_step(self, buffer: ReplayBuffer) -> dict:
        cfg = self.config
        idx = buffer.sample_indices(cfg.batch_size, self.streams.replay_sample)
        batch = buffer.gather(idx)
        kind = variant_matrix_kind(cfg.variant)
        metrics: dict = {}

        if kind == "target":
            qpair = build_q_matrix(batch, "target", target_critic=self.target_critic,
                                   target_actor=self.target_actor)
            removal = self._removal_for(qpair)
            rec = reconstruct(qpair.matrix, removal, cfg.soft_impute)
            loss, grads = target_matrix_loss(batch, self.critic, rec.matrix,
                                             cfg.gamma, cfg.bootstrap_at_horizon)
            metrics["completion_iterations"] = rec.iterations
            metrics["completion_converged"] = rec.converged
        else:
            loss, grads = td_loss(batch, self.critic, self.target_critic, self.target_actor,
                                  cfg.gamma, cfg.bootstrap_at_horizon)
            if kind == "evaluation":
                matrix, cache = _grid_forward(self.critic, batch.states, batch.actions)
                qpair = QMatrixPair(matrix, np.array(batch.states), np.array(batch.actions), "evaluation")
                removal = self._removal_for(qpair)
                rec = reconstruct(qpair.matrix, removal, cfg.soft_impute)
                c_loss, c_grads = _consistency_from_cache(self.critic, matrix, cache, rec.matrix)
                grads = [g + cfg.beta * cg for g, cg in zip(grads, c_grads)]
                metrics["consistency_loss"] = c_loss
                metrics["completion_iterations"] = rec.iterations
                metrics["completion_converged"] = rec.converged
        metrics["critic_loss"] = loss

        self.critic_opt.step(self.critic.parameters(), grads)
        mean_q, a_grads = actor_gradients(batch, self.actor, self.critic)
        self.actor_opt.step(self.actor.parameters(), a_grads)
        metrics["mean_q"] = mean_q
        soft_update(self.target_critic, self.critic, cfg.tau)
        soft_update(self.target_actor, self.actor, cfg.tau)

        # Estimator updates come last: the removal above used pre-step state.
        if self.count_table is not None:
            self.count_table.record_batch(batch.states, batch.actions)
        if self.ensemble is not None:
            self._ensemble_td_step(batch)
        self.train_steps += 1
        return metrics

    def _ensemble_td_step(self, batch: Batch):
        cfg = self.config
        next_actions = self.target_actor.forward(batch.next_states)
        x_next = np.hstack([batch.next_states, next_actions])
        boot = self.ensemble_targets.forward_all(x_next)  # (K, N), one row per member
        y = _combine_targets(batch.rewards, boot, cfg.gamma, batch.terminals,
                             cfg.bootstrap_at_horizon)
        x = np.hstack([batch.states, batch.actions])
        self.ensemble.td_step(x, y, self.ensemble_opt)
        soft_update_stacked(self.ensemble_targets, self.ensemble, cfg.tau)

    # -- persistence ---------------------------------------------------------

    def save_bundle(self, dir_path):
        os.makedirs(dir_path, exist_ok=True)
        ensemble_size = self.ensemble.count if self.ensemble is not None else 0
        manifest = {
            "format": "agent-bundle-v1",
            "config": self.config.to_dict(),
            "train_steps": self.train_steps,
            "state_dim": self.env_spec.state_dim,
            "action_dim": self.env_spec.action_dim,
            "ensemble_size": ensemble_size,
            "has_count_table": self.count_table is not None,
        }
        with open(os.path.join(dir_path, "bundle.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        save_mlp(os.path.join(dir_path, "actor.mlp"), self.actor)
        save_mlp(os.path.join(dir_path, "critic.mlp"), self.critic)
        save_mlp(os.path.join(dir_path, "target_actor.mlp"), self.target_actor)
        save_mlp(os.path.join(dir_path, "target_critic.mlp"), self.target_critic)
        save_adam(os.path.join(dir_path, "actor.opt"), self.actor_opt)
        save_adam(os.path.join(dir_path, "critic.opt"), self.critic_opt)
        for i in range(ensemble_size):
            save_mlp(os.path.join(dir_path, f"ensemble_{i:02d}.mlp"), self.ensemble.member(i))
            save_mlp(os.path.join(dir_path, f"ensemble_target_{i:02d}.mlp"),
                     self.ensemble_targets.member(i))
            save_adam(os.path.join(dir_path, f"ensemble_{i:02d}.opt"),
                      self._member_adam_snapshot(i))
        if self.count_table is not None:
            self.count_table.save(os.path.join(dir_path, "counts.json"))

    def _member_adam_snapshot(self, k: int) -> Adam:
        # The ensemble optimizer is stacked over members; a checkpoint stores
        # one optimizer state per network, so slice out member k's moments.
        opt = self.ensemble_opt
        member_params = [p[k] for p in self.ensemble.parameters()]
        snap = Adam(member_params, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        snap.step_count = opt.step_count
        snap.m = [m[k].copy() for m in opt.m]
        snap.v = [v[k].copy() for v in opt.v]
        return snap


@dataclass
class AgentBundle:
    """Networks and trackers restored from a saved checkpoint directory."""

    config: AgentConfig
    actor: MLP
    critic: MLP
    target_actor: MLP
    target_critic: MLP
    actor_opt: Adam
    critic_opt: Adam
    ensemble: List[MLP]
    ensemble_targets: List[MLP]
    count_table: Optional[CountTable]
    train_steps: int


def load_bundle(dir_path) -> AgentBundle:
    with open(os.path.join(dir_path, "bundle.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "agent-bundle-v1":
        raise ValueError(f"{dir_path}: not an agent bundle")
    config = AgentConfig.from_dict(manifest["config"])
    ensemble = []
    ensemble_targets = []
    for i in range(int(manifest["ensemble_size"])):
        ensemble.append(load_mlp(os.path.join(dir_path, f"ensemble_{i:02d}.mlp")))
        ensemble_targets.append(load_mlp(os.path.join(dir_path, f"ensemble_target_{i:02d}.mlp")))
    count_table = None
    if manifest["has_count_table"]:
        count_table = CountTable.load(os.path.join(dir_path, "counts.json"))
    return AgentBundle(
        config=config,
        actor=load_mlp(os.path.join(dir_path, "actor.mlp")),
        critic=load_mlp(os.path.join(dir_path, "critic.mlp")),
        target_actor=load_mlp(os.path.join(dir_path, "target_actor.mlp")),
        target_critic=load_mlp(os.path.join(dir_path, "target_critic.mlp")),
        actor_opt=load_adam(os.path.join(dir_path, "actor.opt")),
        critic_opt=load_adam(os.path.join(dir_path, "critic.opt")),
        ensemble=ensemble,
        ensemble_targets=ensemble_targets,
        count_table=count_table,
        train_steps=int(manifest["train_steps"]),
    )
