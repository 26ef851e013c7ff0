"""Low-rank Q-matrix analytics and uncertainty-aware value estimation.

The package bundles dense matrix-rank primitives, Soft-Impute completion,
count-based and ensemble uncertainty quantifiers, a small MLP with exact
gradients, desk-scale control environments with analytic oracles, a DDPG
agent with six Q-matrix reconstruction variants, and a seeded experiment
harness with a CLI.
"""

from .linalg import SvdResult, approximate_rank, average_approximate_rank, nuclear_norm, svd
from .completion import CompletionResult, ObservationMask, SoftImputeConfig, project, reconstruct, soft_impute
from .uncertainty import (
    CountTable,
    EnsembleScorer,
    count_based_uncertainty,
    ensemble_uncertainty,
    hash_state_action,
    record_visit,
    select_top_p_per_row,
    uncertainty_matrix,
)
from .nn import MLP, Adam, load_mlp, save_mlp, soft_update
from .envs import (
    EnvSpec,
    FiniteMdp,
    LqrEnv,
    PendulumEnv,
    ReplayBuffer,
    lqr_optimal_q,
    make_env,
    random_mdp,
    value_iteration,
)
from .agent import Agent, AgentConfig, QMatrixPair, VARIANTS, build_q_matrix, choose_removal
from .harness import ExperimentConfig, RankScanConfig, correlate, rank_scan, run_experiment, spearman_rho

__version__ = "0.1.0"
