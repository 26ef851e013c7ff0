"""Desk-scale control environments with analytic oracles, plus replay storage.

Two continuous tasks are provided. The LQR task has linear dynamics and a
quadratic cost, so its optimal value function is available exactly through
the discounted Riccati recursion and serves as a ground-truth oracle. The
pendulum task is the classic torque-limited swing-up with the de-facto
benchmark constants (these numbers are a community convention, not derived
here). Finite tabular MDPs with exact value iteration round out the oracle
set. Episodes terminate only at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "EnvSpec",
    "LqrEnv",
    "PendulumEnv",
    "make_env",
    "riccati_value_matrix",
    "lqr_optimal_gain",
    "lqr_optimal_q",
    "lqr_q_grid",
    "lqr_oracle_return",
    "FiniteMdp",
    "random_mdp",
    "value_iteration",
    "Batch",
    "ReplayBuffer",
]


@dataclass(frozen=True)
class EnvSpec:
    """Dimensions, bounds, horizon, and discount of a task.

    ``state_scale`` gives a nominal per-dimension magnitude of observations,
    used to normalize inputs for hashing.
    """

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    discount: float
    state_scale: np.ndarray

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be strictly below action_high")


class LqrEnv:
    """Linear dynamics s' = A s + B a with reward -(s'Qs + a'Ra).

    Initial states are uniform in [-init_bound, init_bound]^d. Actions are
    clipped to +-action_bound before the dynamics apply.
    """

    name = "lqr"

    def __init__(self, a=0.9, b=0.5, state_cost=1.0, action_cost=0.1,
                 horizon=50, discount=0.99, action_bound=2.0, init_bound=1.0,
                 state_scale=2.0):
        self.a_mat = np.atleast_2d(np.asarray(a, dtype=np.float64))
        self.b_mat = np.atleast_2d(np.asarray(b, dtype=np.float64))
        self.state_cost = np.atleast_2d(np.asarray(state_cost, dtype=np.float64))
        self.action_cost = np.atleast_2d(np.asarray(action_cost, dtype=np.float64))
        ds, da = self.b_mat.shape
        if self.a_mat.shape != (ds, ds):
            raise ValueError("A must be square and match B's row count")
        if self.state_cost.shape != (ds, ds) or self.action_cost.shape != (da, da):
            raise ValueError("cost matrices must match the state/action dims")
        self.init_bound = float(init_bound)
        self.spec = EnvSpec(
            state_dim=ds,
            action_dim=da,
            action_low=np.full(da, -float(action_bound)),
            action_high=np.full(da, float(action_bound)),
            horizon=int(horizon),
            discount=float(discount),
            state_scale=np.full(ds, float(state_scale)),
        )
        self._state = np.zeros(ds)
        self._t = 0
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = rng.uniform(-self.init_bound, self.init_bound, size=self.spec.state_dim)
        self._t = 0
        self._done = False
        return self._state.copy()

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        action = np.clip(action, self.spec.action_low, self.spec.action_high)
        s = self._state
        reward = -float(s @ self.state_cost @ s + action @ self.action_cost @ action)
        self._state = self.a_mat @ s + self.b_mat @ action
        self._t += 1
        self._done = self._t >= self.spec.horizon
        return self._state.copy(), reward, self._done


def riccati_value_matrix(env: LqrEnv, tol: float = 1e-10, max_iterations: int = 1_000_000) -> np.ndarray:
    """Fixed point P of the discounted Riccati recursion, so V*(s) = -s'Ps."""
    cached = getattr(env, "_riccati_cache", None)
    if cached is not None and cached[0] == tol:
        return cached[1]
    a, b = env.a_mat, env.b_mat
    q, r = env.state_cost, env.action_cost
    g = env.spec.discount
    p = q.copy()
    for _ in range(max_iterations):
        btpb = r + g * b.T @ p @ b
        btpa = b.T @ p @ a
        # pinv keeps the degenerate B = 0 / R = 0 case well defined.
        p_next = q + g * a.T @ p @ a - g * g * a.T @ p @ b @ np.linalg.pinv(btpb) @ btpa
        if np.max(np.abs(p_next - p)) < tol:
            env._riccati_cache = (tol, p_next)
            return p_next
        p = p_next
    raise RuntimeError("Riccati recursion did not reach the requested tolerance")


def lqr_optimal_gain(env: LqrEnv) -> np.ndarray:
    """Gain K of the optimal policy a* = -K s."""
    p = riccati_value_matrix(env)
    g = env.spec.discount
    b, a = env.b_mat, env.a_mat
    return np.linalg.pinv(env.action_cost + g * b.T @ p @ b) @ (g * b.T @ p @ a)


def lqr_optimal_q(env: LqrEnv, state, action) -> float:
    """Exact optimal state-action value under the discounted criterion."""
    if not isinstance(env, LqrEnv):
        raise TypeError("the exact value oracle is defined for LqrEnv only")
    p = riccati_value_matrix(env)
    s = np.asarray(state, dtype=np.float64).reshape(env.spec.state_dim)
    a = np.asarray(action, dtype=np.float64).reshape(env.spec.action_dim)
    reward = -float(s @ env.state_cost @ s + a @ env.action_cost @ a)
    nxt = env.a_mat @ s + env.b_mat @ a
    return reward - env.spec.discount * float(nxt @ p @ nxt)


def lqr_q_grid(env: LqrEnv, states, actions) -> np.ndarray:
    """Vectorized :func:`lqr_optimal_q` over a states x actions grid."""
    p = riccati_value_matrix(env)
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    s_cost = np.einsum("id,de,ie->i", s, env.state_cost, s)
    a_cost = np.einsum("jd,de,je->j", a, env.action_cost, a)
    ns = s @ env.a_mat.T  # (n, ds)
    na = a @ env.b_mat.T  # (m, ds)
    # -(next' P next) expanded over the cross terms of ns_i + na_j.
    ss = np.einsum("id,de,ie->i", ns, p, ns)
    aa = np.einsum("jd,de,je->j", na, p, na)
    cross = ns @ p @ na.T
    g = env.spec.discount
    return (
        -s_cost[:, None]
        - a_cost[None, :]
        - g * (ss[:, None] + aa[None, :] + 2.0 * cross)
    )


def lqr_oracle_return(env: LqrEnv, initial_state=None):
    """Undiscounted episode return of the Riccati-gain policy.

    With ``initial_state`` given, returns that start's exact return; without
    it, returns the expectation over the uniform initial distribution. Valid
    while the gain policy stays inside the action bounds, which holds for the
    default constants.
    """
    k = lqr_optimal_gain(env)
    m = env.a_mat - env.b_mat @ k
    c = env.state_cost + k.T @ env.action_cost @ k
    w = np.zeros_like(env.state_cost)
    step = np.eye(env.spec.state_dim)
    for _ in range(env.spec.horizon):
        w = w + step.T @ c @ step
        step = m @ step
    if initial_state is not None:
        s0 = np.asarray(initial_state, dtype=np.float64).reshape(env.spec.state_dim)
        return -float(s0 @ w @ s0)
    # E[s0 s0'] of U[-b, b]^d is (b^2 / 3) I.
    cov = (env.init_bound**2 / 3.0) * np.eye(env.spec.state_dim)
    return -float(np.trace(w @ cov))


class PendulumEnv:
    """Torque-limited swing-up of a rigid rod pendulum.

    Angle 0 is hanging down (the stable equilibrium); the goal is the upright
    position at +-pi. Observations are (cos angle, sin angle, angular
    velocity). Constants follow the common classic-control benchmark:
    gravity 10, mass 1, length 1, dt 0.05, torque bound +-2, speed clamp
    +-8, horizon 200, reward -(upright_error^2 + 0.1 vel^2 + 0.001 torque^2),
    integrated by the semi-implicit Euler step.
    """

    name = "pendulum"

    def __init__(self, gravity=10.0, mass=1.0, length=1.0, dt=0.05,
                 torque_bound=2.0, max_speed=8.0, horizon=200, discount=0.99):
        self.gravity = float(gravity)
        self.mass = float(mass)
        self.length = float(length)
        self.dt = float(dt)
        self.max_speed = float(max_speed)
        self.spec = EnvSpec(
            state_dim=3,
            action_dim=1,
            action_low=np.array([-float(torque_bound)]),
            action_high=np.array([float(torque_bound)]),
            horizon=int(horizon),
            discount=float(discount),
            state_scale=np.array([1.0, 1.0, float(max_speed)]),
        )
        self.theta = 0.0
        self.theta_dot = 0.0
        self._t = 0
        self._done = True

    @staticmethod
    def _wrap(angle: float) -> float:
        return float((angle + np.pi) % (2.0 * np.pi) - np.pi)

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.theta = float(rng.uniform(-np.pi, np.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))
        self._t = 0
        self._done = False
        return self._obs()

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64).reshape(1)
        if not np.all(np.isfinite(action)):
            raise ValueError("action must be finite")
        u = float(np.clip(action, self.spec.action_low, self.spec.action_high)[0])
        upright_error = self._wrap(self.theta - np.pi)
        reward = -(upright_error**2 + 0.1 * self.theta_dot**2 + 0.001 * u**2)
        accel = (
            -1.5 * self.gravity / self.length * np.sin(self.theta)
            + 3.0 / (self.mass * self.length**2) * u
        )
        self.theta_dot = float(np.clip(self.theta_dot + accel * self.dt, -self.max_speed, self.max_speed))
        self.theta = self.theta + self.theta_dot * self.dt
        self._t += 1
        self._done = self._t >= self.spec.horizon
        return self._obs(), float(reward), self._done

    def energy(self) -> float:
        """Kinetic plus potential energy of the rod (zero when hanging at rest)."""
        inertia = self.mass * self.length**2 / 3.0
        height = 0.5 * self.length * (1.0 - np.cos(self.theta))
        return 0.5 * inertia * self.theta_dot**2 + self.mass * self.gravity * height


_ENV_FACTORIES = {"lqr": LqrEnv, "pendulum": PendulumEnv}


def make_env(name: str, **kwargs):
    try:
        factory = _ENV_FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(_ENV_FACTORIES)}")
    return factory(**kwargs)


# -- finite MDPs --------------------------------------------------------------


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP: transitions (S, A, S), rewards (S, A), and a discount."""

    transitions: np.ndarray
    rewards: np.ndarray
    discount: float

    def __post_init__(self):
        p, r = self.transitions, self.rewards
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ValueError("transition/reward table shapes are inconsistent")
        if not np.allclose(p.sum(axis=2), 1.0, atol=1e-9) or np.any(p < 0.0):
            raise ValueError("transition rows must be probability distributions")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")


def random_mdp(num_states: int, num_actions: int, discount: float,
               rng: np.random.Generator) -> FiniteMdp:
    p = rng.random((num_states, num_actions, num_states))
    p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    return FiniteMdp(transitions=p, rewards=r, discount=discount)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iterations: int = 1_000_000) -> np.ndarray:
    """Exact optimal Q table, iterated to a sup-norm residual below tol."""
    q = np.zeros_like(mdp.rewards)
    for _ in range(max_iterations):
        q_next = mdp.rewards + mdp.discount * mdp.transitions @ q.max(axis=1)
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next
    raise RuntimeError("value iteration did not reach the requested tolerance")


# -- replay storage ------------------------------------------------------------


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions backed by preallocated arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        capacity = int(capacity)
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity)
        self.insert_count = 0

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def add(self, state, action, reward, next_state, terminal: bool):
        i = self.insert_count % self.capacity
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = 1.0 if terminal else 0.0
        self.insert_count += 1

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        size = len(self)
        if n > size:
            raise ValueError(f"cannot sample {n} transitions from a buffer of {size}")
        return rng.choice(size, size=n, replace=False)

    def gather(self, indices) -> Batch:
        idx = np.asarray(indices, dtype=np.intp)
        return Batch(
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            terminals=self.terminals[idx],
        )

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(n, rng))

    def state_pool(self) -> np.ndarray:
        return self.states[: len(self)]

    def action_pool(self) -> np.ndarray:
        return self.actions[: len(self)]

    def save(self, path):
        np.savez(
            path,
            states=self.states,
            actions=self.actions,
            rewards=self.rewards,
            next_states=self.next_states,
            terminals=self.terminals,
            insert_count=np.array(self.insert_count),
            capacity=np.array(self.capacity),
        )

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            capacity = int(data["capacity"])
            buf = cls(capacity, data["states"].shape[1], data["actions"].shape[1])
            buf.states[...] = data["states"]
            buf.actions[...] = data["actions"]
            buf.rewards[...] = data["rewards"]
            buf.next_states[...] = data["next_states"]
            buf.terminals[...] = data["terminals"]
            buf.insert_count = int(data["insert_count"])
        return buf
