"""Small analytic environments and the rollout loop.

Both environments are pure functions of ``(seed, episode)``: initial states
and per-step noise come from a Philox stream keyed by the environment seed
and the episode index, so any worker reproduces any episode on its own.

* :class:`LQREnv` is a discrete-time linear-quadratic regulator whose optimal
  linear feedback is known through the Riccati equation.
* :class:`SparseOracleEnv` regresses a sparse target matrix from i.i.d.
  Gaussian inputs. Its best boolean edge genome is exactly the target's
  support, which makes architecture recovery measurable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import BadSupport, ConfigError, DimensionMismatch, NonFiniteActivation
from .normalizer import RunningNormalizer
from .policy import PolicyGraph
from .rng import episode_generator


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    horizon: int = 1000
    alive_bonus_per_step: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("dimensions must be >= 1")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    total_training_reward: float
    total_eval_reward: float
    steps_taken: int
    normalizer_partial: RunningNormalizer | None = None


class Environment:
    """Base class. Subclasses fill in dynamics and rewards."""

    name = "base"
    open_loop = False

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        """Return ``(next_state, reward)`` with reward excluding any alive bonus."""
        raise NotImplementedError

    def policy_cost(self, graph: PolicyGraph) -> float:
        """Per-step cost charged for the policy's structure (default: none)."""
        return 0.0

    def params(self) -> dict[str, Any]:
        return {}

    def to_config(self) -> dict[str, Any]:
        params = self.params()
        params.update(
            horizon=self.spec.horizon,
            alive_bonus=self.spec.alive_bonus_per_step,
            seed=self.spec.seed,
        )
        return {"name": self.name, "params": params}


def with_alive_bonus(env: Environment, bonus: float) -> Environment:
    """Copy of ``env`` that reports ``bonus`` per survived step in eval rewards."""
    clone = object.__new__(type(env))
    clone.__dict__.update(env.__dict__)
    clone.spec = replace(env.spec, alive_bonus_per_step=float(bonus))
    return clone


def _as_matrix(value, shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


class LQREnv(Environment):
    """``s' = A s + B a + noise``, reward ``-(s'Qs + a'Ra)``.

    States are clipped to ``[-state_clip, state_clip]`` so unstable policies
    yield large but finite costs.
    """

    name = "lqr"

    def __init__(
        self,
        A,
        B,
        Q,
        R,
        noise_scale: float = 0.0,
        horizon: int = 1000,
        seed: int = 0,
        alive_bonus: float = 0.0,
        initial_state=None,
        state_clip: float = 1e6,
    ):
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionMismatch("A must be square")
        n = A.shape[0]
        B = np.asarray(B, dtype=float)
        if B.ndim != 2 or B.shape[0] != n:
            raise DimensionMismatch(f"B must have {n} rows")
        m = B.shape[1]
        super().__init__(EnvSpec(n, m, horizon, alive_bonus, seed))
        self.A, self.B = A, B
        self.Q = _as_matrix(Q, (n, n), "Q")
        self.R = _as_matrix(R, (m, m), "R")
        self.noise_scale = float(noise_scale)
        self.state_clip = float(state_clip)
        self.fixed_initial_state = None if initial_state is None else _as_matrix(initial_state, (n,), "initial_state")

    @classmethod
    def default(cls, seed: int = 0, state_dim: int = 6, action_dim: int = 3, **kwargs) -> LQREnv:
        """Random stable instance: spectral radius 0.9, Q = I, R = 0.1 I."""
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((state_dim, state_dim))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        B = rng.standard_normal((state_dim, action_dim)) / np.sqrt(action_dim)
        return cls(A, B, np.eye(state_dim), 0.1 * np.eye(action_dim), seed=seed, **kwargs)

    def initial_state(self, rng):
        if self.fixed_initial_state is not None:
            return self.fixed_initial_state.copy()
        return rng.standard_normal(self.spec.state_dim)

    def step(self, state, action, rng):
        reward = -(state @ self.Q @ state + action @ self.R @ action)
        nxt = self.A @ state + self.B @ action
        if self.noise_scale:
            nxt = nxt + self.noise_scale * rng.standard_normal(self.spec.state_dim)
        return np.clip(nxt, -self.state_clip, self.state_clip), float(reward)

    def params(self):
        out = {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "Q": self.Q.tolist(),
            "R": self.R.tolist(),
            "noise_scale": self.noise_scale,
            "state_clip": self.state_clip,
        }
        if self.fixed_initial_state is not None:
            out["initial_state"] = self.fixed_initial_state.tolist()
        return out


def lqr_env(dims=(6, 3), A=None, B=None, Q=None, R=None, noise_scale: float = 0.0, **kwargs) -> LQREnv:
    if A is None and B is None and Q is None and R is None:
        return LQREnv.default(state_dim=dims[0], action_dim=dims[1], noise_scale=noise_scale, **kwargs)
    if any(x is None for x in (A, B, Q, R)):
        raise DimensionMismatch("A, B, Q and R must be given together")
    env = LQREnv(A, B, Q, R, noise_scale=noise_scale, **kwargs)
    if (env.spec.state_dim, env.spec.action_dim) != tuple(dims):
        raise DimensionMismatch(f"matrices imply dims {(env.spec.state_dim, env.spec.action_dim)}, got {dims}")
    return env


def riccati_value_iteration(A, B, Q, R, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Fixed point of the discrete algebraic Riccati equation.

    Returns ``(P, K)`` with the optimal feedback ``a = -K s`` and optimal
    infinite-horizon cost ``s' P s`` from state ``s``.
    """
    A, B, Q, R = (np.asarray(x, dtype=float) for x in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        gain = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ (A - B @ gain)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol * max(1.0, np.max(np.abs(P))):
            P = P_next
            break
        P = P_next
    else:
        raise RuntimeError("Riccati iteration did not converge")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


class SparseOracleEnv(Environment):
    """Open-loop regression onto a sparse linear target.

    Each step draws ``x ~ N(0, I)`` and pays ``-||x W* - pi(x)||^2`` plus a
    fixed ``edge_cost`` per active policy edge, plus an optional constant
    ``reward_offset`` per step. Inputs do not depend on past
    actions, so a whole episode is evaluated as one batch.
    """

    name = "sparse_oracle"
    open_loop = True

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        true_support: Sequence[Sequence[int]] | None = None,
        noise_scale: float = 0.0,
        horizon: int = 20,
        seed: int = 0,
        alive_bonus: float = 0.0,
        edge_cost: float = 0.01,
        reward_offset: float = 0.0,
        support_size: int | None = None,
        target_weights=None,
    ):
        super().__init__(EnvSpec(state_dim, action_dim, horizon, alive_bonus, seed))
        rng = np.random.default_rng([seed, 0x5EED])
        n_edges = state_dim * action_dim
        if true_support is None and target_weights is None:
            if support_size is None or not 0 <= support_size <= n_edges:
                raise BadSupport("give true_support, target_weights, or 0 <= support_size <= |S||A|")
            flat = np.sort(rng.choice(n_edges, size=support_size, replace=False))
            true_support = [(int(e // action_dim), int(e % action_dim)) for e in flat]
        if target_weights is not None:
            W = _as_matrix(target_weights, (state_dim, action_dim), "target_weights")
            support = {(int(i), int(j)) for i, j in zip(*np.nonzero(W))}
            if true_support is not None and {tuple(map(int, e)) for e in true_support} != support:
                raise BadSupport("true_support disagrees with the nonzero pattern of target_weights")
        else:
            support = set()
            for e in true_support:
                if len(e) != 2:
                    raise BadSupport(f"support entries are (state, action) pairs, got {e!r}")
                i, j = int(e[0]), int(e[1])
                if not (0 <= i < state_dim and 0 <= j < action_dim):
                    raise BadSupport(f"edge ({i}, {j}) outside a {state_dim}x{action_dim} linear policy")
                if (i, j) in support:
                    raise BadSupport(f"duplicate support edge ({i}, {j})")
                support.add((i, j))
            magnitude = rng.uniform(0.5, 1.5, size=(state_dim, action_dim))
            sign = rng.choice([-1.0, 1.0], size=(state_dim, action_dim))
            W = np.zeros((state_dim, action_dim))
            for i, j in support:
                W[i, j] = magnitude[i, j] * sign[i, j]
        self.true_support = tuple(sorted(support))
        self.target = W
        self.noise_scale = float(noise_scale)
        self.edge_cost = float(edge_cost)
        self.reward_offset = float(reward_offset)

    def support_mask(self) -> np.ndarray:
        """Boolean vector over linear-policy edges in row-major (state, action) order."""
        mask = np.zeros(self.spec.state_dim * self.spec.action_dim, dtype=bool)
        for i, j in self.true_support:
            mask[i * self.spec.action_dim + j] = True
        return mask

    def episode_inputs(self, rng: np.random.Generator):
        T, S, A = self.spec.horizon, self.spec.state_dim, self.spec.action_dim
        states = rng.standard_normal((T, S))
        noise = rng.standard_normal((T, A)) if self.noise_scale else None
        return states, noise

    def batch_rewards(self, states, actions, noise) -> np.ndarray:
        target = states @ self.target
        if noise is not None:
            target = target + self.noise_scale * noise
        return self.reward_offset - np.sum((target - actions) ** 2, axis=1)

    def initial_state(self, rng):
        return self.episode_inputs(rng)[0][0]

    def step(self, state, action, rng):
        target = state @ self.target
        if self.noise_scale:
            target = target + self.noise_scale * rng.standard_normal(self.spec.action_dim)
        nxt = rng.standard_normal(self.spec.state_dim)
        return nxt, float(self.reward_offset - np.sum((target - action) ** 2))

    def policy_cost(self, graph: PolicyGraph) -> float:
        return self.edge_cost * graph.num_edges

    def params(self):
        return {
            "state_dim": self.spec.state_dim,
            "action_dim": self.spec.action_dim,
            "target_weights": self.target.tolist(),
            "noise_scale": self.noise_scale,
            "edge_cost": self.edge_cost,
            "reward_offset": self.reward_offset,
        }


def sparse_oracle_env(state_dim: int, action_dim: int, true_support=None, noise_scale: float = 0.0, **kwargs):
    return SparseOracleEnv(state_dim, action_dim, true_support, noise_scale, **kwargs)


def _totals(env: Environment, rewards: np.ndarray, steps: int) -> tuple[float, float]:
    training = float(np.sum(rewards))
    return training, training + env.spec.alive_bonus_per_step * steps


def _partial(states: np.ndarray, dim: int) -> RunningNormalizer:
    mean = states.mean(axis=0)
    return RunningNormalizer(dim, len(states), mean, ((states - mean) ** 2).sum(axis=0))


def rollout(
    env: Environment,
    graph: PolicyGraph,
    normalizer: RunningNormalizer | None = None,
    training: bool = False,
    episode: int = 0,
) -> Trajectory:
    """Run one episode with a read-only normalizer snapshot.

    When ``training`` is set the raw states visited are summarized into a
    fresh accumulator returned as ``normalizer_partial``; the snapshot itself
    is never modified.
    """
    S, A = env.spec.state_dim, env.spec.action_dim
    if graph.state_dim != S or graph.action_dim != A:
        raise DimensionMismatch(f"policy is {graph.state_dim}->{graph.action_dim}, env is {S}->{A}")
    rng = episode_generator(env.spec.seed, episode)
    cost = env.policy_cost(graph)
    T = env.spec.horizon

    if env.open_loop:
        states, noise = env.episode_inputs(rng)
        inputs = normalizer.normalize(states) if normalizer is not None else states
        try:
            actions = graph.forward(inputs)
        except NonFiniteActivation as exc:
            for t in range(T):
                try:
                    graph.forward(inputs[t])
                except NonFiniteActivation:
                    exc.step = t
                    break
            raise
        with np.errstate(over="ignore", invalid="ignore"):
            rewards = env.batch_rewards(states, actions, noise) - cost
    else:
        states = np.empty((T, S))
        actions = np.empty((T, A))
        rewards = np.empty(T)
        s = env.initial_state(rng)
        for t in range(T):
            states[t] = s
            z = normalizer.normalize(s) if normalizer is not None else s
            try:
                a = graph.forward(z)
            except NonFiniteActivation as exc:
                exc.step = t
                raise
            actions[t] = a
            with np.errstate(over="ignore", invalid="ignore"):
                s, r = env.step(s, a, rng)
            rewards[t] = r - cost
    if not np.all(np.isfinite(rewards)):
        bad = int(np.flatnonzero(~np.isfinite(rewards))[0])
        raise NonFiniteActivation("reward is not finite", step=bad)
    training_reward, eval_reward = _totals(env, rewards, T)
    partial = _partial(states, S) if training else None
    return Trajectory(states, actions, rewards, training_reward, eval_reward, T, partial)


ENVIRONMENTS = {"lqr": LQREnv, "sparse_oracle": SparseOracleEnv}


def make_env(config: dict[str, Any]) -> Environment:
    """Build an environment from ``{"name": ..., "params": {...}}``."""
    name = config.get("name")
    params = dict(config.get("params", {}))
    try:
        if name == "lqr":
            if any(key in params for key in ("A", "B", "Q", "R")):
                return LQREnv(**params)
            return LQREnv.default(**params)
        if name == "sparse_oracle":
            return SparseOracleEnv(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for environment {name!r}: {exc}") from None
    raise ConfigError(f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}")
