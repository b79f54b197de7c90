"""Sampling-based model predictive control.

At every environment step the planner optimizes an H-step action sequence
with the cross-entropy method against a rollout model and executes only the
first action. The rollout model is either a learned latent model or a
ground-truth wrapper around the pendulum dynamics, so the same planner
serves both the learned-model policy and the oracle baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .env import EnvConfig, pendulum_step_batch, reward_fn_batch


@runtime_checkable
class RolloutModel(Protocol):
    """Pure pair of maps: observation -> rollout state, (states, actions) -> next."""

    def rollout_init(self, obs: np.ndarray) -> np.ndarray: ...

    def rollout_step(self, states: np.ndarray, actions: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]: ...


class GroundTruthPendulumModel:
    """Oracle rollout model: the true controlled-pendulum dynamics and reward.

    Distractor pendulums never influence the reward, so rollouts track only
    the controlled pendulum, recovered from the first observation triple.
    """

    def __init__(self, config: EnvConfig):
        self.config = config

    def rollout_init(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64).reshape(-1)
        theta = np.arctan2(obs[0], obs[1])
        return np.array([theta, obs[2]])

    def rollout_step(self, states: np.ndarray, actions: np.ndarray):
        torque = actions[:, 0]
        rewards = reward_fn_batch(states[:, 0], states[:, 1], torque)
        theta, theta_dot = pendulum_step_batch(states[:, 0], states[:, 1], torque, self.config)
        return np.column_stack([theta, theta_dot]), rewards


@dataclass(frozen=True)
class CemConfig:
    horizon: int = 12
    n_samples: int = 1000
    n_elites: int = 100
    n_iterations: int = 5
    init_std: float = 0.5          # fraction of the action range
    std_floor: float = 0.05        # fraction of the action range
    action_low: float = -2.0
    action_high: float = 2.0
    gamma: float = 0.99
    seed: int = 0
    # Off by default: on the swing-up task a warm-started plan anchors CEM in
    # a hold-still local optimum near the hanging state, while re-planning
    # from scratch reliably finds pumping sequences at identical budget.
    warm_start: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 1 <= self.n_elites <= self.n_samples:
            raise ValueError(
                f"need 1 <= n_elites <= n_samples, got {self.n_elites}/{self.n_samples}")
        if self.n_iterations < 1:
            raise ValueError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if not self.action_low < self.action_high:
            raise ValueError(
                f"action_low must be < action_high, got [{self.action_low}, {self.action_high}]")

    @property
    def action_range(self) -> float:
        return self.action_high - self.action_low


@dataclass
class Plan:
    """Per-step diagonal Gaussian over action sequences."""

    mean: np.ndarray  # H x d_a
    std: np.ndarray   # H x d_a

    def shifted(self, floor: float) -> "Plan":
        """Advance one step: drop the first row, repeat the last, floor the std."""
        mean = np.vstack([self.mean[1:], self.mean[-1:]])
        std = np.maximum(np.vstack([self.std[1:], self.std[-1:]]), floor)
        return Plan(mean=mean, std=std)


def evaluate_sequences(model: RolloutModel, obs, sequences: np.ndarray,
                       gamma: float) -> np.ndarray:
    """Discounted H-step return of each candidate action sequence.

    The observation is mapped to a rollout state once and shared across all
    sequences; every step advances the whole batch together.
    """
    sequences = np.asarray(sequences, dtype=np.float64)
    if sequences.ndim != 3:
        raise ValueError(f"sequences must be (K, H, d_a), got shape {sequences.shape}")
    n_seq, horizon = sequences.shape[0], sequences.shape[1]
    state0 = np.asarray(model.rollout_init(obs), dtype=np.float64).reshape(-1)
    states = np.tile(state0, (n_seq, 1))
    kernel_factory = getattr(model, "rollout_kernel", None)
    step = kernel_factory(n_seq) if kernel_factory is not None else model.rollout_step
    returns = np.zeros(n_seq)
    discount = 1.0
    for h in range(horizon):
        states, rewards = step(states, sequences[:, h, :])
        returns += discount * rewards
        discount *= gamma
    return returns


def cem_plan(model: RolloutModel, obs, config: CemConfig,
             prev_plan: Plan | None = None,
             rng: np.random.Generator | None = None,
             d_a: int = 1) -> tuple[np.ndarray, Plan, float]:
    """One cross-entropy planning call.

    Returns the first action of the final elite mean (clipped to bounds),
    the final sampling distribution for warm starting, and the best return
    ever evaluated during this call.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    low, high = config.action_low, config.action_high
    floor = config.std_floor * config.action_range
    if config.warm_start and prev_plan is not None:
        plan = prev_plan.shifted(floor)
        mean, std = plan.mean.copy(), plan.std.copy()
    else:
        mean = np.zeros((config.horizon, d_a))
        std = np.full((config.horizon, d_a), config.init_std * config.action_range / 2.0)

    best_return = -np.inf
    for _ in range(config.n_iterations):
        noise = rng.standard_normal((config.n_samples, config.horizon, d_a))
        samples = np.clip(mean[None] + std[None] * noise, low, high)
        returns = evaluate_sequences(model, obs, samples, config.gamma)
        if not np.all(np.isfinite(returns)):
            bad = int(np.flatnonzero(~np.isfinite(returns))[0])
            raise FloatingPointError(
                f"non-finite return {returns[bad]} for sampled sequence {bad}: "
                f"{samples[bad].tolist()}")
        elite_idx = np.argpartition(-returns, config.n_elites - 1)[:config.n_elites]
        elites = samples[elite_idx]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), floor)
        best_return = max(best_return, float(returns[elite_idx].max()))
    action = np.clip(mean[0], low, high)
    return action, Plan(mean=mean, std=std), best_return


class MpcPolicy:
    """Stateful re-planning policy: plan H steps, execute the first action.

    With warm starting enabled the previous plan seeds the next call and a
    persistent generator drives the sampling; without it every call plans
    from scratch with a generator freshly seeded from the config, so the
    output is independent of call history.
    """

    def __init__(self, model: RolloutModel, config: CemConfig, d_a: int = 1):
        self.model = model
        self.config = config
        self.d_a = d_a
        self._rng = np.random.default_rng(config.seed)
        self._plan: Plan | None = None
        self.last_best_return: float = -np.inf

    def reset(self) -> None:
        self._plan = None

    def __call__(self, obs) -> np.ndarray:
        if self.config.warm_start:
            rng = self._rng
            prev = self._plan
        else:
            rng = np.random.default_rng(self.config.seed)
            prev = None
        action, plan, best = cem_plan(self.model, obs, self.config,
                                      prev_plan=prev, rng=rng, d_a=self.d_a)
        self._plan = plan
        self.last_best_return = best
        return action


def mpc_policy(model: RolloutModel, config: CemConfig, d_a: int = 1) -> MpcPolicy:
    """Build the re-planning policy for a rollout model."""
    return MpcPolicy(model, config, d_a=d_a)
