"""Brute-force verification of the planning-performance bound.

On small deterministic MDPs everything is enumerable: exact n-step optimal
Q-functions by dynamic programming, the worst-case reward-prediction error
``epsilon`` over all fixed-horizon trajectories, and the gap between
planning with a tabular latent model and planning with the truth.

Two bounds are tracked. The Cauchy-Schwarz-derived bound (gap <= H*eps,
policy suboptimality <= 2*H*eps) always holds and is asserted by callers;
the tighter sqrt(H)-scaled variant is recorded per instance but known to be
violated by a uniform reward offset, so it is reported, never asserted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product

import numpy as np

from .env import EnvConfig, PendulumState, angle_normalize, pendulum_step, reward_fn


@dataclass(frozen=True)
class DiscreteMdp:
    """Deterministic tabular MDP: next-state and reward tables."""

    next_state: np.ndarray  # (n_states, n_actions) int
    reward: np.ndarray      # (n_states, n_actions) float
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "next_state", np.asarray(self.next_state, dtype=np.int64))
        object.__setattr__(self, "reward", np.asarray(self.reward, dtype=np.float64))
        if self.next_state.shape != self.reward.shape or self.next_state.ndim != 2:
            raise ValueError("next_state and reward must share shape (n_states, n_actions)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.next_state.min() < 0 or self.next_state.max() >= self.n_states:
            raise ValueError("next_state entries out of range")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]


@dataclass(frozen=True)
class TabularLatentModel:
    """Tabular counterpart of (encoder, latent dynamics, latent reward)."""

    encode_map: np.ndarray     # (n_states,) int -> latent index
    latent_next: np.ndarray    # (n_latents, n_actions) int
    latent_reward: np.ndarray  # (n_latents, n_actions) float

    def __post_init__(self):
        object.__setattr__(self, "encode_map", np.asarray(self.encode_map, dtype=np.int64))
        object.__setattr__(self, "latent_next", np.asarray(self.latent_next, dtype=np.int64))
        object.__setattr__(self, "latent_reward", np.asarray(self.latent_reward, dtype=np.float64))
        if self.latent_next.shape != self.latent_reward.shape or self.latent_next.ndim != 2:
            raise ValueError("latent tables must share shape (n_latents, n_actions)")
        n_latents = self.latent_next.shape[0]
        if self.encode_map.min() < 0 or self.encode_map.max() >= n_latents:
            raise ValueError("encode_map entries out of range")
        if self.latent_next.min() < 0 or self.latent_next.max() >= n_latents:
            raise ValueError("latent_next entries out of range")

    @property
    def n_latents(self) -> int:
        return self.latent_next.shape[0]

    @property
    def n_actions(self) -> int:
        return self.latent_next.shape[1]


@dataclass(frozen=True)
class QTable:
    values: np.ndarray  # (n_states, n_actions)
    horizon: int


def _q_levels(next_state: np.ndarray, reward: np.ndarray, gamma: float,
              horizon: int) -> list[np.ndarray]:
    """Q_1..Q_H where Q_n(s,a) = R(s,a) + gamma * max_a' Q_{n-1}(f(s,a), a')."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    levels = [reward.copy()]
    for _ in range(horizon - 1):
        v_prev = levels[-1].max(axis=1)
        levels.append(reward + gamma * v_prev[next_state])
    return levels


def q_n_exact(mdp: DiscreteMdp, horizon: int) -> QTable:
    """Exact optimal fixed-horizon Q-function of the true MDP."""
    return QTable(values=_q_levels(mdp.next_state, mdp.reward, mdp.gamma, horizon)[-1],
                  horizon=horizon)


def latent_q_n_exact(latent: TabularLatentModel, horizon: int,
                     gamma: float = 1.0) -> QTable:
    """Exact optimal fixed-horizon Q-function over the latent tables."""
    return QTable(values=_q_levels(latent.latent_next, latent.latent_reward,
                                   gamma, horizon)[-1],
                  horizon=horizon)


class EnumerationCapError(RuntimeError):
    """Raised when an exhaustive check would exceed the trajectory cap."""


def measure_epsilon(mdp: DiscreteMdp, latent: TabularLatentModel, horizon: int,
                    cap: int = 10**6) -> float:
    """Worst-case sqrt(prediction loss) over all H-step trajectories.

    The loss for one trajectory is the mean over steps of the squared
    discounted reward error between the true rollout and the latent rollout
    started from the encoded state.
    """
    n_traj = mdp.n_states * mdp.n_actions**horizon
    if n_traj > cap:
        raise EnumerationCapError(
            f"{n_traj} trajectories exceed the enumeration cap {cap}")
    worst = 0.0
    states0 = np.arange(mdp.n_states)
    for seq in product(range(mdp.n_actions), repeat=horizon):
        s = states0
        z = latent.encode_map[states0]
        loss = np.zeros(mdp.n_states)
        discount = 1.0
        for a in seq:
            err = discount * (mdp.reward[s, a] - latent.latent_reward[z, a])
            loss += err * err
            s = mdp.next_state[s, a]
            z = latent.latent_next[z, a]
            discount *= mdp.gamma
        worst = max(worst, float(loss.max()) / horizon)
    return float(np.sqrt(worst))


def _latent_greedy_rollout_values(mdp: DiscreteMdp, latent: TabularLatentModel,
                                  horizon: int) -> np.ndarray:
    """True H-step value of acting greedily w.r.t. the latent Q-tables.

    For every (s, a) the first action is forced to ``a``; afterwards each
    action maximizes the remaining-horizon latent Q at the latent state
    propagated by the latent dynamics, while the collected reward follows
    the true MDP.
    """
    levels = _q_levels(latent.latent_next, latent.latent_reward, mdp.gamma, horizon)
    n_s, n_a = mdp.n_states, mdp.n_actions
    s = np.repeat(np.arange(n_s), n_a)
    a = np.tile(np.arange(n_a), n_s)
    z = latent.encode_map[s]
    totals = mdp.reward[s, a].astype(np.float64)
    discount = 1.0
    for t in range(1, horizon):
        z = latent.latent_next[z, a]
        s = mdp.next_state[s, a]
        a = np.argmax(levels[horizon - t - 1][z], axis=1)
        discount *= mdp.gamma
        totals += discount * mdp.reward[s, a]
    return totals.reshape(n_s, n_a)


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    horizon: int
    max_gap: float
    max_subopt: float
    bound_cs_gap: float
    bound_cs_subopt: float
    bound_paper_gap: float
    bound_paper_subopt: float
    paper_bound_violated: bool
    instance_descriptor: str

    @property
    def cs_bound_holds(self) -> bool:
        tol = 1e-9
        return (self.max_gap <= self.bound_cs_gap + tol
                and self.max_subopt <= self.bound_cs_subopt + tol)

    def to_json(self) -> str:
        return json.dumps({
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "max_gap": self.max_gap,
            "max_subopt": self.max_subopt,
            "bound_cs_gap": self.bound_cs_gap,
            "bound_cs_subopt": self.bound_cs_subopt,
            "bound_paper_gap": self.bound_paper_gap,
            "bound_paper_subopt": self.bound_paper_subopt,
            "paper_bound_violated": self.paper_bound_violated,
            "instance_descriptor": self.instance_descriptor,
        }, sort_keys=True)


def check_bound(mdp: DiscreteMdp, latent: TabularLatentModel, horizon: int,
                cap: int = 10**6, descriptor: str = "") -> BoundReport:
    """Measure epsilon, the value gap and the policy suboptimality, and
    compare them against both bound scalings."""
    eps = measure_epsilon(mdp, latent, horizon, cap=cap)
    q_true = q_n_exact(mdp, horizon).values
    q_lat = latent_q_n_exact(latent, horizon, gamma=mdp.gamma).values
    gap = q_true - q_lat[latent.encode_map, :]
    policy_values = _latent_greedy_rollout_values(mdp, latent, horizon)
    subopt = q_true - policy_values
    max_gap = float(gap.max())
    max_subopt = float(subopt.max())
    sqrt_h = float(np.sqrt(horizon))
    tol = 1e-9
    paper_violated = (max_gap > sqrt_h * eps + tol
                      or max_subopt > 2.0 * sqrt_h * eps + tol)
    return BoundReport(
        epsilon=eps,
        horizon=horizon,
        max_gap=max_gap,
        max_subopt=max_subopt,
        bound_cs_gap=horizon * eps,
        bound_cs_subopt=2.0 * horizon * eps,
        bound_paper_gap=sqrt_h * eps,
        bound_paper_subopt=2.0 * sqrt_h * eps,
        paper_bound_violated=bool(paper_violated),
        instance_descriptor=descriptor,
    )


# ---------------------------------------------------------------------------
# Instance constructions
# ---------------------------------------------------------------------------

def identity_latent(mdp: DiscreteMdp) -> TabularLatentModel:
    """Exact embedding: latent space is the state space itself."""
    return TabularLatentModel(encode_map=np.arange(mdp.n_states),
                              latent_next=mdp.next_state.copy(),
                              latent_reward=mdp.reward.copy())


def offset_latent(mdp: DiscreteMdp, delta: float) -> TabularLatentModel:
    """Exact embedding except every latent reward is shifted down by delta.

    With gamma = 1 every H-step trajectory has loss delta^2, so epsilon is
    exactly |delta| while the value gap grows like H * delta: the instance
    saturating the H-scaled bound.
    """
    lat = identity_latent(mdp)
    return TabularLatentModel(encode_map=lat.encode_map,
                              latent_next=lat.latent_next,
                              latent_reward=lat.latent_reward - delta)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               gamma: float = 1.0) -> DiscreteMdp:
    return DiscreteMdp(
        next_state=rng.integers(0, n_states, size=(n_states, n_actions)),
        reward=rng.uniform(-1.0, 1.0, size=(n_states, n_actions)),
        gamma=gamma,
    )


def perturbed_latent(mdp: DiscreteMdp, rng: np.random.Generator,
                     reward_noise: float = 0.2,
                     merge_states: bool = False,
                     scramble_dynamics_prob: float = 0.0) -> TabularLatentModel:
    """Latent model derived from the truth and then degraded.

    Optionally merges states through a random surjective encoder, adds
    uniform noise to the latent rewards, and rewires a fraction of the
    latent transitions.
    """
    n_s, n_a = mdp.n_states, mdp.n_actions
    if merge_states and n_s > 1:
        n_latents = int(rng.integers(1, n_s + 1))
        encode = rng.integers(0, n_latents, size=n_s)
    else:
        n_latents = n_s
        encode = np.arange(n_s)
    # Representative true state per latent index.
    reps = np.zeros(n_latents, dtype=np.int64)
    for z in range(n_latents):
        owners = np.flatnonzero(encode == z)
        reps[z] = owners[0] if len(owners) else 0
    latent_next = encode[mdp.next_state[reps]]
    latent_reward = mdp.reward[reps] + rng.uniform(-reward_noise, reward_noise,
                                                   size=(n_latents, n_a))
    if scramble_dynamics_prob > 0.0:
        mask = rng.random(size=latent_next.shape) < scramble_dynamics_prob
        latent_next = np.where(mask, rng.integers(0, n_latents, size=latent_next.shape),
                               latent_next)
    return TabularLatentModel(encode_map=encode, latent_next=latent_next,
                              latent_reward=latent_reward)


# ---------------------------------------------------------------------------
# Bridges to the continuous environment and the planner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizedPendulum:
    """A pendulum snapped onto a grid: an exact MDP in its own right."""

    mdp: DiscreteMdp
    thetas: np.ndarray
    theta_dots: np.ndarray
    torques: np.ndarray

    def state_index(self, theta: float, theta_dot: float) -> int:
        step = 2.0 * np.pi / len(self.thetas)
        i_theta = int(np.rint((angle_normalize(theta) + np.pi) / step)) % len(self.thetas)
        i_dot = int(np.argmin(np.abs(self.theta_dots - theta_dot)))
        return i_theta * len(self.theta_dots) + i_dot


def discretize_pendulum(config: EnvConfig, n_theta: int, n_theta_dot: int,
                        torques, gamma: float = 1.0) -> DiscretizedPendulum:
    """Build a tabular MDP by snapping the pendulum update to grid points."""
    torques = np.asarray(torques, dtype=np.float64)
    thetas = -np.pi + 2.0 * np.pi * np.arange(n_theta) / n_theta
    theta_dots = np.linspace(-config.max_speed, config.max_speed, n_theta_dot)
    n_states = n_theta * n_theta_dot
    next_state = np.empty((n_states, len(torques)), dtype=np.int64)
    reward = np.empty((n_states, len(torques)))
    theta_step = 2.0 * np.pi / n_theta
    for i, th in enumerate(thetas):
        for j, thd in enumerate(theta_dots):
            s_idx = i * n_theta_dot + j
            for k, torque in enumerate(torques):
                reward[s_idx, k] = reward_fn(PendulumState(th, thd), float(torque))
                nxt = pendulum_step(PendulumState(th, thd), float(torque), config)
                i2 = int(np.rint((angle_normalize(nxt.theta) + np.pi) / theta_step)) % n_theta
                j2 = int(np.argmin(np.abs(theta_dots - nxt.theta_dot)))
                next_state[s_idx, k] = i2 * n_theta_dot + j2
    return DiscretizedPendulum(mdp=DiscreteMdp(next_state=next_state, reward=reward,
                                               gamma=gamma),
                               thetas=thetas, theta_dots=theta_dots, torques=torques)


class TabularRolloutModel:
    """Planner adapter: observations are state indices, continuous actions
    are snapped to the nearest action index."""

    def __init__(self, mdp: DiscreteMdp):
        self.mdp = mdp

    def rollout_init(self, obs) -> np.ndarray:
        idx = int(np.asarray(obs).reshape(-1)[0])
        return np.array([float(idx)])

    def rollout_step(self, states: np.ndarray, actions: np.ndarray):
        s = states[:, 0].astype(np.int64)
        a = np.clip(np.rint(actions[:, 0]), 0, self.mdp.n_actions - 1).astype(np.int64)
        rewards = self.mdp.reward[s, a]
        nxt = self.mdp.next_state[s, a].astype(np.float64)
        return nxt[:, None], rewards
