"""Multi-pendulum environment.

N independent pendulums are observed jointly but only pendulum 1 is
controlled by the agent and produces reward. The remaining N-1 pendulums
are driven by uniform random torques drawn from the environment's own
seeded generator, so they act as deterministic-given-the-seed
observational noise.

Observation layout: ``[sin t1, cos t1, tdot1, ..., sin tN, cos tN, tdotN]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np


@dataclass(frozen=True)
class PendulumState:
    """Angle (raw accumulator, radians) and angular velocity (rad/s)."""

    theta: float
    theta_dot: float


@dataclass(frozen=True)
class EnvConfig:
    n_pendulums: int = 1
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    episode_len: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_pendulums < 1:
            raise ValueError(f"n_pendulums must be >= 1, got {self.n_pendulums}")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.max_torque <= 0:
            raise ValueError(f"max_torque must be > 0, got {self.max_torque}")
        if self.max_speed <= 0:
            raise ValueError(f"max_speed must be > 0, got {self.max_speed}")
        if self.episode_len < 1:
            raise ValueError(f"episode_len must be >= 1, got {self.episode_len}")

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_pendulums

    @property
    def action_dim(self) -> int:
        return 1

    def to_dict(self) -> dict:
        return asdict(self)


def angle_normalize(theta):
    """Wrap an angle (or array of angles) into [-pi, pi)."""
    return np.mod(theta + np.pi, 2.0 * np.pi) - np.pi


def pendulum_step(state: PendulumState, torque: float, config: EnvConfig) -> PendulumState:
    """Semi-implicit Euler update of a single pendulum.

    The torque is assumed to be already clipped to the actuator bounds.
    """
    g, m, l = config.gravity, config.mass, config.length
    accel = 3.0 * g / (2.0 * l) * np.sin(state.theta) + 3.0 / (m * l**2) * torque
    theta_dot = state.theta_dot + accel * config.dt
    theta_dot = float(np.clip(theta_dot, -config.max_speed, config.max_speed))
    theta = state.theta + theta_dot * config.dt
    return PendulumState(theta=theta, theta_dot=theta_dot)


def pendulum_step_batch(theta, theta_dot, torque, config: EnvConfig):
    """Vectorized ``pendulum_step`` over arrays of states and torques."""
    g, m, l = config.gravity, config.mass, config.length
    accel = 3.0 * g / (2.0 * l) * np.sin(theta) + 3.0 / (m * l**2) * torque
    new_theta_dot = np.clip(theta_dot + accel * config.dt, -config.max_speed, config.max_speed)
    new_theta = theta + new_theta_dot * config.dt
    return new_theta, new_theta_dot


def reward_fn(state: PendulumState, torque: float) -> float:
    """Swing-up cost: penalizes angle from upright, speed, and torque."""
    th = angle_normalize(state.theta)
    return float(-(th**2 + 0.1 * state.theta_dot**2 + 0.001 * torque**2))


def reward_fn_batch(theta, theta_dot, torque):
    """Vectorized ``reward_fn`` over arrays."""
    th = angle_normalize(theta)
    return -(th**2 + 0.1 * theta_dot**2 + 0.001 * torque**2)


def observe(states: list[PendulumState]) -> np.ndarray:
    """Stack per-pendulum [sin theta, cos theta, theta_dot] triples."""
    obs = np.empty(3 * len(states), dtype=np.float64)
    for i, s in enumerate(states):
        obs[3 * i] = np.sin(s.theta)
        obs[3 * i + 1] = np.cos(s.theta)
        obs[3 * i + 2] = s.theta_dot
    return obs


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an environment whose episode already ended."""


@dataclass
class MultiPendulumEnv:
    config: EnvConfig
    states: list[PendulumState] = field(default_factory=list)
    step_count: int = 0
    rng: np.random.Generator = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        if not self.states:
            self.reset()

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def done(self) -> bool:
        return self.step_count >= self.config.episode_len

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Start a new episode; reseeds the generator when ``seed`` is given.

        Each pendulum is initialized with theta ~ U(-pi, pi) and
        theta_dot ~ U(-1, 1).
        """
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.states = []
        for _ in range(self.config.n_pendulums):
            theta = self.rng.uniform(-np.pi, np.pi)
            theta_dot = self.rng.uniform(-1.0, 1.0)
            self.states.append(PendulumState(theta=theta, theta_dot=theta_dot))
        self.step_count = 0
        return observe(self.states)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        """Apply the agent torque to pendulum 1 and random torques elsewhere.

        Reward is computed from pendulum 1's pre-step state and the clipped
        agent torque. Distractor torques are drawn per-step, one per
        distractor, from the environment generator.
        """
        if self.done:
            raise EpisodeFinishedError(
                f"episode already finished after {self.step_count} steps; call reset()"
            )
        torque = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                               -self.config.max_torque, self.config.max_torque))
        reward = reward_fn(self.states[0], torque)
        new_states = [pendulum_step(self.states[0], torque, self.config)]
        for i in range(1, self.config.n_pendulums):
            distractor_torque = self.rng.uniform(-self.config.max_torque, self.config.max_torque)
            new_states.append(pendulum_step(self.states[i], distractor_torque, self.config))
        self.states = new_states
        self.step_count += 1
        return observe(self.states), reward, self.done
