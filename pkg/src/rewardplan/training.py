"""Training regimes and evaluation.

Offline: gradient steps over a fixed dataset, variant-dispatched (the
state-prediction baseline trains in two phases: representation first, then
the reward head on the frozen rollout). Online: alternate collecting one
exploratory MPC episode with a block of gradient steps, starting from a
random-control seed dataset.

Every run is a pure function of (seed, config); wall-clock only ever
appears in the `seconds` log column.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from .dataset import (OuNoise, ReplayDataset, collect_episode, collect_random,
                      sample_segments, sample_transitions)
from .env import MultiPendulumEnv
from .nets import adam_init, adam_step, clip_grad_norm
from .planning import CemConfig, mpc_policy

LOG_COLUMNS = ("iteration", "env_steps", "train_loss", "eval_loss_10step",
               "explore_return", "eval_return", "seconds")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **kwargs) -> None:
        unknown = set(kwargs) - set(LOG_COLUMNS)
        if unknown:
            raise ValueError(f"unknown log columns: {sorted(unknown)}")
        self.rows.append({col: kwargs.get(col) for col in LOG_COLUMNS})

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in LOG_COLUMNS])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv_string())


@dataclass(frozen=True)
class OnlineConfig:
    n_iterations: int = 106
    init_random_steps: int = 2500
    init_epochs: int = 100
    train_iters_per_episode: int = 100
    batch_size: int = 256
    epsilon: float = 0.7
    h_train: int = 12
    learning_rate: float = 1e-3
    grad_clip: float = 10.0
    ou_theta: float = 0.15
    ou_sigma_scale: float = 0.3   # times max_torque
    eval_every: int = 25
    eval_episodes: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        for name in ("init_random_steps", "init_epochs", "train_iters_per_episode",
                     "batch_size", "h_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_iterations < 0:
            raise ValueError(f"n_iterations must be >= 0, got {self.n_iterations}")


def eval_reward_loss(model: M.LatentModel, segments: list[M.TrajectorySegment]) -> float:
    """Reward-prediction loss of the current model on the given segments.

    Works for every variant since each one carries a reward head; for the
    state-prediction baseline this measures the separately trained head on
    its frozen rollout.
    """
    loss, _ = M._reward_loss_forward(model, segments)
    return loss


def _trainable_nets(model: M.LatentModel, phase: str) -> list[str]:
    if phase == "reward":
        return ["encoder", "dynamics", "reward_head"]
    if phase == "state_pred":
        return ["encoder", "dynamics", "decoder"]
    if phase == "reward_head":
        return ["reward_head"]
    if phase == "deepmdp":
        return ["encoder", "dynamics", "reward_head"]
    raise ValueError(f"unknown training phase {phase!r}")


def _gather(model: M.LatentModel, names: list[str], grads: dict | None = None):
    params, gs = [], []
    for name in names:
        params.extend(getattr(model, name).param_list())
        if grads is not None:
            gs.extend(grads[name])
    return (params, gs) if grads is not None else params


class _PhaseTrainer:
    """Owns the optimizer state and sampling for one training phase."""

    def __init__(self, model: M.LatentModel, phase: str, h_train: int,
                 batch_size: int, learning_rate: float, grad_clip: float,
                 rng: np.random.Generator):
        self.model = model
        self.phase = phase
        self.h_train = h_train
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.rng = rng
        self.net_names = _trainable_nets(model, phase)
        self.adam = adam_init(_gather(model, self.net_names),
                              learning_rate=learning_rate)

    def gradient_step(self, dataset: ReplayDataset) -> float:
        if self.phase == "deepmdp":
            s, a, r, s_next = sample_transitions(dataset, self.batch_size, self.rng)
            loss, grads = M.deepmdp_gradient(self.model, s, a, r, s_next)
        else:
            segments = sample_segments(dataset, self.batch_size, self.h_train, self.rng)
            if self.phase == "reward":
                loss, grads = M.loss_gradient(self.model, segments)
            elif self.phase == "state_pred":
                loss, grads = M.state_pred_gradient(self.model, segments)
            else:
                loss, grads = M.reward_head_gradient(self.model, segments)
        params, gs = _gather(self.model, self.net_names, grads)
        clip_grad_norm(gs, self.grad_clip)
        adam_step(params, gs, self.adam)
        return loss

    def steps_per_epoch(self, dataset: ReplayDataset) -> int:
        if self.phase == "deepmdp":
            n = len(dataset)
        else:
            n = len(dataset.valid_segment_starts(self.h_train))
        return max(1, n // self.batch_size)


def _training_phases(model: M.LatentModel) -> list[str]:
    if model.variant == "reward":
        return ["reward"]
    if model.variant == "state_pred":
        return ["state_pred", "reward_head"]
    return ["deepmdp"]


def train_offline(model: M.LatentModel, dataset: ReplayDataset, epochs: int,
                  batch_size: int = 256, h_train: int = 12, seed: int = 0,
                  learning_rate: float = 1e-3, grad_clip: float = 10.0,
                  eval_horizon: int = 10, eval_batch_size: int = 512,
                  log: TrainLog | None = None) -> TrainLog:
    """Train on a fixed dataset; never touches an environment.

    Logs one row per epoch with the running training loss and the
    fixed-horizon reward-prediction loss on a frozen evaluation batch.
    """
    if log is None:
        log = TrainLog()
    if epochs == 0:
        return log
    rng = np.random.default_rng(seed)
    eval_segments = sample_segments(dataset, eval_batch_size, eval_horizon,
                                    np.random.default_rng(seed + 1))
    t0 = time.perf_counter()
    iteration = 0
    for phase in _training_phases(model):
        trainer = _PhaseTrainer(model, phase, h_train, batch_size,
                                learning_rate, grad_clip, rng)
        steps = trainer.steps_per_epoch(dataset)
        for _ in range(epochs):
            losses = [trainer.gradient_step(dataset) for _ in range(steps)]
            iteration += 1
            log.append(iteration=iteration, env_steps=len(dataset),
                       train_loss=float(np.mean(losses)),
                       eval_loss_10step=eval_reward_loss(model, eval_segments),
                       seconds=round(time.perf_counter() - t0, 3))
    return log


class EpsilonGreedyPolicy:
    """With probability epsilon emit a uniform action, else defer to the base."""

    def __init__(self, policy, epsilon: float, action_low: float,
                 action_high: float, rng: np.random.Generator, d_a: int = 1):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
        self.policy = policy
        self.epsilon = epsilon
        self.action_low = action_low
        self.action_high = action_high
        self.rng = rng
        self.d_a = d_a

    def reset(self) -> None:
        if hasattr(self.policy, "reset"):
            self.policy.reset()

    def __call__(self, obs) -> np.ndarray:
        if self.rng.random() < self.epsilon:
            return self.rng.uniform(self.action_low, self.action_high, size=self.d_a)
        return np.asarray(self.policy(obs), dtype=np.float64).reshape(self.d_a)


def epsilon_greedy(policy, epsilon: float, action_low: float, action_high: float,
                   rng: np.random.Generator, d_a: int = 1) -> EpsilonGreedyPolicy:
    return EpsilonGreedyPolicy(policy, epsilon, action_low, action_high, rng, d_a=d_a)


@dataclass
class EvalStats:
    mean: float
    std: float
    returns: list[float]


def evaluate(env_factory, policy, n_episodes: int, seed: int = 0) -> EvalStats:
    """Noise-free episode returns under distinct derived reset seeds."""
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    returns = []
    for ep in range(n_episodes):
        env = env_factory()
        obs = env.reset(seed=seed * 100_003 + ep)
        if hasattr(policy, "reset"):
            policy.reset()
        total = 0.0
        done = False
        while not done:
            obs, reward, done = env.step(policy(obs))
            total += reward
        returns.append(total)
    arr = np.asarray(returns)
    return EvalStats(mean=float(arr.mean()), std=float(arr.std()), returns=returns)


def train_online(env: MultiPendulumEnv, model: M.LatentModel,
                 config: OnlineConfig, planner: CemConfig,
                 log: TrainLog | None = None) -> tuple[TrainLog, ReplayDataset]:
    """Iterative scheme: seed with random data, then alternate collecting one
    epsilon-greedy MPC episode with a block of gradient steps."""
    if log is None:
        log = TrainLog()
    t0 = time.perf_counter()
    noise = OuNoise(theta_ou=config.ou_theta,
                    sigma_ou=config.ou_sigma_scale * env.config.max_torque,
                    low=-env.config.max_torque, high=env.config.max_torque,
                    d_a=env.action_dim, seed=config.seed + 11)
    dataset = collect_random(env, config.init_random_steps, noise)

    rng = np.random.default_rng(config.seed)
    trainers = [_PhaseTrainer(model, phase, config.h_train, config.batch_size,
                              config.learning_rate, config.grad_clip, rng)
                for phase in _training_phases(model)]
    eval_rng = np.random.default_rng(config.seed + 7)

    def eval_loss() -> float:
        segments = sample_segments(dataset, 256, 10, eval_rng)
        return eval_reward_loss(model, segments)

    init_losses = []
    for trainer in trainers:
        steps = trainer.steps_per_epoch(dataset)
        for _ in range(config.init_epochs):
            init_losses.extend(trainer.gradient_step(dataset) for _ in range(steps))
    log.append(iteration=0, env_steps=len(dataset),
               train_loss=float(np.mean(init_losses)),
               eval_loss_10step=eval_loss(),
               seconds=round(time.perf_counter() - t0, 3))

    base_policy = mpc_policy(model, planner, d_a=env.action_dim)
    explore_policy = epsilon_greedy(base_policy, config.epsilon,
                                    -env.config.max_torque, env.config.max_torque,
                                    np.random.default_rng(config.seed + 23),
                                    d_a=env.action_dim)
    for it in range(1, config.n_iterations + 1):
        explore_return = collect_episode(env, explore_policy, dataset)
        losses = []
        for trainer in trainers:
            losses.extend(trainer.gradient_step(dataset)
                          for _ in range(config.train_iters_per_episode))
        eval_return = None
        if config.eval_every and (it % config.eval_every == 0 or it == config.n_iterations):
            eval_policy = mpc_policy(model, planner, d_a=env.action_dim)
            stats = evaluate(lambda: MultiPendulumEnv(env.config), eval_policy,
                             config.eval_episodes, seed=config.seed + 31)
            eval_return = stats.mean
        log.append(iteration=it, env_steps=len(dataset),
                   train_loss=float(np.mean(losses)),
                   eval_loss_10step=eval_loss(),
                   explore_return=explore_return,
                   eval_return=eval_return,
                   seconds=round(time.perf_counter() - t0, 3))
    return log, dataset
