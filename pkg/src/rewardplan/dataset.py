"""Replay dataset, exploration noise, and trajectory-segment sampling.

Transitions are stored in insertion order as flat float64 arrays. Episode
boundaries are tracked with done flags; a collection that stops mid-episode
marks its final transition as done so no sampled segment can ever straddle
the cut. Files are little-endian binary with a JSON sidecar for metadata,
so identical seeds reproduce byte-identical datasets.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .env import MultiPendulumEnv
from .models import TrajectorySegment

DATASET_MAGIC = b"LRPD1"


class DatasetFormatError(ValueError):
    """Raised on a malformed or truncated dataset file."""


class ReplayDataset:
    """Append-only store of (s, a, r, s', done) transitions."""

    def __init__(self, d_s: int, d_a: int = 1, metadata: dict | None = None):
        self.d_s = d_s
        self.d_a = d_a
        self.metadata = dict(metadata or {})
        self._n = 0
        cap = 1024
        self._states = np.empty((cap, d_s))
        self._actions = np.empty((cap, d_a))
        self._rewards = np.empty(cap)
        self._next_states = np.empty((cap, d_s))
        self._dones = np.zeros(cap, dtype=bool)
        self.episode_starts: list[int] = []
        self._segment_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self._n

    @property
    def states(self) -> np.ndarray:
        return self._states[:self._n]

    @property
    def actions(self) -> np.ndarray:
        return self._actions[:self._n]

    @property
    def rewards(self) -> np.ndarray:
        return self._rewards[:self._n]

    @property
    def next_states(self) -> np.ndarray:
        return self._next_states[:self._n]

    @property
    def dones(self) -> np.ndarray:
        return self._dones[:self._n]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_starts)

    def _ensure_capacity(self, extra: int) -> None:
        need = self._n + extra
        cap = self._states.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for name in ("_states", "_actions", "_rewards", "_next_states", "_dones"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def append(self, state, action, reward: float, next_state, done: bool) -> None:
        self._ensure_capacity(1)
        i = self._n
        if i == 0 or self._dones[i - 1]:
            self.episode_starts.append(i)
        self._states[i] = state
        self._actions[i] = np.asarray(action, dtype=np.float64).reshape(self.d_a)
        self._rewards[i] = reward
        self._next_states[i] = next_state
        self._dones[i] = done
        self._n += 1
        self._segment_cache.clear()

    def mark_episode_end(self) -> None:
        """Force an episode boundary after the last stored transition."""
        if self._n > 0 and not self._dones[self._n - 1]:
            self._dones[self._n - 1] = True
            self._segment_cache.clear()

    def valid_segment_starts(self, horizon: int) -> np.ndarray:
        """Indices i such that [i, i+horizon) stays inside one episode."""
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        cached = self._segment_cache.get(horizon)
        if cached is not None:
            return cached
        starts = []
        bounds = self.episode_starts + [self._n]
        for ep in range(len(self.episode_starts)):
            lo, hi = bounds[ep], bounds[ep + 1]
            if hi - lo >= horizon:
                starts.append(np.arange(lo, hi - horizon + 1))
        out = np.concatenate(starts) if starts else np.empty(0, dtype=int)
        self._segment_cache[horizon] = out
        return out

    def save(self, path) -> None:
        path = str(path)
        records = np.empty((self._n, 2 * self.d_s + self.d_a + 2))
        records[:, :self.d_s] = self.states
        records[:, self.d_s:self.d_s + self.d_a] = self.actions
        records[:, self.d_s + self.d_a] = self.rewards
        records[:, self.d_s + self.d_a + 1:-1] = self.next_states
        records[:, -1] = self.dones.astype(np.float64)
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<IIQ", self.d_s, self.d_a, self._n))
            fh.write(np.ascontiguousarray(records, dtype="<f8").tobytes())
        meta = dict(self.metadata)
        meta.update({"d_s": self.d_s, "d_a": self.d_a, "n_transitions": self._n,
                     "n_episodes": self.n_episodes})
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ReplayDataset":
        path = str(path)
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {data[:5]!r}")
        off = len(DATASET_MAGIC)
        if len(data) < off + 16:
            raise DatasetFormatError(f"{path}: truncated header at byte {len(data)}")
        d_s, d_a, count = struct.unpack_from("<IIQ", data, off)
        off += 16
        rec_len = 2 * d_s + d_a + 2
        expected = off + 8 * rec_len * count
        if len(data) != expected:
            raise DatasetFormatError(
                f"{path}: expected {expected} bytes for {count} records, got {len(data)}")
        records = np.frombuffer(data, dtype="<f8", offset=off).reshape(count, rec_len)
        meta = {}
        try:
            with open(path + ".meta.json", encoding="utf-8") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            pass
        ds = cls(d_s=d_s, d_a=d_a, metadata=meta)
        ds._ensure_capacity(count)
        ds._states[:count] = records[:, :d_s]
        ds._actions[:count] = records[:, d_s:d_s + d_a]
        ds._rewards[:count] = records[:, d_s + d_a]
        ds._next_states[:count] = records[:, d_s + d_a + 1:-1]
        ds._dones[:count] = records[:, -1] > 0.5
        ds._n = count
        ds.episode_starts = [0] if count else []
        for i in range(count - 1):
            if ds._dones[i]:
                ds.episode_starts.append(i + 1)
        return ds


def env_config_digest(config_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class OuNoise:
    """Discrete Ornstein-Uhlenbeck process used as time-correlated control."""

    theta_ou: float = 0.15
    sigma_ou: float = 0.6
    low: float = -2.0
    high: float = 2.0
    d_a: int = 1
    seed: int = 0
    state: np.ndarray = field(init=False)
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.state = np.zeros(self.d_a)

    def reset(self) -> None:
        self.state = np.zeros(self.d_a)

    def sample(self) -> np.ndarray:
        step = self.theta_ou * (0.0 - self.state) + self.sigma_ou * self.rng.standard_normal(self.d_a)
        self.state = np.clip(self.state + step, self.low, self.high)
        return self.state.copy()


def collect_random(env: MultiPendulumEnv, n_steps: int, noise: OuNoise,
                   dataset: ReplayDataset | None = None) -> ReplayDataset:
    """Record exactly ``n_steps`` transitions under the noise process.

    Episodes reset at the environment time limit; the noise state resets
    with them. A trailing partial episode is closed with a done marker.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if dataset is None:
        dataset = ReplayDataset(d_s=env.obs_dim, d_a=env.action_dim, metadata={
            "env_config": env.config.to_dict(),
            "env_config_sha256": env_config_digest(env.config.to_dict()),
            "policy_tag": "ou_noise",
        })
    obs = env.reset()
    noise.reset()
    for _ in range(n_steps):
        if env.done:
            obs = env.reset()
            noise.reset()
        action = noise.sample()
        next_obs, reward, done = env.step(action)
        dataset.append(obs, action, reward, next_obs, done)
        obs = next_obs
    dataset.mark_episode_end()
    return dataset


def collect_episode(env: MultiPendulumEnv, policy, dataset: ReplayDataset) -> float:
    """Run one full episode under ``policy`` and append it; returns the return."""
    obs = env.reset()
    if hasattr(policy, "reset"):
        policy.reset()
    total = 0.0
    done = False
    while not done:
        action = policy(obs)
        next_obs, reward, done = env.step(action)
        dataset.append(obs, action, reward, next_obs, done)
        total += reward
        obs = next_obs
    return total


def sample_segments(dataset: ReplayDataset, batch_size: int, horizon: int,
                    rng: np.random.Generator) -> list[TrajectorySegment]:
    """Uniformly sample fixed-length in-episode segments."""
    starts = dataset.valid_segment_starts(horizon)
    if len(starts) == 0:
        raise ValueError(
            f"no episode of length >= {horizon} in dataset of {len(dataset)} transitions")
    picks = starts[rng.integers(0, len(starts), size=batch_size)]
    return [
        TrajectorySegment(
            states=dataset.states[i:i + horizon],
            actions=dataset.actions[i:i + horizon],
            rewards=dataset.rewards[i:i + horizon],
        )
        for i in picks
    ]


def sample_transitions(dataset: ReplayDataset, batch_size: int,
                       rng: np.random.Generator):
    """Uniformly sample single transitions as (s, a, r, s') arrays."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size=batch_size)
    return (dataset.states[idx], dataset.actions[idx],
            dataset.rewards[idx], dataset.next_states[idx])
