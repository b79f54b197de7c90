"""Shared test oracles.

These deliberately avoid the package's own gradient and rollout code paths:
finite differences for gradients, explicit table walks for rollouts, and a
hand-built exact network embedding of small two-action MDPs.
"""

from __future__ import annotations

import numpy as np

from rewardplan.models import LatentModel, TrajectorySegment
from rewardplan.nets import Mlp
from rewardplan.theory import DiscreteMdp


def finite_difference_grads(loss_fn, params: list[np.ndarray], h: float = 1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. in-place params."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn()
            flat[i] = orig - h
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic: list[np.ndarray], numeric: list[np.ndarray],
                       rel_tol: float = 1e-4, abs_floor: float = 1e-7):
    """Relative comparison with an absolute floor for near-zero entries."""
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
        rel = np.abs(a - n) / denom
        worst = float(rel.max()) if rel.size else 0.0
        assert worst <= rel_tol, f"gradient mismatch: worst rel err {worst:.3e}"


def identity_mlp(dim: int) -> Mlp:
    """Single identity-activation layer computing the identity map."""
    return Mlp(weights=[np.eye(dim)], biases=[np.zeros(dim)], activations=["identity"])


def affine_mlp(weight: np.ndarray, bias: np.ndarray) -> Mlp:
    return Mlp(weights=[np.asarray(weight, dtype=np.float64)],
               biases=[np.asarray(bias, dtype=np.float64)],
               activations=["identity"])


def embed_mdp_as_networks(mdp: DiscreteMdp, gamma: float = 1.0) -> LatentModel:
    """Exact network realization of a two-action tabular MDP.

    Observations and latents are one-hot state vectors; the action is a
    scalar in {0, 1}. With z one-hot and a binary, relu(z_s - a) fires only
    for (state s, action 0) and relu(z_s + a - 1) only for (state s,
    action 1), so one hidden layer reproduces both tables exactly.
    """
    if mdp.n_actions != 2:
        raise ValueError("exact embedding implemented for 2-action MDPs")
    n = mdp.n_states
    w_hidden = np.zeros((2 * n, n + 1))
    b_hidden = np.zeros(2 * n)
    for s in range(n):
        w_hidden[2 * s, s] = 1.0
        w_hidden[2 * s, n] = -1.0        # relu(z_s - a): fires for action 0
        w_hidden[2 * s + 1, s] = 1.0
        w_hidden[2 * s + 1, n] = 1.0     # relu(z_s + a - 1): fires for action 1
        b_hidden[2 * s + 1] = -1.0

    w_dyn = np.zeros((n, 2 * n))
    for s in range(n):
        w_dyn[mdp.next_state[s, 0], 2 * s] = 1.0
        w_dyn[mdp.next_state[s, 1], 2 * s + 1] = 1.0
    dynamics = Mlp(weights=[w_hidden.copy(), w_dyn], biases=[b_hidden.copy(), np.zeros(n)],
                   activations=["relu", "identity"])

    w_rew = np.zeros((1, 2 * n))
    for s in range(n):
        w_rew[0, 2 * s] = mdp.reward[s, 0]
        w_rew[0, 2 * s + 1] = mdp.reward[s, 1]
    reward_head = Mlp(weights=[w_hidden.copy(), w_rew], biases=[b_hidden.copy(), np.zeros(1)],
                      activations=["relu", "identity"])

    return LatentModel(encoder=identity_mlp(n), dynamics=dynamics,
                       reward_head=reward_head, d_z=n, gamma=gamma)


def table_walk(mdp: DiscreteMdp, start: int, actions) -> tuple[list[int], list[float]]:
    """Independent rollout oracle over the raw tables."""
    s = start
    states, rewards = [s], []
    for a in actions:
        rewards.append(float(mdp.reward[s, int(a)]))
        s = int(mdp.next_state[s, int(a)])
        states.append(s)
    return states, rewards


def mdp_segment(mdp: DiscreteMdp, start: int, actions) -> TrajectorySegment:
    """Segment of one-hot observations and recorded true rewards."""
    states, rewards = table_walk(mdp, start, actions)
    obs = np.zeros((len(actions), mdp.n_states))
    for k, s in enumerate(states[:-1]):
        obs[k, s] = 1.0
    acts = np.asarray(actions, dtype=np.float64).reshape(-1, 1)
    return TrajectorySegment(states=obs, actions=acts, rewards=np.asarray(rewards))


def random_tiny_model(rng: np.random.Generator, d_s: int, d_a: int, d_z: int,
                      hidden: int = 5, gamma: float = 0.95,
                      activation: str = "tanh") -> LatentModel:
    """Small random latent model with nonzero biases for gradient probes."""
    from rewardplan.nets import mlp_init

    def jitter(net: Mlp) -> Mlp:
        for b in net.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        for w in net.weights:
            w += rng.normal(scale=0.05, size=w.shape)
        return net

    seed = int(rng.integers(0, 2**31))
    enc = jitter(mlp_init([d_s, hidden, d_z], activation, seed=seed))
    dyn = jitter(mlp_init([d_z + d_a, hidden, d_z], activation, seed=seed + 1))
    rew = jitter(mlp_init([d_z + d_a, hidden, 1], activation, seed=seed + 2))
    return LatentModel(encoder=enc, dynamics=dyn, reward_head=rew, d_z=d_z, gamma=gamma)


def random_segment(rng: np.random.Generator, d_s: int, d_a: int, horizon: int) -> TrajectorySegment:
    return TrajectorySegment(
        states=rng.normal(size=(horizon, d_s)),
        actions=rng.normal(size=(horizon, d_a)),
        rewards=rng.normal(size=horizon),
    )
