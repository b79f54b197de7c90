"""Latent reward-prediction model and baseline variants.

The primary model is a triple of networks: an encoder mapping observations
to a low-dimensional latent state, a latent dynamics network advancing that
state under an action, and a reward head predicting the instantaneous
reward. It is trained end-to-end purely on multi-step reward prediction:
the encoder sees only the first observation of a segment, later latents
come from chaining the dynamics network, and the recorded rewards are the
only targets.

Baselines: a state-prediction model (latent learned by reconstructing
future observations through a decoder, reward head trained separately on
the frozen rollout) and a one-step model trained on reward prediction plus
next-latent prediction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .nets import Mlp, backward, deserialize_params, forward, mlp_init, serialize_params

MODEL_MAGIC = b"LRPC1"

VARIANTS = ("reward", "state_pred", "deepmdp")


@dataclass
class TrajectorySegment:
    """One contiguous in-episode slice of states, actions and rewards."""

    states: np.ndarray   # H x d_s
    actions: np.ndarray  # H x d_a
    rewards: np.ndarray  # H

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        h = len(self.rewards)
        if h < 1 or self.states.shape[0] != h or self.actions.shape[0] != h:
            raise ValueError(
                f"segment arrays disagree on length: states {self.states.shape}, "
                f"actions {self.actions.shape}, rewards {self.rewards.shape}"
            )

    @property
    def horizon(self) -> int:
        return len(self.rewards)


@dataclass(kw_only=True)
class LatentModel:
    """Encoder, latent dynamics and reward head plus discount and latent size."""

    encoder: Mlp
    dynamics: Mlp
    reward_head: Mlp
    d_z: int
    gamma: float = 0.99
    variant: str = "reward"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.encoder.output_dim != self.d_z:
            raise ValueError(
                f"encoder output {self.encoder.output_dim} != d_z {self.d_z}")
        if self.dynamics.output_dim != self.d_z:
            raise ValueError(
                f"dynamics output {self.dynamics.output_dim} != d_z {self.d_z}")
        if self.dynamics.input_dim <= self.d_z:
            raise ValueError("dynamics input must be d_z + action_dim")
        if self.reward_head.input_dim != self.dynamics.input_dim:
            raise ValueError(
                f"reward_head input {self.reward_head.input_dim} != "
                f"dynamics input {self.dynamics.input_dim}")
        if self.reward_head.output_dim != 1:
            raise ValueError(f"reward_head must output a scalar, got {self.reward_head.output_dim}")

    @property
    def d_s(self) -> int:
        return self.encoder.input_dim

    @property
    def d_a(self) -> int:
        return self.dynamics.input_dim - self.d_z

    def net_names(self) -> list[str]:
        return ["encoder", "dynamics", "reward_head"]

    def nets(self) -> dict[str, Mlp]:
        return {name: getattr(self, name) for name in self.net_names()}

    # Planner rollout interface: pure, batched over rollouts.
    def rollout_init(self, obs: np.ndarray) -> np.ndarray:
        return encode(self, obs)

    def rollout_step(self, states: np.ndarray, actions: np.ndarray):
        za = np.concatenate([states, actions], axis=1)
        nxt, _ = forward(self.dynamics, za)
        rew, _ = forward(self.reward_head, za)
        return nxt, rew[:, 0]

    def rollout_kernel(self, n_rows: int):
        """Buffered equivalent of ``rollout_step`` for fixed-size batches.

        Reuses one set of work arrays across calls, which keeps the planner
        inner loop free of large allocations. Returned arrays alias those
        buffers and are only valid until the next call of the kernel.
        """
        d_z = self.d_z
        za = np.empty((n_rows, d_z + self.d_a))
        layer_bufs = {
            name: [np.empty((n_rows, w.shape[0])) for w in net.weights]
            for name, net in (("dynamics", self.dynamics),
                              ("reward_head", self.reward_head))
        }

        def run(net: Mlp, bufs: list[np.ndarray], x: np.ndarray) -> np.ndarray:
            h = x
            for w, b, act, out in zip(net.weights, net.biases, net.activations, bufs):
                np.matmul(h, w.T, out=out)
                out += b
                if act == "relu":
                    np.maximum(out, 0.0, out=out)
                elif act == "tanh":
                    np.tanh(out, out=out)
                h = out
            return h

        def step(states: np.ndarray, actions: np.ndarray):
            za[:, :d_z] = states
            za[:, d_z:] = actions
            nxt = run(self.dynamics, layer_bufs["dynamics"], za)
            rewards = run(self.reward_head, layer_bufs["reward_head"], za)
            return nxt, rewards[:, 0]

        return step


@dataclass(kw_only=True)
class StatePredModel(LatentModel):
    """Baseline: latent learned from observation prediction via a decoder."""

    decoder: Mlp
    variant: str = "state_pred"

    def __post_init__(self):
        super().__post_init__()
        if self.decoder.input_dim != self.d_z or self.decoder.output_dim != self.d_s:
            raise ValueError(
                f"decoder must map d_z {self.d_z} -> d_s {self.d_s}, got "
                f"{self.decoder.input_dim} -> {self.decoder.output_dim}")

    def net_names(self) -> list[str]:
        return ["encoder", "dynamics", "reward_head", "decoder"]


@dataclass(kw_only=True)
class DeepMdpModel(LatentModel):
    """Baseline: one-step reward loss plus a latent next-state prediction loss."""

    latent_pred_weight: float = 1.0
    stop_target_grad: bool = False
    variant: str = "deepmdp"


def build_model(variant: str, d_s: int, d_a: int, d_z: int = 3,
                hidden: tuple[int, ...] = (128, 128), gamma: float = 0.99,
                seed: int = 0, latent_pred_weight: float = 1.0,
                stop_target_grad: bool = False) -> LatentModel:
    """Construct a model of the given variant with freshly initialized nets."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    child = np.random.SeedSequence(seed).generate_state(4)
    h = list(hidden)
    encoder = mlp_init([d_s] + h + [d_z], seed=int(child[0]))
    dynamics = mlp_init([d_z + d_a] + h + [d_z], seed=int(child[1]))
    reward_head = mlp_init([d_z + d_a] + h + [1], seed=int(child[2]))
    if variant == "reward":
        return LatentModel(encoder=encoder, dynamics=dynamics, reward_head=reward_head,
                           d_z=d_z, gamma=gamma)
    if variant == "state_pred":
        decoder = mlp_init([d_z] + h + [d_s], seed=int(child[3]))
        return StatePredModel(encoder=encoder, dynamics=dynamics, reward_head=reward_head,
                              decoder=decoder, d_z=d_z, gamma=gamma)
    return DeepMdpModel(encoder=encoder, dynamics=dynamics, reward_head=reward_head,
                        d_z=d_z, gamma=gamma, latent_pred_weight=latent_pred_weight,
                        stop_target_grad=stop_target_grad)


# ---------------------------------------------------------------------------
# Elementary maps
# ---------------------------------------------------------------------------

def encode(model: LatentModel, s) -> np.ndarray:
    """Embed an observation (or batch) into the latent space."""
    z, _ = forward(model.encoder, s)
    return z


def latent_step(model: LatentModel, z, a) -> np.ndarray:
    """Advance a latent state (or batch) one step under an action."""
    za = _concat_za(model, z, a)
    out, _ = forward(model.dynamics, za)
    return out[0] if np.asarray(z).ndim == 1 else out


def predict_reward(model: LatentModel, z, a):
    """Predicted instantaneous reward for a latent state and action."""
    za = _concat_za(model, z, a)
    out, _ = forward(model.reward_head, za)
    return float(out[0, 0]) if np.asarray(z).ndim == 1 else out[:, 0]


def _concat_za(model: LatentModel, z, a) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[None, :] if z.shape[0] == 1 else a[:, None]
    if z.shape[1] != model.d_z:
        raise ValueError(f"latent dim {z.shape[1]} != d_z {model.d_z}")
    if a.shape != (z.shape[0], model.d_a):
        raise ValueError(f"action shape {a.shape} incompatible with (batch, {model.d_a})")
    return np.concatenate([z, a], axis=1)


def unroll(model: LatentModel, s, actions) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop latent rollout from one observation.

    Only the first state is encoded; every later latent comes from the
    dynamics network. Returns the H latents and H predicted rewards.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    horizon = actions.shape[0]
    latents = np.empty((horizon, model.d_z))
    rewards = np.empty(horizon)
    z = encode(model, np.asarray(s, dtype=np.float64))
    for k in range(horizon):
        latents[k] = z
        rewards[k] = predict_reward(model, z, actions[k])
        if k < horizon - 1:
            z = latent_step(model, z, actions[k])
    return latents, rewards


# ---------------------------------------------------------------------------
# Batched unroll with tapes (shared by the training losses)
# ---------------------------------------------------------------------------

class _UnrollTapes:
    """Forward pass over a batch of segments with everything needed to backprop."""

    def __init__(self, model: LatentModel, s0: np.ndarray, actions: np.ndarray):
        batch, horizon = actions.shape[0], actions.shape[1]
        self.batch, self.horizon = batch, horizon
        z, self.enc_tape = forward(model.encoder, s0)
        self.latents = [z]
        self.dyn_tapes = []
        self.rh_tapes = []
        self.rewards_hat = np.empty((batch, horizon))
        for k in range(horizon):
            za = np.concatenate([self.latents[k], actions[:, k, :]], axis=1)
            r, rh_tape = forward(model.reward_head, za)
            self.rh_tapes.append(rh_tape)
            self.rewards_hat[:, k] = r[:, 0]
            if k < horizon - 1:
                nxt, dyn_tape = forward(model.dynamics, za)
                self.dyn_tapes.append(dyn_tape)
                self.latents.append(nxt)

    def backprop(self, model: LatentModel, reward_grads: np.ndarray | None,
                 latent_grads: list[np.ndarray] | None = None):
        """Chain gradients back through the rollout.

        ``reward_grads`` is d(loss)/d(rewards_hat) (batch x H) or None when
        the loss never touches the reward head. ``latent_grads[k]`` is an
        optional extra d(loss)/d(latents[k]) injected at each step (used by
        the decoder reconstruction loss).
        """
        d_z = model.d_z
        grads = {name: _zeros_like_params(net) for name, net in model.nets().items()}
        dz_next: np.ndarray | None = None
        for k in range(self.horizon - 1, -1, -1):
            dz = np.zeros((self.batch, d_z))
            if reward_grads is not None:
                in_grad, pg = backward(model.reward_head, self.rh_tapes[k],
                                       reward_grads[:, k:k + 1])
                _accumulate(grads["reward_head"], pg)
                dz += in_grad[:, :d_z]
            if latent_grads is not None and latent_grads[k] is not None:
                dz += latent_grads[k]
            if k < self.horizon - 1:
                in_grad, pg = backward(model.dynamics, self.dyn_tapes[k], dz_next)
                _accumulate(grads["dynamics"], pg)
                dz += in_grad[:, :d_z]
            dz_next = dz
        _, pg = backward(model.encoder, self.enc_tape, dz_next)
        _accumulate(grads["encoder"], pg)
        return grads


def _zeros_like_params(net: Mlp) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.param_list()]


def _accumulate(acc: list[np.ndarray], new: list[np.ndarray]) -> None:
    for a, g in zip(acc, new):
        a += g


def _stack_segments(segments: list[TrajectorySegment]):
    if not segments:
        raise ValueError("empty segment batch")
    horizon = segments[0].horizon
    if any(seg.horizon != horizon for seg in segments):
        raise ValueError("all segments in a batch must share the same horizon")
    s0 = np.stack([seg.states[0] for seg in segments])
    states = np.stack([seg.states for seg in segments])
    actions = np.stack([seg.actions for seg in segments])
    rewards = np.stack([seg.rewards for seg in segments])
    return s0, states, actions, rewards


def _discount_weights(gamma: float, horizon: int) -> np.ndarray:
    # The discount sits inside the squared error, hence the 2k exponent.
    return gamma ** (2.0 * np.arange(horizon))


# ---------------------------------------------------------------------------
# Multi-step reward loss (primary model)
# ---------------------------------------------------------------------------

def multi_step_loss(model: LatentModel, segment: TrajectorySegment) -> float:
    """Mean squared discounted reward-prediction error along one rollout."""
    loss, _ = _reward_loss_forward(model, [segment])
    return loss


def _reward_loss_forward(model: LatentModel, segments: list[TrajectorySegment]):
    s0, _, actions, rewards = _stack_segments(segments)
    tapes = _UnrollTapes(model, s0, actions)
    w = _discount_weights(model.gamma, tapes.horizon)
    err = rewards - tapes.rewards_hat
    loss = float(np.mean(np.mean(w * err**2, axis=1)))
    return loss, (tapes, w, err)


def loss_gradient(model: LatentModel, segments: list[TrajectorySegment]):
    """Batch-mean multi-step loss and its exact parameter gradients."""
    loss, (tapes, w, err) = _reward_loss_forward(model, segments)
    reward_grads = (-2.0 * w * err) / (tapes.horizon * tapes.batch)
    grads = tapes.backprop(model, reward_grads)
    # Only encoder/dynamics/reward_head ever receive gradient from this loss.
    grads = {k: grads[k] for k in ("encoder", "dynamics", "reward_head")}
    return loss, grads


# ---------------------------------------------------------------------------
# State-prediction baseline (two training phases)
# ---------------------------------------------------------------------------

def state_pred_loss(model: StatePredModel, segment: TrajectorySegment) -> float:
    """Mean squared observation-reconstruction error along one rollout."""
    loss, _ = _state_pred_forward(model, [segment])
    return loss


def _state_pred_forward(model: StatePredModel, segments: list[TrajectorySegment]):
    s0, states, actions, _ = _stack_segments(segments)
    tapes = _UnrollTapes(model, s0, actions)
    dec_tapes, residuals = [], []
    loss = 0.0
    for k in range(tapes.horizon):
        recon, tape = forward(model.decoder, tapes.latents[k])
        dec_tapes.append(tape)
        res = recon - states[:, k, :]
        residuals.append(res)
        loss += float(np.sum(res**2))
    loss /= tapes.horizon * tapes.batch
    return loss, (tapes, dec_tapes, residuals)


def state_pred_gradient(model: StatePredModel, segments: list[TrajectorySegment]):
    """Gradients of the reconstruction loss for encoder, dynamics and decoder."""
    loss, (tapes, dec_tapes, residuals) = _state_pred_forward(model, segments)
    scale = 2.0 / (tapes.horizon * tapes.batch)
    dec_grads = _zeros_like_params(model.decoder)
    latent_grads = []
    for k in range(tapes.horizon):
        in_grad, pg = backward(model.decoder, dec_tapes[k], scale * residuals[k])
        _accumulate(dec_grads, pg)
        latent_grads.append(in_grad)
    grads = tapes.backprop(model, reward_grads=None, latent_grads=latent_grads)
    return loss, {"encoder": grads["encoder"], "dynamics": grads["dynamics"],
                  "decoder": dec_grads}


def reward_head_loss(model: StatePredModel, segment: TrajectorySegment) -> float:
    """Reward-prediction loss over the frozen latent rollout."""
    loss, _ = _reward_loss_forward(model, [segment])
    return loss


def reward_head_gradient(model: StatePredModel, segments: list[TrajectorySegment]):
    """Same loss as the primary model but gradients reach only the reward head."""
    loss, (tapes, w, err) = _reward_loss_forward(model, segments)
    reward_grads = (-2.0 * w * err) / (tapes.horizon * tapes.batch)
    rh_grads = _zeros_like_params(model.reward_head)
    for k in range(tapes.horizon):
        _, pg = backward(model.reward_head, tapes.rh_tapes[k], reward_grads[:, k:k + 1])
        _accumulate(rh_grads, pg)
    return loss, {"reward_head": rh_grads}


# ---------------------------------------------------------------------------
# One-step baseline
# ---------------------------------------------------------------------------

def deepmdp_loss(model: DeepMdpModel, transition) -> float:
    """Reward loss plus weighted latent next-state prediction loss."""
    s, a, r, s_next = transition
    loss, _ = _deepmdp_forward(
        model, np.atleast_2d(np.asarray(s, dtype=np.float64)),
        np.asarray(a, dtype=np.float64).reshape(1, -1),
        np.asarray(r, dtype=np.float64).reshape(1),
        np.atleast_2d(np.asarray(s_next, dtype=np.float64)))
    return loss


def _deepmdp_forward(model: DeepMdpModel, s, a, r, s_next):
    z, enc_tape = forward(model.encoder, s)
    z_next, enc_next_tape = forward(model.encoder, s_next)
    za = np.concatenate([z, a], axis=1)
    r_hat, rh_tape = forward(model.reward_head, za)
    z_pred, dyn_tape = forward(model.dynamics, za)
    r_err = r_hat[:, 0] - r
    z_err = z_pred - z_next
    lam = model.latent_pred_weight
    batch = s.shape[0]
    loss = float(np.mean(r_err**2) + lam * np.mean(np.sum(z_err**2, axis=1)))
    return loss, (enc_tape, enc_next_tape, rh_tape, dyn_tape, r_err, z_err, batch)


def deepmdp_gradient(model: DeepMdpModel, s, a, r, s_next):
    """Batch-mean one-step loss and gradients; the latent target is live
    unless ``model.stop_target_grad`` is set."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).reshape(s.shape[0], -1)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    loss, (enc_tape, enc_next_tape, rh_tape, dyn_tape, r_err, z_err, batch) = \
        _deepmdp_forward(model, s, a, r, s_next)
    lam = model.latent_pred_weight
    d_z = model.d_z

    grads = {name: _zeros_like_params(net)
             for name, net in model.nets().items()}
    in_grad_r, pg = backward(model.reward_head, rh_tape, (2.0 / batch) * r_err[:, None])
    _accumulate(grads["reward_head"], pg)
    in_grad_d, pg = backward(model.dynamics, dyn_tape, (2.0 * lam / batch) * z_err)
    _accumulate(grads["dynamics"], pg)
    dz = in_grad_r[:, :d_z] + in_grad_d[:, :d_z]
    _, pg = backward(model.encoder, enc_tape, dz)
    _accumulate(grads["encoder"], pg)
    if not model.stop_target_grad:
        _, pg = backward(model.encoder, enc_next_tape, (-2.0 * lam / batch) * z_err)
        _accumulate(grads["encoder"], pg)
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + one network blob per component
# ---------------------------------------------------------------------------

def save_model(model: LatentModel, path) -> None:
    header = {
        "variant": model.variant,
        "d_z": model.d_z,
        "gamma": model.gamma,
        "d_s": model.d_s,
        "d_a": model.d_a,
        "nets": model.net_names(),
    }
    if isinstance(model, DeepMdpModel):
        header["latent_pred_weight"] = model.latent_pred_weight
        header["stop_target_grad"] = model.stop_target_grad
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in model.net_names():
            blob = serialize_params(getattr(model, name))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_model(path) -> LatentModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    nets = {}
    for name in header["nets"]:
        (blen,) = struct.unpack_from("<Q", data, off)
        off += 8
        nets[name] = deserialize_params(data[off:off + blen])
        off += blen
    common = dict(encoder=nets["encoder"], dynamics=nets["dynamics"],
                  reward_head=nets["reward_head"], d_z=header["d_z"],
                  gamma=header["gamma"])
    variant = header["variant"]
    if variant == "reward":
        return LatentModel(**common)
    if variant == "state_pred":
        return StatePredModel(decoder=nets["decoder"], **common)
    if variant == "deepmdp":
        return DeepMdpModel(latent_pred_weight=header.get("latent_pred_weight", 1.0),
                            stop_target_grad=header.get("stop_target_grad", False),
                            **common)
    raise ValueError(f"{path}: unknown variant {variant!r}")
