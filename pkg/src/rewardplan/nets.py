"""Dense feed-forward network engine with exact reverse-mode gradients.

Small on purpose: affine layers with relu/tanh/identity activations, a
forward pass that records a tape, a backward pass that replays it, an Adam
optimizer, and a binary checkpoint format. Everything is float64 and
batch-major (batch x dim).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")
_ACT_TO_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"LRPM1"


class SerializationError(ValueError):
    """Raised on a malformed or truncated checkpoint stream."""


@dataclass
class Mlp:
    """Weights ``(out x in)``, biases ``(out,)`` and an activation per layer.

    The final layer activation is identity so outputs are unconstrained.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[0] != self.weights[k + 1].shape[1]:
                raise ValueError(
                    f"layer {k} output dim {self.weights[k].shape[0]} does not chain "
                    f"with layer {k + 1} input dim {self.weights[k + 1].shape[1]}"
                )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_list(self) -> list[np.ndarray]:
        """Flat parameter view [W0, b0, W1, b1, ...] (references, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.param_list())

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
        )


@dataclass
class ForwardTape:
    """Per-layer inputs and pre-activations cached by one forward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    single: bool  # input was a 1-D vector, not a batch


def mlp_init(layer_sizes: list[int], hidden_activation: str = "relu", seed: int = 0) -> Mlp:
    """Build an MLP with uniform fan-in init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Biases start at zero; the final layer activation is identity.
    """
    if len(layer_sizes) < 2:
        raise ValueError(f"need at least 2 layer sizes, got {layer_sizes}")
    if any(int(s) <= 0 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    if hidden_activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {hidden_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases, activations = [], [], []
    n_layers = len(layer_sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = int(layer_sizes[k]), int(layer_sizes[k + 1])
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        activations.append(hidden_activation if k < n_layers - 1 else "identity")
    return Mlp(weights=weights, biases=biases, activations=activations)


def _apply_activation(act: str, z: np.ndarray) -> np.ndarray:
    if act == "identity":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(act: str, z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if act == "identity":
        return upstream
    if act == "relu":
        return np.where(z > 0.0, upstream, 0.0)
    t = np.tanh(z)
    return upstream * (1.0 - t * t)


def forward(mlp: Mlp, x) -> tuple[np.ndarray, ForwardTape]:
    """Run the network on a vector or a (batch x dim) matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mlp.input_dim:
        raise ValueError(f"input shape {x.shape} incompatible with input_dim {mlp.input_dim}")
    inputs, preacts = [], []
    h = x
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        inputs.append(h)
        z = h @ w.T
        z += b
        preacts.append(z)
        h = _apply_activation(act, z)
    tape = ForwardTape(inputs=inputs, preacts=preacts, single=single)
    return (h[0] if single else h), tape


def backward(mlp: Mlp, tape: ForwardTape, output_grad) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backpropagate ``output_grad`` through a recorded forward pass.

    Returns the gradient w.r.t. the input and a flat parameter-gradient
    list shaped like ``mlp.param_list()``.
    """
    if len(tape.inputs) != mlp.n_layers:
        raise ValueError("tape layer count does not match network layer count")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != (tape.inputs[0].shape[0], mlp.output_dim):
        raise ValueError(
            f"output_grad shape {g.shape} incompatible with "
            f"(batch={tape.inputs[0].shape[0]}, output_dim={mlp.output_dim})"
        )
    param_grads: list[np.ndarray] = [None] * (2 * mlp.n_layers)  # type: ignore[list-item]
    for k in range(mlp.n_layers - 1, -1, -1):
        dz = _activation_grad(mlp.activations[k], tape.preacts[k], g)
        param_grads[2 * k] = dz.T @ tape.inputs[k]
        param_grads[2 * k + 1] = dz.sum(axis=0)
        g = dz @ mlp.weights[k]
    return (g[0] if tape.single else g), param_grads


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_num: float = 1e-8


def adam_init(params: list[np.ndarray], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, epsilon_num: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon_num=epsilon_num,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update. Parameters are updated in place."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ValueError("params, grads and optimizer state lengths differ")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon_num)
    return state


def global_grad_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def serialize_params(mlp: Mlp) -> bytes:
    """Encode the network as magic + layer table + little-endian f64 block."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", mlp.n_layers)]
    for w, act in zip(mlp.weights, mlp.activations):
        chunks.append(struct.pack("<IIB", w.shape[1], w.shape[0], _ACT_TO_TAG[act]))
    for w, b in zip(mlp.weights, mlp.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def deserialize_params(data: bytes) -> Mlp:
    """Inverse of ``serialize_params``; errors report the failing byte offset."""
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise SerializationError(f"truncated stream reading {what} at byte {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise SerializationError(f"bad magic {magic!r} at byte 0")
    (n_layers,) = struct.unpack("<I", take(4, "layer count"))
    if n_layers == 0:
        raise SerializationError("layer count is zero at byte 5")
    shapes, acts = [], []
    for k in range(n_layers):
        fan_in, fan_out, tag = struct.unpack("<IIB", take(9, f"layer {k} header"))
        if tag >= len(ACTIVATIONS):
            raise SerializationError(f"unknown activation tag {tag} at byte {off - 1}")
        if fan_in == 0 or fan_out == 0:
            raise SerializationError(f"zero layer dimension at byte {off - 9}")
        shapes.append((fan_out, fan_in))
        acts.append(ACTIVATIONS[tag])
    weights, biases = [], []
    for k, (fan_out, fan_in) in enumerate(shapes):
        w = np.frombuffer(take(8 * fan_out * fan_in, f"layer {k} weights"), dtype="<f8")
        b = np.frombuffer(take(8 * fan_out, f"layer {k} biases"), dtype="<f8")
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise SerializationError(f"{len(data) - off} trailing bytes at byte {off}")
    return Mlp(weights=weights, biases=biases, activations=acts)
