"""Minimal dense networks with exact manual backpropagation.

Everything is float64 and pure: forward/backward take explicit inputs and
never mutate parameters, so callers can run many evaluations concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import StructuralError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

_ACTIVATIONS = ("tanh", "relu", "identity")


class DenseNet:
    """Fully connected net: list of (W, b, activation) layers."""

    def __init__(self, dims, activations, rng: np.random.Generator | None = None):
        if len(activations) != len(dims) - 1:
            raise StructuralError("need one activation per layer")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise StructuralError(f"unknown activation: {act}")
        self.dims = list(dims)
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for din, dout in zip(dims[:-1], dims[1:]):
            if rng is None:
                w = np.zeros((din, dout))
            else:
                bound = 1.0 / np.sqrt(din)
                w = rng.uniform(-bound, bound, size=(din, dout))
            self.weights.append(np.asarray(w, dtype=np.float64))
            self.biases.append(np.zeros(dout, dtype=np.float64))

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def pack(self) -> np.ndarray:
        """Flat parameter vector; pack/unpack is an exact bijection."""
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def unpack(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise StructuralError(f"expected {self.param_count} params, got {flat.size}")
        i = 0
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[li] = flat[i : i + w.size].reshape(w.shape).copy()
            i += w.size
            self.biases[li] = flat[i : i + b.size].copy()
            i += b.size

    def copy(self) -> "DenseNet":
        other = DenseNet(self.dims, self.activations)
        other.unpack(self.pack())
        return other

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cache(x)
        return y

    def forward_cache(self, x: np.ndarray):
        """Forward pass keeping per-layer pre/post activations for backward.

        Accepts a single vector (d,) or a batch (B, d).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise StructuralError(f"input dim {x.shape[1]} != {self.in_dim}")
        inputs = [x]
        posts = []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            if act == "tanh":
                h = np.tanh(z)
            elif act == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
            posts.append(h)
            inputs.append(h)
        out = h[0] if single else h
        return out, (inputs, posts, single)

    def backward(self, cache, output_grad: np.ndarray):
        """Gradient of sum(output * output_grad) w.r.t. params and input.

        Returns (flat_param_grads, input_grad) with shapes matching pack()
        and the forward input.
        """
        inputs, posts, single = cache
        g = np.asarray(output_grad, dtype=np.float64)
        if single:
            g = g[None, :]
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for li in range(len(self.weights) - 1, -1, -1):
            act = self.activations[li]
            post = posts[li]
            if act == "tanh":
                g = g * (1.0 - post * post)
            elif act == "relu":
                g = g * (post > 0.0)
            w_grads[li] = inputs[li].T @ g
            b_grads[li] = g.sum(axis=0)
            g = g @ self.weights[li].T
        chunks = []
        for wg, bg in zip(w_grads, b_grads):
            chunks.append(wg.ravel())
            chunks.append(bg.ravel())
        input_grad = g[0] if single else g
        return np.concatenate(chunks), input_grad


@dataclass
class OptimizerState:
    """Adam moments over a flat parameter vector."""

    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    skipped_updates: int = 0

    @classmethod
    def for_params(cls, n: int, learning_rate: float = 3e-4) -> "OptimizerState":
        return cls(step=0, first_moment=np.zeros(n), second_moment=np.zeros(n), learning_rate=learning_rate)


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """One bias-corrected Adam update. Non-finite gradients skip the update
    (moments untouched) and bump the skipped counter."""
    if params.shape != grads.shape:
        raise StructuralError("param/grad length mismatch")
    if not np.all(np.isfinite(grads)):
        state.skipped_updates += 1
        return params, state
    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1.0 - state.beta1**state.step)
    v_hat = state.second_moment / (1.0 - state.beta2**state.step)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, state


def split_policy_heads(raw: np.ndarray):
    """Split a policy net output into (mean, clamped log-std) halves."""
    half = raw.shape[-1] // 2
    mean = raw[..., :half]
    log_std = np.clip(raw[..., half:], LOG_STD_MIN, LOG_STD_MAX)
    unclamped = raw[..., half:]
    clamp_mask = (unclamped > LOG_STD_MIN) & (unclamped < LOG_STD_MAX)
    return mean, log_std, clamp_mask


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) in a form stable for large |u|.
    au = np.abs(u)
    return 2.0 * (np.log(2.0) - au - np.log1p(np.exp(-2.0 * au)))


def squash_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray, half_span: np.ndarray) -> np.ndarray:
    """Log-density of the bounded action tanh(u) scaled by half_span, where
    u ~ N(mean, exp(log_std)^2). Sums over the action dimension."""
    std = np.exp(log_std)
    z = (u - mean) / std
    gauss = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    correction = _log1m_tanh_sq(u) + np.log(half_span)
    return np.sum(gauss - correction, axis=-1)


def gaussian_policy_sample(net: DenseNet, obs_vec: np.ndarray, noise: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Reparameterized sample from the tanh-squashed Gaussian policy.

    Returns (pre_squash, action, log_prob); deterministic given noise.
    """
    raw = net.forward(obs_vec)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite policy net output")
    mean, log_std, _ = split_policy_heads(raw)
    std = np.exp(log_std)
    u = mean + std * np.asarray(noise, dtype=np.float64)
    t = np.tanh(u)
    center = (np.asarray(hi) + np.asarray(lo)) / 2.0
    half_span = (np.asarray(hi) - np.asarray(lo)) / 2.0
    action = center + half_span * t
    log_prob = squash_log_prob(u, mean, log_std, half_span)
    return u, action, log_prob


def log_prob_of_pre_squash(net: DenseNet, obs_vec: np.ndarray, u: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Log-density of a previously chosen action identified by its pre-squash
    value, under the net's current policy."""
    raw = net.forward(obs_vec)
    mean, log_std, _ = split_policy_heads(raw)
    half_span = (np.asarray(hi) - np.asarray(lo)) / 2.0
    return squash_log_prob(np.asarray(u, dtype=np.float64), mean, log_std, half_span)


def pre_squash_of_action(action: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Invert the bounded squash; clipped away from the exact bounds."""
    center = (np.asarray(hi) + np.asarray(lo)) / 2.0
    half_span = (np.asarray(hi) - np.asarray(lo)) / 2.0
    t = np.clip((np.asarray(action, dtype=np.float64) - center) / half_span, -1.0 + 1e-9, 1.0 - 1e-9)
    return np.arctanh(t)
