"""On-policy PPO-Clip: rollout buffer, GAE advantages, clipped surrogate.

Old log-probs are recorded at action time and never recomputed; the update
consumes the whole horizon, then clears it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import PolicySnapshot, StructuralError
from .nets import (
    DenseNet,
    OptimizerState,
    adam_step,
    split_policy_heads,
    squash_log_prob,
)

logger = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 3e-4
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    gae_lambda: float = 0.95
    gamma: float = 1.0
    horizon: int = 2048
    pause_during_update: bool = False

    def __post_init__(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip epsilon must be in (0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("lambda must be in [0, 1]")


class RolloutBuffer:
    """Ordered on-policy transitions with action-time log-probs."""

    def __init__(self, horizon: int):
        self.horizon = int(horizon)
        self.clear()

    def clear(self) -> None:
        self.obs = []
        self.actions = []
        self.pre_squash = []
        self.log_probs = []
        self.rewards = []
        self.dones = []
        self.next_obs = []

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def full(self) -> bool:
        return len(self) >= self.horizon

    def add(self, obs_vec, action, pre_squash, log_prob, reward, done, next_obs_vec) -> None:
        self.obs.append(np.asarray(obs_vec, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.pre_squash.append(np.asarray(pre_squash, dtype=np.float64))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.next_obs.append(np.asarray(next_obs_vec, dtype=np.float64))

    def arrays(self) -> dict:
        return {
            "obs": np.stack(self.obs),
            "pre_squash": np.stack(self.pre_squash),
            "log_probs": np.asarray(self.log_probs),
            "rewards": np.asarray(self.rewards),
            "dones": np.asarray(self.dones, dtype=np.float64),
            "next_obs": np.stack(self.next_obs),
        }


def clip_surrogate(ratio, advantage, eps):
    """min(ratio*H, clip(ratio, 1-eps, 1+eps)*H), elementwise."""
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    return np.minimum(ratio * advantage, clipped)


def compute_advantages(buffer: RolloutBuffer, value_net: DenseNet, gamma: float, lam: float, normalize: bool = True):
    """GAE(lambda) advantages (reset at episode boundaries) and value
    targets = advantage + value estimate."""
    data = buffer.arrays()
    v = value_net.forward(data["obs"])[:, 0]
    v_next = value_net.forward(data["next_obs"])[:, 0]
    not_done = 1.0 - data["dones"]
    deltas = data["rewards"] + gamma * v_next * not_done - v
    n = len(deltas)
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = deltas[t] + gamma * lam * not_done[t] * acc
        adv[t] = acc
    targets = adv + v
    if normalize:
        std = adv.std()
        if std > 1e-12:
            adv = (adv - adv.mean()) / std
        # zero-variance batch: skip normalization
    return adv, targets


def ppo_loss(actor: DenseNet, value_net: DenseNet, mb: dict, lo, hi, clip_eps: float):
    """Total PPO loss (negated clipped surrogate + squared value error) with
    exact gradients for both nets."""
    obs = mb["obs"]
    B = obs.shape[0]
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    half_span = (hi - lo) / 2.0

    raw, cache = actor.forward_cache(obs)
    mean, log_std, clamp_mask = split_policy_heads(raw)
    std = np.exp(log_std)
    u = mb["pre_squash"]
    logp_new = squash_log_prob(u, mean, log_std, half_span)
    ratio = np.exp(logp_new - mb["log_probs"])
    adv = mb["advantages"]
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(np.mean(surrogate))

    active = (unclipped <= clipped).astype(np.float64)
    dloss_dlogp = -(active * adv * ratio) / B
    z = (u - mean) / std
    g_mean = dloss_dlogp[:, None] * (z / std)
    g_logstd = dloss_dlogp[:, None] * (z * z - 1.0) * clamp_mask
    actor_grads, _ = actor.backward(cache, np.concatenate([g_mean, g_logstd], axis=1))

    v, vcache = value_net.forward_cache(obs)
    vdiff = v[:, 0] - mb["targets"]
    value_loss = float(np.mean(0.5 * vdiff * vdiff))
    value_grads, _ = value_net.backward(vcache, (vdiff / B)[:, None])

    return policy_loss + value_loss, actor_grads, value_grads


class PpoAgent:
    """Actor + value net with the synchronous PPO update contract."""

    def __init__(self, obs_dim: int, action_lo, action_hi, cfg: PpoConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.lo = np.asarray(action_lo, dtype=np.float64)
        self.hi = np.asarray(action_hi, dtype=np.float64)
        self.action_dim = self.lo.size
        hid = list(cfg.hidden)
        self.actor = DenseNet([obs_dim] + hid + [2 * self.action_dim], ["tanh"] * len(hid) + ["identity"], rng)
        self.value_net = DenseNet([obs_dim] + hid + [1], ["tanh"] * len(hid) + ["identity"], rng)
        self.actor_opt = OptimizerState.for_params(self.actor.param_count, cfg.learning_rate)
        self.value_opt = OptimizerState.for_params(self.value_net.param_count, cfg.learning_rate)
        self.version = 0

    def act(self, obs_vec: np.ndarray, noise: np.ndarray):
        raw = self.actor.forward(obs_vec)
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError("non-finite policy output")
        mean, log_std, _ = split_policy_heads(raw)
        stddev = np.exp(log_std)
        u = mean + stddev * noise
        t = np.tanh(u)
        center = (self.hi + self.lo) / 2.0
        half_span = (self.hi - self.lo) / 2.0
        action = center + half_span * t
        log_prob = squash_log_prob(u, mean, log_std, half_span)
        return action, float(np.squeeze(log_prob)), u

    def update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> PolicySnapshot:
        """Several epochs of minibatch ascent on the clipped surrogate and
        descent on squared value error; clears the buffer."""
        if not buffer.full:
            raise StructuralError("rollout buffer not full")
        adv, targets = compute_advantages(buffer, self.value_net, self.cfg.gamma, self.cfg.gae_lambda)
        data = buffer.arrays()
        n = len(adv)
        saved_actor = self.actor.pack()
        saved_value = self.value_net.pack()
        ok = True
        for _ in range(self.cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, self.cfg.minibatch_size):
                idx = perm[start : start + self.cfg.minibatch_size]
                mb = {
                    "obs": data["obs"][idx],
                    "pre_squash": data["pre_squash"][idx],
                    "log_probs": data["log_probs"][idx],
                    "advantages": adv[idx],
                    "targets": targets[idx],
                }
                loss, agrads, vgrads = ppo_loss(self.actor, self.value_net, mb, self.lo, self.hi, self.cfg.clip_eps)
                if not np.isfinite(loss):
                    ok = False
                    break
                new_actor, _ = adam_step(self.actor.pack(), agrads, self.actor_opt)
                self.actor.unpack(new_actor)
                new_value, _ = adam_step(self.value_net.pack(), vgrads, self.value_opt)
                self.value_net.unpack(new_value)
            if not ok:
                break
        if not ok:
            logger.warning("non-finite PPO loss; update aborted, keeping old params")
            self.actor.unpack(saved_actor)
            self.value_net.unpack(saved_value)
        buffer.clear()
        self.version += 1
        return self.make_snapshot()

    def make_snapshot(self, wire: bool = True) -> PolicySnapshot:
        flat = self.actor.pack()
        if wire:
            flat32 = flat.astype(np.float32)
            self.actor.unpack(flat32.astype(np.float64))
            return PolicySnapshot.create(self.version, flat32)
        return PolicySnapshot.create(self.version, flat.astype(np.float32))

    def load_snapshot(self, snap: PolicySnapshot) -> None:
        if not snap.verify():
            raise StructuralError("snapshot checksum mismatch")
        self.actor.unpack(snap.weights.astype(np.float64))
        self.version = snap.version


def ppo_update(agent: PpoAgent, buffer: RolloutBuffer, rng: np.random.Generator):
    return agent.update(buffer, rng)
