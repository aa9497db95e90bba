"""Asynchronous soft actor-critic: losses, replay buffer, update cycle.

Gradients are hand-derived and exact; every loss takes its noise draws as
explicit arguments so the math is pure and checkable against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PolicySnapshot, StructuralError, Transition, flatten_observation
from .nets import (
    DenseNet,
    OptimizerState,
    adam_step,
    squash_log_prob,
    split_policy_heads,
)


@dataclass
class SacConfig:
    hidden: tuple = (64, 64)
    learning_rate: float = 3e-4
    alpha: float = 0.2  # fixed temperature
    tau: float = 0.005  # polyak rate
    gamma: float = 1.0  # undiscounted episodic formulation
    minibatch_size: int = 64
    buffer_capacity: int = 16000
    single_critic: bool = False
    init_random_steps: int = 1000
    # Rewards are multiplied by this at the training-data boundary (the loss
    # math itself is unscaled); keeps critic targets commensurate with the
    # fixed temperature when task rewards are large.
    reward_scale: float = 1.0


@dataclass
class UpdateThrottle:
    """back_to_back runs as fast as compute allows; every_n_steps caps the
    total update count at floor(steps / n)."""

    mode: str = "back_to_back"
    n: int = 12

    def __post_init__(self):
        if self.mode not in ("back_to_back", "every_n_steps"):
            raise ValueError(f"unknown throttle mode: {self.mode}")
        if self.n < 1:
            raise ValueError("throttle n must be >= 1")

    def permits(self, step_count: int, updates_done: int) -> bool:
        if self.mode == "back_to_back":
            return True
        return updates_done < step_count // self.n


class ReplayBuffer:
    """Fixed-capacity ring of transitions; FIFO eviction, uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.episode_ids = np.zeros(capacity, dtype=np.int64)
        self.step_indices = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.write_cursor = 0

    def insert(self, obs_vec, action, reward, next_obs_vec, done, episode_id=0, step_index=0) -> None:
        i = self.write_cursor
        self.obs[i] = obs_vec
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs_vec
        self.dones[i] = done
        self.episode_ids[i] = episode_id
        self.step_indices[i] = step_index
        self.write_cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def insert_transition(self, t: Transition) -> None:
        self.insert(
            flatten_observation(t.obs),
            t.action,
            t.reward,
            flatten_observation(t.next_obs),
            t.done,
            t.episode_id,
            t.step_index,
        )

    def ready(self, minibatch_size: int) -> bool:
        return self.size >= minibatch_size

    def sample(self, k: int, rng: np.random.Generator) -> dict:
        """Uniform with replacement over current contents."""
        if self.size < k:
            raise StructuralError(f"buffer not ready: size {self.size} < {k}")
        idx = rng.integers(0, self.size, size=k)
        return {
            "obs": self.obs[idx].astype(np.float64),
            "actions": self.actions[idx].astype(np.float64),
            "rewards": self.rewards[idx].astype(np.float64),
            "next_obs": self.next_obs[idx].astype(np.float64),
            "dones": self.dones[idx].astype(np.float64),
        }


def _policy_forward(actor: DenseNet, obs: np.ndarray):
    raw, cache = actor.forward_cache(obs)
    mean, log_std, clamp_mask = split_policy_heads(raw)
    return mean, log_std, clamp_mask, cache


def _sample_squashed(mean, log_std, noise, lo, hi):
    std = np.exp(log_std)
    u = mean + std * noise
    t = np.tanh(u)
    center = (hi + lo) / 2.0
    half_span = (hi - lo) / 2.0
    action = center + half_span * t
    log_prob = squash_log_prob(u, mean, log_std, half_span)
    return u, t, action, log_prob


class SacAgent:
    """Twin-critic SAC over flat observations.

    A `single_critic` flag preserves the plain one-critic form for ablation;
    twin min-backup is the default for stability.
    """

    def __init__(self, obs_dim: int, action_lo, action_hi, cfg: SacConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.lo = np.asarray(action_lo, dtype=np.float64)
        self.hi = np.asarray(action_hi, dtype=np.float64)
        self.action_dim = self.lo.size
        hid = list(cfg.hidden)
        self.actor = DenseNet([obs_dim] + hid + [2 * self.action_dim], ["tanh"] * len(hid) + ["identity"], rng)
        n_critics = 1 if cfg.single_critic else 2
        qdims = [obs_dim + self.action_dim] + hid + [1]
        qacts = ["tanh"] * len(hid) + ["identity"]
        self.critics = [DenseNet(qdims, qacts, rng) for _ in range(n_critics)]
        self.target_critics = [c.copy() for c in self.critics]
        self.actor_opt = OptimizerState.for_params(self.actor.param_count, cfg.learning_rate)
        self.critic_opts = [OptimizerState.for_params(c.param_count, cfg.learning_rate) for c in self.critics]
        self.version = 0
        self.updates_done = 0

    # -- acting ---------------------------------------------------------

    def act(self, obs_vec: np.ndarray, noise: np.ndarray):
        """Sample a bounded action. Returns (action, log_prob, pre_squash)."""
        mean, log_std, _, _ = _policy_forward(self.actor, obs_vec)
        if not np.all(np.isfinite(mean)):
            raise FloatingPointError("non-finite policy output")
        u, _, action, log_prob = _sample_squashed(mean, log_std, noise, self.lo, self.hi)
        return action, float(np.squeeze(log_prob)), u

    # -- losses ----------------------------------------------------------

    def soft_value(self, next_obs_vec: np.ndarray, noise: np.ndarray) -> float:
        """Entropy-augmented state value under the target critics, with the
        action resampled from the current policy."""
        obs = np.atleast_2d(np.asarray(next_obs_vec, dtype=np.float64))
        noise = np.atleast_2d(noise)
        mean, log_std, _, _ = _policy_forward(self.actor, obs)
        _, _, action, log_prob = _sample_squashed(mean, log_std, noise, self.lo, self.hi)
        qin = np.concatenate([obs, action], axis=1)
        qs = np.stack([tc.forward(qin)[:, 0] for tc in self.target_critics])
        return float(np.min(qs, axis=0)[0] - self.cfg.alpha * log_prob[0])

    def critic_loss(self, batch: dict, noise: np.ndarray):
        """Mean squared soft Bellman residual (averaged over critics) and the
        per-critic parameter gradients. No gradient flows into targets."""
        obs = batch["obs"]
        acts = batch["actions"]
        B = obs.shape[0]
        mean, log_std, _, _ = _policy_forward(self.actor, batch["next_obs"])
        _, _, next_action, next_logp = _sample_squashed(mean, log_std, noise, self.lo, self.hi)
        tqin = np.concatenate([batch["next_obs"], next_action], axis=1)
        tq = np.stack([tc.forward(tqin)[:, 0] for tc in self.target_critics])
        v_next = np.min(tq, axis=0) - self.cfg.alpha * next_logp
        y = batch["rewards"] + self.cfg.gamma * (1.0 - batch["dones"]) * v_next

        qin = np.concatenate([obs, acts], axis=1)
        n = len(self.critics)
        total = 0.0
        grads = []
        for critic in self.critics:
            q, cache = critic.forward_cache(qin)
            diff = q[:, 0] - y
            total += float(np.mean(0.5 * diff * diff)) / n
            gout = (diff / (B * n))[:, None]
            g, _ = critic.backward(cache, gout)
            grads.append(g)
        return total, grads

    def actor_loss(self, batch: dict, noise: np.ndarray):
        """mean(alpha * log pi - min-twin Q) with reparameterized actions;
        gradients flow through the actor only."""
        obs = batch["obs"]
        B, da = obs.shape[0], self.action_dim
        alpha = self.cfg.alpha
        mean, log_std, clamp_mask, cache = _policy_forward(self.actor, obs)
        std = np.exp(log_std)
        u = mean + std * noise
        t = np.tanh(u)
        center = (self.hi + self.lo) / 2.0
        half_span = (self.hi - self.lo) / 2.0
        action = center + half_span * t
        log_prob = squash_log_prob(u, mean, log_std, half_span)

        qin = np.concatenate([obs, action], axis=1)
        qcaches = []
        qvals = []
        for critic in self.critics:
            q, qc = critic.forward_cache(qin)
            qvals.append(q[:, 0])
            qcaches.append(qc)
        qvals = np.stack(qvals)  # (n_critics, B)
        which = np.argmin(qvals, axis=0)
        qmin = qvals[which, np.arange(B)]
        loss = float(np.mean(alpha * log_prob - qmin))

        # d loss / d action via the argmin critic of each sample.
        dq_da = np.zeros((B, da))
        for ci, critic in enumerate(self.critics):
            sel = (which == ci).astype(np.float64)[:, None]
            if not np.any(sel):
                continue
            _, gin = critic.backward(qcaches[ci], sel)
            dq_da += gin[:, self.obs_dim :]
        dloss_da = -dq_da / B

        # Chain through the squash and the reparameterized log-prob.
        # d log_prob / du = 2*tanh(u) (tanh correction); Gaussian part is
        # constant in u under reparameterization.
        dloss_du = (alpha / B) * (2.0 * t) + dloss_da * half_span * (1.0 - t * t)
        g_mean = dloss_du
        g_logstd = dloss_du * std * noise - (alpha / B) * np.ones_like(log_std)
        g_logstd = g_logstd * clamp_mask
        gout = np.concatenate([g_mean, g_logstd], axis=1)
        grads, _ = self.actor.backward(cache, gout)
        return loss, grads

    # -- updates ---------------------------------------------------------

    def polyak_update(self) -> None:
        tau = self.cfg.tau
        for online, target in zip(self.critics, self.target_critics):
            target.unpack((1.0 - tau) * target.pack() + tau * online.pack())

    def update(self, batch: dict, critic_noise: np.ndarray, actor_noise: np.ndarray) -> dict:
        """One critic step, one actor step, one polyak step."""
        closs, cgrads = self.critic_loss(batch, critic_noise)
        for critic, opt, g in zip(self.critics, self.critic_opts, cgrads):
            new_params, _ = adam_step(critic.pack(), g, opt)
            critic.unpack(new_params)
        aloss, agrads = self.actor_loss(batch, actor_noise)
        new_params, _ = adam_step(self.actor.pack(), agrads, self.actor_opt)
        self.actor.unpack(new_params)
        self.polyak_update()
        self.updates_done += 1
        self.version += 1
        return {"critic_loss": closs, "actor_loss": aloss}

    def update_cycle(self, buffer: ReplayBuffer, throttle: UpdateThrottle, step_count: int, rng: np.random.Generator):
        """Run one throttle-gated update; returns a fresh PolicySnapshot or
        None when throttled / buffer not ready."""
        if not throttle.permits(step_count, self.updates_done):
            return None
        if not buffer.ready(self.cfg.minibatch_size):
            return None
        batch = buffer.sample(self.cfg.minibatch_size, rng)
        if self.cfg.reward_scale != 1.0:
            batch["rewards"] = batch["rewards"] * self.cfg.reward_scale
        B = self.cfg.minibatch_size
        critic_noise = rng.standard_normal((B, self.action_dim))
        actor_noise = rng.standard_normal((B, self.action_dim))
        self.update(batch, critic_noise, actor_noise)
        return self.make_snapshot()

    # -- snapshots --------------------------------------------------------

    def make_snapshot(self, wire: bool = True) -> PolicySnapshot:
        """Snapshot of actor weights. When wire=True the weights are rounded
        to float32 and written back, so actor and learner never diverge
        beyond wire quantization."""
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


def sac_update_cycle(agent: SacAgent, buffer: ReplayBuffer, throttle: UpdateThrottle, step_count: int, rng: np.random.Generator):
    return agent.update_cycle(buffer, throttle, step_count, rng)
