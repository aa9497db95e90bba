"""Tests for the soft actor-critic agent: losses against finite differences,
replay-buffer mechanics, throttling, and snapshot exchange."""

import numpy as np
import pytest

from relodkit.core import StructuralError
from relodkit.sac import ReplayBuffer, SacAgent, SacConfig, UpdateThrottle


def make_agent(obs_dim=3, action_dim=1, seed=0, **cfg_kwargs):
    cfg = SacConfig(hidden=cfg_kwargs.pop("hidden", (8, 8)), **cfg_kwargs)
    rng = np.random.default_rng(seed)
    lo = -0.7 * np.ones(action_dim)
    hi = 0.7 * np.ones(action_dim)
    return SacAgent(obs_dim, lo, hi, cfg, rng)


def random_batch(rng, B, obs_dim, action_dim, lo=-0.7, hi=0.7):
    return {
        "obs": rng.standard_normal((B, obs_dim)),
        "actions": rng.uniform(lo, hi, size=(B, action_dim)),
        "rewards": rng.standard_normal(B),
        "next_obs": rng.standard_normal((B, obs_dim)),
        "dones": (rng.random(B) < 0.2).astype(np.float64),
    }


class TestSoftValue:
    def test_zero_weight_agent_matches_hand_formula(self):
        # Zero actor => mean=0, log_std=0; zero critics => Q=0, so the soft
        # value is -alpha * log_prob of the sampled action. With noise=0 the
        # Gaussian part is the density at its mean and the tanh correction
        # at u=0 is -log(half_span).
        agent = make_agent(alpha=0.2)
        agent.actor.unpack(np.zeros(agent.actor.param_count))
        for tc in agent.target_critics:
            tc.unpack(np.zeros(tc.param_count))
        logp = -0.5 * np.log(2 * np.pi) - np.log(0.7)
        v = agent.soft_value(np.zeros(3), np.zeros(1))
        assert v == pytest.approx(-0.2 * logp, abs=1e-12)

    def test_min_over_target_critics(self):
        agent = make_agent(seed=3)
        rng = np.random.default_rng(1)
        obs = rng.standard_normal(3)
        noise = rng.standard_normal(1)
        v = agent.soft_value(obs, noise)
        # Recompute with each target critic alone; min backup means the
        # combined value equals the smaller of the two.
        singles = []
        saved = agent.target_critics
        for tc in saved:
            agent.target_critics = [tc]
            singles.append(agent.soft_value(obs, noise))
        agent.target_critics = saved
        assert v == pytest.approx(min(singles), abs=1e-12)


class TestCriticLoss:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        agent = make_agent(obs_dim=3, action_dim=2, seed=7, hidden=(6,))
        batch = random_batch(rng, 5, 3, 2)
        noise = rng.standard_normal((5, 2))
        _, grads = agent.critic_loss(batch, noise)
        eps = 1e-6
        for ci, critic in enumerate(agent.critics):
            base = critic.pack()
            for j in rng.choice(base.size, size=12, replace=False):
                for sign, out in ((+1, []), ):
                    pass
                plus = base.copy(); plus[j] += eps
                minus = base.copy(); minus[j] -= eps
                critic.unpack(plus)
                lp, _ = agent.critic_loss(batch, noise)
                critic.unpack(minus)
                lm, _ = agent.critic_loss(batch, noise)
                critic.unpack(base)
                fd = (lp - lm) / (2 * eps)
                assert grads[ci][j] == pytest.approx(fd, abs=1e-6)

    def test_done_transitions_regress_to_reward_only(self):
        # With all dones set, the target is just the (scaled) reward; an
        # exact-zero critic on a zero-reward batch has zero loss.
        agent = make_agent()
        for c in agent.critics:
            c.unpack(np.zeros(c.param_count))
        batch = {
            "obs": np.zeros((4, 3)),
            "actions": np.zeros((4, 1)),
            "rewards": np.zeros(4),
            "next_obs": np.zeros((4, 3)),
            "dones": np.ones(4),
        }
        loss, grads = agent.critic_loss(batch, np.zeros((4, 1)))
        assert loss == 0.0
        for g in grads:
            assert np.all(g == 0.0)

    def test_no_gradient_into_targets_or_actor(self):
        rng = np.random.default_rng(2)
        agent = make_agent(seed=2)
        batch = random_batch(rng, 6, 3, 1)
        noise = rng.standard_normal((6, 1))
        actor_before = agent.actor.pack().copy()
        targets_before = [tc.pack().copy() for tc in agent.target_critics]
        agent.critic_loss(batch, noise)
        assert np.array_equal(agent.actor.pack(), actor_before)
        for tc, before in zip(agent.target_critics, targets_before):
            assert np.array_equal(tc.pack(), before)


class TestActorLoss:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        agent = make_agent(obs_dim=3, action_dim=2, seed=11, hidden=(6,))
        batch = random_batch(rng, 5, 3, 2)
        noise = rng.standard_normal((5, 2))
        _, grads = agent.actor_loss(batch, noise)
        base = agent.actor.pack()
        eps = 1e-6
        for j in rng.choice(base.size, size=16, replace=False):
            plus = base.copy(); plus[j] += eps
            minus = base.copy(); minus[j] -= eps
            agent.actor.unpack(plus)
            lp, _ = agent.actor_loss(batch, noise)
            agent.actor.unpack(minus)
            lm, _ = agent.actor_loss(batch, noise)
            agent.actor.unpack(base)
            fd = (lp - lm) / (2 * eps)
            assert grads[j] == pytest.approx(fd, abs=2e-6)

    def test_critics_untouched_by_actor_step(self):
        rng = np.random.default_rng(4)
        agent = make_agent(seed=4)
        batch = random_batch(rng, 6, 3, 1)
        critics_before = [c.pack().copy() for c in agent.critics]
        agent.actor_loss(batch, rng.standard_normal((6, 1)))
        for c, before in zip(agent.critics, critics_before):
            assert np.array_equal(c.pack(), before)

    def test_single_critic_variant(self):
        rng = np.random.default_rng(5)
        agent = make_agent(seed=5, single_critic=True)
        assert len(agent.critics) == 1 and len(agent.target_critics) == 1
        batch = random_batch(rng, 4, 3, 1)
        loss, grads = agent.actor_loss(batch, rng.standard_normal((4, 1)))
        assert np.isfinite(loss) and np.all(np.isfinite(grads))


class TestPolyak:
    def test_exact_interpolation(self):
        agent = make_agent(seed=9, tau=0.25)
        online = [c.pack().copy() for c in agent.critics]
        # Perturb targets so they differ from the online nets.
        for tc in agent.target_critics:
            tc.unpack(tc.pack() + 1.0)
        targets = [tc.pack().copy() for tc in agent.target_critics]
        agent.polyak_update()
        for on, tgt, tc in zip(online, targets, agent.target_critics):
            expected = 0.75 * tgt + 0.25 * on
            assert np.allclose(tc.pack(), expected, atol=1e-14)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(4, obs_dim=1, action_dim=1)
        for i in range(6):
            buf.insert([float(i)], [0.0], float(i), [0.0], False)
        assert buf.size == 4
        kept = sorted(buf.rewards.tolist())
        assert kept == [2.0, 3.0, 4.0, 5.0]

    def test_sample_membership_and_shapes(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(10, obs_dim=2, action_dim=1)
        for i in range(10):
            buf.insert([i, -i], [0.1 * i], i, [i + 1, -i], i == 9)
        batch = buf.sample(6, rng)
        assert batch["obs"].shape == (6, 2)
        assert batch["obs"].dtype == np.float64
        for row, r in zip(batch["obs"], batch["rewards"]):
            assert row[0] == r and row[1] == -r

    def test_sample_before_ready_raises(self):
        buf = ReplayBuffer(10, obs_dim=1, action_dim=1)
        buf.insert([0.0], [0.0], 0.0, [0.0], False)
        assert not buf.ready(2)
        with pytest.raises(StructuralError):
            buf.sample(2, np.random.default_rng(0))

    def test_uniform_sampling_chi_square(self):
        # 1e4 draws over 20 slots; chi-square well under the 1% critical
        # value for 19 degrees of freedom (36.19).
        rng = np.random.default_rng(123)
        buf = ReplayBuffer(20, obs_dim=1, action_dim=1)
        for i in range(20):
            buf.insert([float(i)], [0.0], float(i), [0.0], False)
        counts = np.zeros(20)
        for _ in range(500):
            batch = buf.sample(20, rng)
            for r in batch["rewards"]:
                counts[int(r)] += 1
        expected = counts.sum() / 20
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < 36.19


class TestThrottle:
    def test_back_to_back_always_permits(self):
        th = UpdateThrottle("back_to_back")
        assert th.permits(0, 10**6)

    def test_every_n_steps_caps_count(self):
        th = UpdateThrottle("every_n_steps", n=12)
        done = 0
        for step in range(1, 49):
            if th.permits(step, done):
                done += 1
        assert done == 48 // 12

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            UpdateThrottle("sometimes")
        with pytest.raises(ValueError):
            UpdateThrottle("every_n_steps", n=0)

    def test_update_cycle_respects_throttle_and_readiness(self):
        rng = np.random.default_rng(0)
        agent = make_agent(minibatch_size=4)
        buf = ReplayBuffer(16, obs_dim=3, action_dim=1)
        th = UpdateThrottle("every_n_steps", n=2)
        assert agent.update_cycle(buf, th, step_count=10, rng=rng) is None  # empty
        for i in range(8):
            buf.insert(rng.standard_normal(3), [0.0], 0.0, rng.standard_normal(3), False)
        snap = agent.update_cycle(buf, th, step_count=2, rng=rng)
        assert snap is not None and agent.updates_done == 1
        # Quota for step_count=2 with n=2 is one update; the next call is gated.
        assert agent.update_cycle(buf, th, step_count=2, rng=rng) is None


class TestUpdate:
    def test_reward_scale_applied_at_data_boundary(self):
        # Agent A scales rewards by 0.5 in update_cycle; agent B sees rewards
        # pre-scaled by 0.5 with scale 1. Identical seeds => identical params.
        def run(scale, reward):
            agent = make_agent(seed=42, minibatch_size=4, reward_scale=scale)
            buf = ReplayBuffer(16, obs_dim=3, action_dim=1)
            rng_fill = np.random.default_rng(5)
            for _ in range(8):
                buf.insert(rng_fill.standard_normal(3), [0.1], reward,
                           rng_fill.standard_normal(3), False)
            agent.update_cycle(buf, UpdateThrottle(), 1, np.random.default_rng(9))
            return agent.actor.pack()

        assert np.array_equal(run(0.5, 2.0), run(1.0, 1.0))

    def test_update_advances_version_and_counters(self):
        rng = np.random.default_rng(1)
        agent = make_agent(minibatch_size=4)
        batch = random_batch(rng, 4, 3, 1)
        out = agent.update(batch, rng.standard_normal((4, 1)), rng.standard_normal((4, 1)))
        assert agent.version == 1 and agent.updates_done == 1
        assert np.isfinite(out["critic_loss"]) and np.isfinite(out["actor_loss"])

    def test_bandit_converges_to_rewarding_action(self):
        # Constant state, reward 1 - (a - 0.35)^2, episodes of length one.
        # The critic must fit the reward surface and the actor must move its
        # mode near the optimum.
        rng = np.random.default_rng(8)
        agent = make_agent(
            obs_dim=2, seed=8, hidden=(16, 16), alpha=0.01,
            learning_rate=3e-3, minibatch_size=32, tau=0.05,
        )
        buf = ReplayBuffer(2000, obs_dim=2, action_dim=1)
        obs = np.zeros(2)
        for _ in range(1000):
            a = rng.uniform(-0.7, 0.7)
            buf.insert(obs, [a], 1.0 - (a - 0.35) ** 2, obs, True)
        for _ in range(800):
            batch = buf.sample(32, rng)
            agent.update(batch, rng.standard_normal((32, 1)), rng.standard_normal((32, 1)))
        action, _, _ = agent.act(obs[None, :], np.zeros((1, 1)))
        assert abs(float(action[0, 0]) - 0.35) < 0.15
        # Critic value at the learned action should sit near the true reward.
        qin = np.concatenate([obs[None, :], action], axis=1)
        q = min(float(c.forward(qin)[0, 0]) for c in agent.critics)
        assert abs(q - (1.0 - (float(action[0, 0]) - 0.35) ** 2)) < 0.2


class TestSnapshots:
    def test_roundtrip_reproduces_actions(self):
        agent = make_agent(seed=13)
        other = make_agent(seed=14)
        snap = agent.make_snapshot()
        other.load_snapshot(snap)
        obs = np.random.default_rng(0).standard_normal((1, 3))
        noise = np.zeros((1, 1))
        a1, _, _ = agent.act(obs, noise)
        a2, _, _ = other.act(obs, noise)
        assert np.array_equal(a1, a2)
        assert other.version == agent.version

    def test_wire_snapshot_writes_back_quantized_weights(self):
        agent = make_agent(seed=15)
        snap = agent.make_snapshot(wire=True)
        packed = agent.actor.pack()
        assert np.array_equal(packed, snap.weights.astype(np.float64))

    def test_tampered_snapshot_rejected(self):
        agent = make_agent(seed=16)
        snap = agent.make_snapshot()
        bad = snap.weights.copy()
        bad[0] += 1.0
        tampered = type(snap)(version=snap.version, weights=bad, checksum=snap.checksum)
        with pytest.raises(StructuralError):
            make_agent(seed=17).load_snapshot(tampered)
