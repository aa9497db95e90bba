"""End-to-end property gate for the whole package.

Eleven numbered criteria: exact gradients, learning strength, mode
orderings, throttle degradation, PPO mode-invariance, latency-pathway
isolation, protocol robustness, queue no-loss, replay uniformity,
determinism, and reward-formula fidelity. The multi-seed learning criteria
run full simulated experiments and dominate the runtime.
"""

import math
import os

import numpy as np
import pytest

from relodkit.core import RngStreams
from relodkit.envs import PixelReacher, arm_reward_from_mask, center_weight_matrix
from relodkit.nets import DenseNet
from relodkit.orchestrator import build_topology
from relodkit.ppo import PpoConfig, ppo_loss
from relodkit.sac import ReplayBuffer, SacAgent, SacConfig
from relodkit.transport import (
    ACT,
    HEARTBEAT,
    HELLO,
    OBS,
    POLICY,
    TRANSITIONS,
    BoundedQueue,
    FramingError,
    IntegrityError,
    Message,
    ProtocolError,
    decode,
    encode,
)

# Tuned benchmark configuration: fixed temperature scaled to the task's
# reward magnitudes (the loss math itself is unscaled).
BENCH_SAC = dict(alpha=0.01, reward_scale=0.02)


def final_mean(records, fraction=0.10):
    rets = [r.episodic_return for r in records]
    n = max(1, int(math.ceil(len(rets) * fraction)))
    return float(np.mean(rets[-n:]))


def pooled_stderr(a, b):
    va = np.var(a, ddof=1) / len(a)
    vb = np.var(b, ddof=1) / len(b)
    return math.sqrt(va + vb)


# -- criterion 1: gradient correctness --------------------------------------


class TestCriterion1GradientCorrectness:
    """Analytic gradients of the critic loss, the actor loss, and the PPO
    total loss match central finite differences on random small nets."""

    EPS = 1e-6
    MAX_REL = 1e-5
    INSTANCES = 100

    @staticmethod
    def _rel_err(analytic, numeric):
        scale = max(abs(analytic), abs(numeric), 1e-8)
        return abs(analytic - numeric) / scale

    def _check_params(self, net, loss_fn, grads, rng, n_checks=4):
        base = net.pack()
        for j in rng.choice(base.size, size=min(n_checks, base.size), replace=False):
            plus = base.copy(); plus[j] += self.EPS
            minus = base.copy(); minus[j] -= self.EPS
            net.unpack(plus)
            lp = loss_fn()
            net.unpack(minus)
            lm = loss_fn()
            net.unpack(base)
            fd = (lp - lm) / (2 * self.EPS)
            if abs(fd) < 1e-10 and abs(grads[j]) < 1e-10:
                continue
            assert self._rel_err(grads[j], fd) <= self.MAX_REL, (
                f"param {j}: analytic {grads[j]!r} vs fd {fd!r}"
            )

    def test_sac_losses_match_finite_differences(self):
        rng = np.random.default_rng(1001)
        for trial in range(self.INSTANCES // 2):
            obs_dim = int(rng.integers(2, 5))
            adim = int(rng.integers(1, 3))
            agent = SacAgent(obs_dim, -0.7 * np.ones(adim), 0.7 * np.ones(adim),
                             SacConfig(hidden=(int(rng.integers(3, 7)),)), np.random.default_rng(trial))
            assert agent.actor.param_count <= 200 or obs_dim > 3  # small nets
            B = 4
            batch = {
                "obs": rng.standard_normal((B, obs_dim)),
                "actions": rng.uniform(-0.7, 0.7, size=(B, adim)),
                "rewards": rng.standard_normal(B),
                "next_obs": rng.standard_normal((B, obs_dim)),
                "dones": (rng.random(B) < 0.3).astype(np.float64),
            }
            cnoise = rng.standard_normal((B, adim))
            anoise = rng.standard_normal((B, adim))
            _, cgrads = agent.critic_loss(batch, cnoise)
            self._check_params(agent.critics[0], lambda: agent.critic_loss(batch, cnoise)[0], cgrads[0], rng)
            _, agrads = agent.actor_loss(batch, anoise)
            self._check_params(agent.actor, lambda: agent.actor_loss(batch, anoise)[0], agrads, rng)

    def test_ppo_loss_matches_finite_differences(self):
        rng = np.random.default_rng(1002)
        for trial in range(self.INSTANCES // 2):
            obs_dim = int(rng.integers(2, 5))
            adim = int(rng.integers(1, 3))
            hid = int(rng.integers(3, 7))
            net_rng = np.random.default_rng(5000 + trial)
            actor = DenseNet([obs_dim, hid, 2 * adim], ["tanh", "identity"], net_rng)
            vnet = DenseNet([obs_dim, hid, 1], ["tanh", "identity"], net_rng)
            B = 4
            mb = {
                "obs": rng.standard_normal((B, obs_dim)),
                "pre_squash": rng.standard_normal((B, adim)) * 0.5,
                "log_probs": rng.standard_normal(B) * 0.1,
                "advantages": rng.standard_normal(B),
                "targets": rng.standard_normal(B),
            }
            lo, hi = -0.7 * np.ones(adim), 0.7 * np.ones(adim)
            _, agrads, vgrads = ppo_loss(actor, vnet, mb, lo, hi, 0.2)
            self._check_params(actor, lambda: ppo_loss(actor, vnet, mb, lo, hi, 0.2)[0], agrads, rng)
            self._check_params(vnet, lambda: ppo_loss(actor, vnet, mb, lo, hi, 0.2)[0], vgrads, rng)


# -- criterion 11: reward-formula fidelity (cheap, run early) ----------------


class TestCriterion11RewardFidelity:
    def test_arm_reward_matches_brute_force_on_1e4_instances(self):
        rng = np.random.default_rng(1111)
        weights = center_weight_matrix(8, 8)
        for _ in range(10_000):
            mask = rng.random((8, 8)) < rng.uniform(0.0, 0.6)
            omega = rng.uniform(-2 * np.pi, 2 * np.pi, size=5)
            acc = 0.0
            for i in range(8):
                for j in range(8):
                    if mask[i, j]:
                        acc += weights[i, j]
            expected = 800.0 * acc / 64.0 - 1.0 * (
                abs(np.pi - (omega[0] + omega[1] + omega[2])) + abs(omega[3] + omega[4])
            )
            got = arm_reward_from_mask(mask, omega, weights)
            assert abs(got - expected) <= 1e-12


# -- criterion 7: protocol robustness ----------------------------------------


class TestCriterion7ProtocolRobustness:
    def _random_message(self, rng, i):
        kind = rng.choice([HELLO, OBS, ACT, TRANSITIONS, POLICY, HEARTBEAT])
        seq = int(rng.integers(0, 2**32))
        sent_at = int(rng.integers(0, 2**50))
        if kind == HELLO:
            payload = {
                "task": "t" * int(rng.integers(1, 12)),
                "action_dim": int(rng.integers(1, 10)),
                "obs_dim": int(rng.integers(1, 1000)),
                "param_count": int(rng.integers(1, 10**6)),
            }
        elif kind == OBS:
            payload = {
                "episode_id": int(rng.integers(0, 10**6)),
                "step_index": int(rng.integers(0, 10**4)),
                "reward": float(np.float32(rng.standard_normal() * 100)),
                "done": bool(rng.random() < 0.5),
                "obs": rng.standard_normal(int(rng.integers(0, 20))).astype(np.float32),
                "applied_action": rng.standard_normal(int(rng.integers(1, 5))).astype(np.float32),
            }
        elif kind == ACT:
            payload = {"action": rng.standard_normal(int(rng.integers(1, 8))).astype(np.float32)}
        elif kind == TRANSITIONS:
            payload = {
                "transitions": [
                    {
                        "episode_id": int(rng.integers(0, 100)),
                        "step_index": int(rng.integers(0, 1000)),
                        "produced_at": int(rng.integers(0, 2**40)),
                        "reward": float(np.float32(rng.standard_normal())),
                        "done": bool(rng.random() < 0.2),
                        "log_prob": float(np.float32(rng.standard_normal())),
                        "obs": rng.standard_normal(3).astype(np.float32),
                        "action": rng.standard_normal(2).astype(np.float32),
                        "pre_squash": rng.standard_normal(2).astype(np.float32),
                        "next_obs": rng.standard_normal(3).astype(np.float32),
                    }
                    for _ in range(int(rng.integers(0, 3)))
                ]
            }
        elif kind == POLICY:
            payload = {
                "version": int(rng.integers(0, 10**6)),
                "checksum": int(rng.integers(0, 2**63)),
                "weights": rng.standard_normal(int(rng.integers(0, 30))).astype(np.float32),
            }
        else:
            payload = {}
        return Message(int(kind), seq, sent_at, payload)

    def test_1e5_roundtrips_byte_identical(self):
        rng = np.random.default_rng(777)
        for i in range(100_000):
            msg = self._random_message(rng, i)
            frame = encode(msg)
            assert encode(decode(frame)) == frame

    def test_1e3_policy_bit_flips_all_detected(self):
        rng = np.random.default_rng(778)
        w = rng.standard_normal(64).astype(np.float32)
        frame = encode(Message(POLICY, 12, 345678, {"version": 4, "checksum": 99, "weights": w}))
        nbits = len(frame) * 8
        for _ in range(1_000):
            bit = int(rng.integers(0, nbits))
            corrupted = bytearray(frame)
            corrupted[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises((IntegrityError, FramingError, ProtocolError)):
                decode(bytes(corrupted))


# -- criterion 8: queue no-loss ----------------------------------------------


class TestCriterion8QueueNoLoss:
    def test_stalled_receiver_loses_nothing_across_100_episodes(self):
        # Producer emits one transition per step for 100 episodes of 100
        # steps; the consumer normally pops one per step but stalls for one
        # entire episode. Capacity equals max_episode_steps, so the queue
        # absorbs the stalled episode, and blocked pushes afterwards retry
        # via the wait callback the moment a pop frees space.
        max_episode_steps = 100
        queue = BoundedQueue(max_episode_steps)
        received = []
        sent = 0
        stall_episode = 3
        for episode in range(100):
            for _ in range(max_episode_steps):
                item = sent
                queue.push_or_wait(item, lambda it=item: queue.try_push(it))
                sent += 1
                if episode != stall_episode and len(queue):
                    received.append(queue.pop())
            assert queue.max_occupancy <= max_episode_steps
        while len(queue):
            received.append(queue.pop())
        assert sent == 100 * max_episode_steps
        assert received == list(range(sent))
        assert queue.total_pushed == sent


# -- criterion 9: replay uniformity -------------------------------------------


class TestCriterion9ReplayUniformity:
    def test_chi_square_uniform_at_99_percent(self):
        rng = np.random.default_rng(999)
        buf = ReplayBuffer(100, obs_dim=1, action_dim=1)
        for i in range(100):
            buf.insert([float(i)], [0.0], float(i), [0.0], False)
        counts = np.zeros(100)
        draws = 0
        while draws < 100_000:
            batch = buf.sample(100, rng)
            for r in batch["rewards"]:
                counts[int(r)] += 1
            draws += 100
        expected = draws / 100.0
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        # 99th percentile of chi-square with 99 degrees of freedom.
        assert chi2 < 134.642


# -- criterion 6: latency-pathway isolation -----------------------------------


class TestCriterion6LatencyIsolation:
    def test_remote_local_missed_deadlines_invariant_to_link_delay(self):
        from relodkit.transport import LinkModel

        missed = {}
        for base_ms in (0, 50, 100, 200):
            eng = build_topology(
                "remote_local", "sac", local_compute="laptop",
                remote_compute="workstation",
                link=LinkModel(base_delay_ns=base_ms * 1_000_000),
                seed=0, sac_cfg=SacConfig(hidden=(8,), init_random_steps=10**6),
            )
            eng.run(300)
            missed[base_ms] = eng.meta["missed_deadlines"]
            assert not any(
                e[1] == "link" and e[2] == "inference_path" for e in eng.events
            ), f"inference crossed the link at base delay {base_ms}ms"
        assert len(set(missed.values())) == 1, missed

    def test_remote_only_full_miss_when_delay_exceeds_cycle(self):
        from relodkit.transport import LinkModel

        eng = build_topology(
            "remote_only", "sac", local_compute="laptop",
            remote_compute="workstation",
            link=LinkModel(base_delay_ns=40_000_000),  # base == cycle time
            seed=0, sac_cfg=SacConfig(hidden=(8,), init_random_steps=10**6),
        )
        eng.run(300)
        assert eng.meta["missed_deadlines"] == 300


# -- criterion 10: determinism --------------------------------------------------


class TestCriterion10Determinism:
    def test_scenario_runs_twice_byte_identical(self, tmp_path):
        from relodkit.cli import main

        cfg = tmp_path / "det.cfg"
        cfg.write_text(
            "seeds = 2\n"
            "total_steps = 400\n"
            "sac.hidden = 8\n"
            "sac.init_random_steps = 50\n"
            "sac.minibatch = 16\n"
            "arm = rl mode=remote_local algo=sac local=laptop remote=workstation link=wifi\n"
        )
        out1, out2 = str(tmp_path / "d1"), str(tmp_path / "d2")
        assert main(["run", "-c", str(cfg), "-o", out1]) == 0
        assert main(["run", "-c", str(cfg), "-o", out2]) == 0
        names = sorted(os.listdir(out1))
        assert names == sorted(os.listdir(out2))
        for name in names:
            a = open(os.path.join(out1, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, name
        # Summaries too.
        assert main(["compare", out1]) == 0
        assert main(["compare", out2]) == 0
        s1 = open(os.path.join(out1, "summary.csv")).read()
        s2 = open(os.path.join(out2, "summary.csv")).read()
        assert s1 == s2


# -- random-policy baseline (oracle for criteria 2-4) ---------------------------


def random_policy_baseline(episodes=200, seed=424242):
    """Brute-force random-action rollout oracle on PixelReacher."""
    rngs = RngStreams(seed)
    env = PixelReacher()
    returns = []
    for _ in range(episodes):
        env.reset(rngs.env)
        total = 0.0
        done = False
        while not done:
            a = rngs.action_noise.uniform(env.spec.action_lo, env.spec.action_hi)
            _, r, done = env.step(a)
            total += r
        returns.append(total)
    return float(np.mean(returns))


@pytest.fixture(scope="module")
def baseline_return():
    return random_policy_baseline()


def run_sac(mode, seed, total_steps, local="workstation", remote="workstation",
            link="none", throttle=None):
    from relodkit.orchestrator import compute_preset
    from relodkit.sac import UpdateThrottle

    local_model = compute_preset(local)
    remote_model = compute_preset(remote)
    if throttle is not None:
        model = local_model if mode == "local_only" else remote_model
        model.throttle = UpdateThrottle(*throttle)
    eng = build_topology(
        mode, "sac", task="pixel_reacher", local_compute=local_model,
        remote_compute=remote_model, link=link, seed=seed,
        sac_cfg=SacConfig(**BENCH_SAC),
    )
    records = eng.run(total_steps)
    return records, eng.meta


# -- criterion 2: learning works at all -----------------------------------------


class TestCriterion2LearningWorks:
    SEEDS = (1, 2, 3)
    TOTAL_STEPS = 4800

    def test_local_only_sac_beats_3x_random_baseline(self, baseline_return):
        finals = []
        for seed in self.SEEDS:
            records, _ = run_sac("local_only", seed, self.TOTAL_STEPS)
            finals.append(final_mean(records))
        mean_final = float(np.mean(finals))
        assert mean_final >= 3.0 * baseline_return, (
            f"mean final {mean_final:.1f} < 3 x baseline {baseline_return:.1f} "
            f"(finals per seed: {[round(f, 1) for f in finals]})"
        )


# -- criteria 3 and 4: mode ordering and throttle degradation -------------------


@pytest.fixture(scope="module")
def mode_runs():
    """Five seeds of the three SAC topologies plus a throttled local arm."""
    total_steps = 4800
    seeds = (1, 2, 3, 4, 5)
    out = {"remote_local": [], "remote_only": [], "local_jetson": [],
           "local_b2b": [], "local_throttled": []}
    for seed in seeds:
        rl, _ = run_sac("remote_local", seed, total_steps,
                        local="laptop", remote="workstation", link="wifi")
        out["remote_local"].append(final_mean(rl))
        ro, _ = run_sac("remote_only", seed, total_steps,
                        local="laptop", remote="workstation", link="wifi")
        out["remote_only"].append(final_mean(ro))
        lj, _ = run_sac("local_only", seed, total_steps, local="jetson_emulated")
        out["local_jetson"].append(final_mean(lj))
        b2b, _ = run_sac("local_only", seed, total_steps, local="workstation")
        out["local_b2b"].append(final_mean(b2b))
        thr, _ = run_sac("local_only", seed, total_steps, local="workstation",
                         throttle=("every_n_steps", 12))
        out["local_throttled"].append(final_mean(thr))
    return out


class TestCriterion3ModeOrdering:
    def test_remote_local_beats_remote_only_and_throttled_local(self, mode_runs):
        rl = mode_runs["remote_local"]
        ro = mode_runs["remote_only"]
        lj = mode_runs["local_jetson"]
        gap_ro = np.mean(rl) - np.mean(ro)
        gap_lj = np.mean(rl) - np.mean(lj)
        assert gap_ro > pooled_stderr(rl, ro), (
            f"remote_local {np.mean(rl):.1f} vs remote_only {np.mean(ro):.1f}, "
            f"gap {gap_ro:.1f} <= SE {pooled_stderr(rl, ro):.1f}"
        )
        assert gap_lj > pooled_stderr(rl, lj), (
            f"remote_local {np.mean(rl):.1f} vs local(jetson) {np.mean(lj):.1f}, "
            f"gap {gap_lj:.1f} <= SE {pooled_stderr(rl, lj):.1f}"
        )


class TestCriterion4ThrottleDegradation:
    def test_throttled_updates_strictly_below_back_to_back(self, mode_runs):
        b2b = mode_runs["local_b2b"]
        thr = mode_runs["local_throttled"]
        assert float(np.mean(thr)) < float(np.mean(b2b)), (
            f"throttled {np.mean(thr):.1f} !< back-to-back {np.mean(b2b):.1f}"
        )


# -- criterion 5: PPO mode-invariance --------------------------------------------


class TestCriterion5PpoModeInvariance:
    def test_ppo_final_returns_within_2_pooled_stderr_across_modes(self):
        total_steps = 4000
        seeds = (1, 2, 3, 4, 5)
        cfg = PpoConfig(horizon=1000, epochs=5, minibatch_size=64)
        finals = {}
        for mode in ("local_only", "remote_only", "remote_local"):
            finals[mode] = []
            for seed in seeds:
                eng = build_topology(
                    mode, "ppo", task="pixel_reacher", local_compute="laptop",
                    remote_compute="workstation", link="wifi", seed=seed,
                    ppo_cfg=cfg,
                )
                records = eng.run(total_steps)
                finals[mode].append(final_mean(records))
        modes = list(finals)
        for i in range(len(modes)):
            for j in range(i + 1, len(modes)):
                a, b = finals[modes[i]], finals[modes[j]]
                gap = abs(float(np.mean(a)) - float(np.mean(b)))
                limit = 2.0 * pooled_stderr(a, b)
                assert gap < limit, (
                    f"{modes[i]} {np.mean(a):.1f} vs {modes[j]} {np.mean(b):.1f}: "
                    f"gap {gap:.1f} >= 2 x pooled SE {limit:.1f}"
                )
