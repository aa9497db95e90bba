"""Two-host process topology and the deadline-driven main loop.

A run places the seven pipeline processes (agent interface, action
computation, local-send, local-receive, learner interface, replay buffer,
update) on two simulated hosts according to the selected distribution mode,
wires them with bounded queues and a latency-modeled link, and advances
everything on a single discrete-event virtual clock. The environment is
actuated on a fixed cycle no matter how long action computation takes; a
tick whose action has not arrived holds the previous command and counts a
missed deadline.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    NS_PER_MS,
    MetricRecord,
    PolicySnapshot,
    RngStreams,
    StructuralError,
    flatten_observation,
)
from .envs import ArenaRover, PixelReacher, TaskSpec, task_spec
from .nets import log_prob_of_pre_squash, pre_squash_of_action
from .ppo import PpoAgent, PpoConfig, RolloutBuffer
from .sac import ReplayBuffer, SacAgent, SacConfig, UpdateThrottle
from . import transport
from .transport import BoundedQueue, LinkModel, Message, link_preset

logger = logging.getLogger(__name__)

MODES = ("local_only", "remote_only", "remote_local")
ALGOS = ("sac", "ppo")

# Host assignment of every process in each mode. "aip" / "lip" mean the
# process is folded into the agent interface / learner interface rather than
# running as its own loop; None means the process does not exist in the mode.
PROCESS_TABLE = {
    "remote_local": {
        "agent_interface": "local",
        "action_computation": "aip",
        "local_send": "local",
        "local_receive": "local",
        "learner_interface": "remote",
        "replay_buffer": "remote",
        "update": "remote",
    },
    "remote_only": {
        "agent_interface": "local",
        "action_computation": "lip",
        "local_send": None,
        "local_receive": None,
        "learner_interface": "remote",
        "replay_buffer": "remote",
        "update": "remote",
    },
    "local_only": {
        "agent_interface": "local",
        "action_computation": "aip",
        "local_send": None,
        "local_receive": None,
        "learner_interface": "aip",
        "replay_buffer": "local",
        "update": "local",
    },
}


@dataclass
class ComputeModel:
    """Per-iteration virtual costs of a host, in milliseconds."""

    inference_ms: float = 2.0
    update_ms: float = 10.0
    relay_ms: float = 0.1
    throttle: UpdateThrottle = field(default_factory=UpdateThrottle)

    def __post_init__(self):
        if min(self.inference_ms, self.update_ms, self.relay_ms) < 0:
            raise StructuralError("compute costs must be >= 0")

    @property
    def inference_ns(self) -> int:
        return int(round(self.inference_ms * NS_PER_MS))

    @property
    def update_ns(self) -> int:
        return int(round(self.update_ms * NS_PER_MS))

    @property
    def relay_ns(self) -> int:
        return int(round(self.relay_ms * NS_PER_MS))


def compute_preset(name: str) -> ComputeModel:
    if name == "workstation":
        return ComputeModel(inference_ms=2.0, update_ms=10.0)
    if name == "laptop":
        return ComputeModel(inference_ms=8.0, update_ms=40.0)
    if name == "jetson_emulated":
        return ComputeModel(
            inference_ms=8.0,
            update_ms=500.0,
            throttle=UpdateThrottle("every_n_steps", 12),
        )
    raise StructuralError(f"unknown compute preset: {name}")


@dataclass
class ModeTopology:
    """Which process runs where, plus per-host compute costs."""

    mode: str
    placement: dict
    k: int  # policy-sync interval, in learner-interface iterations
    local: ComputeModel
    remote: ComputeModel

    @classmethod
    def build(cls, mode: str, k: int, local: ComputeModel, remote: ComputeModel) -> "ModeTopology":
        if mode not in MODES:
            raise StructuralError(f"unknown mode: {mode}")
        if k < 1:
            raise StructuralError("policy-sync interval k must be >= 1")
        return cls(mode=mode, placement=dict(PROCESS_TABLE[mode]), k=k, local=local, remote=remote)

    def validate(self) -> None:
        if self.placement != PROCESS_TABLE[self.mode]:
            raise StructuralError(f"process placement deviates from the {self.mode} column")

    @property
    def live_processes(self) -> tuple:
        return tuple(p for p, host in self.placement.items() if host is not None)


class EventScheduler:
    """Deterministic event heap keyed on (time, priority, insertion order).

    Ticks are scheduled at priority 1 so that an action arriving at exactly
    the deadline timestamp is applied (arrival events use priority 0).
    """

    def __init__(self):
        self._heap = []
        self._counter = itertools.count()

    def push(self, t_ns: int, fn, priority: int = 0) -> None:
        heapq.heappush(self._heap, (int(t_ns), priority, next(self._counter), fn))

    def pop(self):
        if not self._heap:
            return None
        t, _, _, fn = heapq.heappop(self._heap)
        return t, fn

    def __len__(self) -> int:
        return len(self._heap)


def hello_handshake(local_spec: TaskSpec, remote_spec: TaskSpec, param_count: int) -> None:
    """Exchange HELLO frames between the two hosts and verify that both
    sides agree on task shapes. Raises on mismatch."""
    msg = Message(
        kind=transport.HELLO,
        seq=0,
        sent_at=0,
        payload={
            "task": local_spec.name,
            "action_dim": local_spec.action_dim,
            "obs_dim": local_spec.obs_dim,
            "param_count": param_count,
        },
    )
    got = transport.decode(transport.encode(msg)).payload
    if (
        got["task"] != remote_spec.name
        or got["action_dim"] != remote_spec.action_dim
        or got["obs_dim"] != remote_spec.obs_dim
    ):
        raise StructuralError(
            "handshake shape mismatch: "
            f"local ({local_spec.name}, act {local_spec.action_dim}, obs {local_spec.obs_dim}) vs "
            f"remote ({remote_spec.name}, act {remote_spec.action_dim}, obs {remote_spec.obs_dim})"
        )
    reply = Message(kind=transport.HELLO, seq=1, sent_at=0, payload=got)
    transport.decode(transport.encode(reply))


def sync_policy(agent, snap: PolicySnapshot, events=None, t_ns: int = 0) -> bool:
    """Apply a policy snapshot to a live agent: checksum-verified, strictly
    newer versions only. Returns True when the weights were swapped."""
    if not snap.verify():
        logger.warning("snapshot v%d dropped: checksum mismatch", snap.version)
        if events is not None:
            events.append((t_ns, "local_receive", "snapshot_corrupt", snap.version, 0))
        return False
    if snap.version <= agent.version:
        if events is not None:
            events.append((t_ns, "local_receive", "snapshot_stale", snap.version, agent.version))
        return False
    agent.load_snapshot(snap)
    if events is not None:
        events.append((t_ns, "local_receive", "snapshot_applied", snap.version, 0))
    return True


class RunEngine:
    """A built topology plus all mutable run state; drives one experiment."""

    def __init__(
        self,
        topology: ModeTopology,
        algo: str,
        task: TaskSpec,
        link: LinkModel,
        seed: int,
        sac_cfg: SacConfig,
        ppo_cfg: PpoConfig,
        run_id: str | None = None,
        log_actions: bool = False,
    ):
        if algo not in ALGOS:
            raise StructuralError(f"unknown algorithm: {algo}")
        topology.validate()
        self.topology = topology
        self.mode = topology.mode
        self.algo = algo
        self.task = task
        self.link = link
        self.seed = seed
        self.sac_cfg = sac_cfg
        self.ppo_cfg = ppo_cfg
        self.run_id = run_id or f"{self.mode}_{algo}_{seed}"
        self.log_actions = log_actions

        self.rngs = RngStreams(seed)
        self.env = PixelReacher(task) if task.name == "pixel_reacher" else ArenaRover(task)
        self.cycle_ns = task.cycle_time_ns
        self.lo = task.action_lo
        self.hi = task.action_hi
        self.adim = task.action_dim

        # Hosts running each pipeline stage in this mode.
        self.update_compute = topology.local if self.mode == "local_only" else topology.remote
        self.infer_compute = topology.remote if self.mode == "remote_only" else topology.local

        # Learner (and, in remote_local, a separate acting copy).
        if algo == "sac":
            self.learner = SacAgent(task.obs_dim, self.lo, self.hi, sac_cfg, self.rngs.policy_init)
            self.replay = ReplayBuffer(sac_cfg.buffer_capacity, task.obs_dim, self.adim)
        else:
            self.learner = PpoAgent(task.obs_dim, self.lo, self.hi, ppo_cfg, self.rngs.policy_init)
            self.rollout = RolloutBuffer(ppo_cfg.horizon)
            self._ppo_overflow = []
        if self.mode == "remote_local":
            # The local actor starts from the learner's exact initial weights;
            # later divergence only happens through wire-quantized snapshots.
            if algo == "sac":
                self.actor_side = SacAgent(task.obs_dim, self.lo, self.hi, sac_cfg, np.random.default_rng(0))
            else:
                self.actor_side = PpoAgent(task.obs_dim, self.lo, self.hi, ppo_cfg, np.random.default_rng(0))
            self.actor_side.actor.unpack(self.learner.actor.pack())
            self.actor_side.version = self.learner.version
        else:
            self.actor_side = self.learner

        hello_handshake(task, task, self.learner.actor.pack().size)

        self.sched = EventScheduler()
        self.send_queue = BoundedQueue(task.max_episode_steps)
        self.events: list[tuple] = []
        self.records: list[MetricRecord] = []

        # Per-run counters.
        self.global_step = 0
        self.total_steps = 0
        self.episode_id = 0
        self.ep_steps = 0
        self.ep_return = 0.0
        self.ep_missed = 0
        self.ep_start_version = 0
        self.exp_time_ns = 0
        self.missed_total = 0
        self.staleness_sum = 0
        self.late_acts = 0
        self.lost_transitions = 0
        self.updates_started = 0
        self.update_busy = False
        self.lip_iterations = 0
        self.ingested = 0
        self.obs_seq = 0
        self.msg_seq = 0
        self.pending = None  # (action, log_prob, pre_squash, version)
        self.held_action = np.zeros(self.adim)
        self.cur_obs_vec = None
        self.deadline = 0
        self.staged_snapshot = None  # PPO snapshots wait for an episode edge
        # Learner-side pairing state for transition assembly over OBS frames.
        self._lip_prev = None  # (episode_id, step_index, obs_vec)
        self._finished = False

    # -- helpers -----------------------------------------------------------

    def _log(self, t, process, kind, a=0, b=0):
        self.events.append((t, process, kind, a, b))

    def _next_seq(self) -> int:
        self.msg_seq += 1
        return self.msg_seq

    def _wire(self, msg: Message) -> Message:
        """Round-trip a message through the byte codec (what the socket path
        does), so in-process runs see identical f32 quantization."""
        return transport.decode(transport.encode(msg))

    def _acting_version(self) -> int:
        return self.actor_side.version if self.mode != "remote_only" else self.learner.version

    def _policy_action(self, agent, obs_vec):
        if self.algo == "sac" and self.global_step < self.sac_cfg.init_random_steps:
            action = self.rngs.action_noise.uniform(self.lo, self.hi)
            u = pre_squash_of_action(action, self.lo, self.hi)
            return action, 0.0, u
        noise = self.rngs.action_noise.standard_normal(self.adim)
        return agent.act(obs_vec, noise)

    def _held_log_prob(self, actor_net, obs_vec, applied):
        u = pre_squash_of_action(applied, self.lo, self.hi)
        lp = log_prob_of_pre_squash(actor_net, obs_vec, u, self.lo, self.hi)
        return float(np.asarray(lp).reshape(-1)[0]), u

    # -- episode lifecycle --------------------------------------------------

    def _begin_episode(self, t: int) -> None:
        obs = self.env.reset(self.rngs.env)
        self.cur_obs_vec = flatten_observation(obs)
        self.ep_steps = 0
        self.ep_return = 0.0
        self.ep_missed = 0
        self.ep_start_version = self._acting_version()
        self.pending = None
        self.held_action = np.zeros(self.adim)
        self.deadline = t + self.cycle_ns
        self._dispatch_obs(t, reward=0.0, done=False, applied=np.zeros(self.adim))
        self.sched.push(t + self.cycle_ns, self._tick, priority=1)

    def _emit_record(self) -> None:
        self.records.append(
            MetricRecord(
                run_id=self.run_id,
                seed=self.seed,
                mode=self.mode,
                algorithm=self.algo,
                episode_index=self.episode_id,
                episodic_return=self.ep_return,
                episode_length_steps=self.ep_steps,
                real_experience_time_s=self.exp_time_ns / 1e9,
                missed_deadlines=self.ep_missed,
                policy_version_at_episode_start=self.ep_start_version,
            )
        )

    # -- the action cycle ---------------------------------------------------

    def _tick(self, t: int) -> None:
        if self._finished:
            return
        step_in_ep = self.ep_steps
        obs_vec_before = self.cur_obs_vec
        if self.pending is not None:
            action, log_prob, pre_squash, used_version = self.pending
            self.pending = None
            env_action = action
        else:
            env_action = None  # hold previous command
            action = self.held_action.copy()
            used_version = self._acting_version()
            log_prob, pre_squash = None, None

        obs, reward, done = self.env.step(env_action)
        next_obs_vec = flatten_observation(obs)
        applied = self.env.prev_action.copy()
        if env_action is None:
            self.ep_missed += 1
            self.missed_total += 1
            self._log(t, "agent_interface", "deadline_missed", self.global_step, 0)
            if self.algo == "ppo" and self.mode != "remote_only":
                log_prob, pre_squash = self._held_log_prob(
                    self.actor_side.actor, obs_vec_before, applied
                )
        if log_prob is None:
            log_prob = 0.0
            pre_squash = pre_squash_of_action(applied, self.lo, self.hi)
        self.held_action = applied
        self.staleness_sum += self.learner.version - used_version
        self._log(t, "agent_interface", "action_applied", self.global_step, used_version)
        if self.log_actions:
            self._log(t, "agent_interface", "action_value", self.global_step, tuple(applied))

        self.global_step += 1
        self.ep_steps += 1
        self.ep_return += float(reward)
        self.exp_time_ns += self.cycle_ns

        record = {
            "episode_id": self.episode_id,
            "step_index": step_in_ep,
            "produced_at": t,
            "obs": obs_vec_before,
            "action": applied,
            "pre_squash": np.asarray(pre_squash, dtype=np.float64).reshape(-1),
            "log_prob": float(log_prob),
            "reward": float(reward),
            "next_obs": next_obs_vec,
            "done": bool(done),
        }
        self.cur_obs_vec = next_obs_vec
        self._route_transition(t, record)

        if self.global_step >= self.total_steps:
            self._emit_record()
            self._finished = True
            return
        if done:
            # Terminal observations still travel to the learner host so the
            # final transition of the episode can be assembled there.
            self._dispatch_obs(t, reward=float(reward), done=True, applied=applied)
            self._emit_record()
            self.episode_id += 1
            if self.algo == "ppo" and self.staged_snapshot is not None:
                sync_policy(self.actor_side, self.staged_snapshot, self.events, t)
                self.staged_snapshot = None
            self._begin_episode(t)
            return
        self.deadline = t + self.cycle_ns
        self._dispatch_obs(t, reward=float(reward), done=done, applied=applied)
        self.sched.push(t + self.cycle_ns, self._tick, priority=1)

    def _dispatch_obs(self, t: int, reward: float, done: bool, applied) -> None:
        """Start the action-computation path for the freshest observation,
        and (in remote_only) ship the observation to the learner host."""
        if self.mode == "remote_only":
            self.obs_seq += 1
            seq = self.obs_seq
            msg = self._wire(
                Message(
                    kind=transport.OBS,
                    seq=seq,
                    sent_at=t,
                    payload={
                        "episode_id": self.episode_id,
                        "step_index": self.ep_steps,
                        "reward": reward,
                        "done": done,
                        "obs": self.cur_obs_vec,
                        "applied_action": applied,
                    },
                )
            )
            arrive = self.link.delivery_time(t, self.rngs.link, "fwd")
            if arrive is None:
                self._log(t, "link", "obs_dropped", seq, 0)
                return
            self._log(t, "link", "inference_path", transport.OBS, arrive - t)
            self.sched.push(arrive, lambda tt, m=msg: self._lip_obs(tt, m))
            return
        if done:
            return
        # Local action computation (agent interface process).
        ready = t + self.infer_compute.inference_ns
        deadline = self.deadline
        obs_vec = self.cur_obs_vec
        step_tag = self.global_step

        def compute(tt):
            action, log_prob, u = self._policy_action(self.actor_side, obs_vec)
            if tt <= deadline and step_tag == self.global_step:
                self.pending = (action, log_prob, u, self._acting_version())
            else:
                self._log(tt, "agent_interface", "inference_late", step_tag, 0)

        self.sched.push(ready, compute)

    # -- remote_only learner side ------------------------------------------

    def _lip_obs(self, t: int, msg: Message) -> None:
        p = msg.payload
        obs_vec = np.asarray(p["obs"], dtype=np.float64)
        applied = np.asarray(p["applied_action"], dtype=np.float64)
        if p["step_index"] > 0:
            prev = self._lip_prev
            if prev is not None and prev[0] == p["episode_id"] and prev[1] == p["step_index"] - 1:
                lp, u = 0.0, pre_squash_of_action(applied, self.lo, self.hi)
                if self.algo == "ppo":
                    lp, u = self._held_log_prob(self.learner.actor, prev[2], applied)
                self._ingest(
                    t,
                    {
                        "episode_id": p["episode_id"],
                        "step_index": p["step_index"] - 1,
                        "produced_at": msg.sent_at,
                        "obs": prev[2],
                        "action": applied,
                        "pre_squash": np.asarray(u, dtype=np.float64).reshape(-1),
                        "log_prob": lp,
                        "reward": p["reward"],
                        "next_obs": obs_vec,
                        "done": p["done"],
                    },
                )
            else:
                self.lost_transitions += 1
        self._lip_prev = None if p["done"] else (p["episode_id"], p["step_index"], obs_vec)
        if p["done"]:
            return
        ready = t + self.infer_compute.inference_ns
        obs_msg_seq = msg.seq

        def compute(tt):
            action, log_prob, u = self._policy_action(self.learner, obs_vec)
            act_msg = self._wire(
                Message(
                    kind=transport.ACT,
                    seq=obs_msg_seq,
                    sent_at=tt,
                    payload={"action": action},
                )
            )
            arrive = self.link.delivery_time(tt, self.rngs.link, "rev")
            if arrive is None:
                self._log(tt, "link", "act_dropped", obs_msg_seq, 0)
                return
            self._log(tt, "link", "inference_path", transport.ACT, arrive - tt)
            self.sched.push(
                arrive,
                lambda ta, m=act_msg, lp=log_prob, uu=u: self._aip_act(ta, m, lp, uu),
            )

        self.sched.push(ready, compute)

    def _aip_act(self, t: int, msg: Message, log_prob: float, u) -> None:
        if msg.seq != self.obs_seq or t > self.deadline or self._finished:
            self.late_acts += 1
            self._log(t, "agent_interface", "late_act_discarded", msg.seq, 0)
            return
        action = np.asarray(msg.payload["action"], dtype=np.float64)
        self.pending = (action, log_prob, np.asarray(u), self.learner.version)

    # -- transition routing --------------------------------------------------

    def _route_transition(self, t: int, record: dict) -> None:
        if self.mode == "local_only":
            self._ingest(t, record)
            return
        if self.mode == "remote_only":
            return  # the learner assembles transitions from OBS frames
        if not self.send_queue.try_push(record):
            # Capacity equals the episode length, and the queue is drained
            # every cycle, so this only fires if the consumer stalls.
            self.send_queue.push_or_wait(record, lambda: None)
        self._flush_send_queue(t)

    def _flush_send_queue(self, t: int) -> None:
        recs = []
        while len(self.send_queue):
            recs.append(self.send_queue.pop())
        if not recs:
            return
        msg = self._wire(
            Message(
                kind=transport.TRANSITIONS,
                seq=self._next_seq(),
                sent_at=t + self.topology.local.relay_ns,
                payload={"transitions": recs},
            )
        )
        arrive = self.link.delivery_time(t + self.topology.local.relay_ns, self.rngs.link, "fwd")
        if arrive is None:
            self.lost_transitions += len(recs)
            self._log(t, "link", "transitions_dropped", len(recs), 0)
            return
        self._log(t, "link", "learning_path", transport.TRANSITIONS, arrive - t)
        self.sched.push(arrive, lambda tt, m=msg: self._lip_ingest_msg(tt, m))

    def _lip_ingest_msg(self, t: int, msg: Message) -> None:
        for rec in msg.payload["transitions"]:
            self._ingest(
                t,
                {
                    "episode_id": rec["episode_id"],
                    "step_index": rec["step_index"],
                    "produced_at": rec["produced_at"],
                    "obs": np.asarray(rec["obs"], dtype=np.float64),
                    "action": np.asarray(rec["action"], dtype=np.float64),
                    "pre_squash": np.asarray(rec["pre_squash"], dtype=np.float64),
                    "log_prob": float(rec["log_prob"]),
                    "reward": float(rec["reward"]),
                    "next_obs": np.asarray(rec["next_obs"], dtype=np.float64),
                    "done": bool(rec["done"]),
                },
            )
        self.lip_iterations += 1
        if self.mode == "remote_local" and self.algo == "sac" and self.lip_iterations % self.topology.k == 0:
            self._send_policy(t)

    def _ingest(self, t: int, rec: dict) -> None:
        self.ingested += 1
        if self.algo == "sac":
            self.replay.insert(
                rec["obs"], rec["action"], rec["reward"], rec["next_obs"], rec["done"],
                episode_id=rec["episode_id"], step_index=rec["step_index"],
            )
        else:
            if self.update_busy or self.rollout.full:
                self._ppo_overflow.append(rec)
            else:
                self.rollout.add(
                    rec["obs"], rec["action"], rec["pre_squash"], rec["log_prob"],
                    rec["reward"], rec["done"], rec["next_obs"],
                )
        self._maybe_start_update(t)

    # -- learning -------------------------------------------------------------

    def _maybe_start_update(self, t: int) -> None:
        if self.update_busy or self._finished:
            return
        if self.algo == "sac":
            cfg = self.sac_cfg
            if self.ingested < cfg.init_random_steps:
                return
            throttle = self.update_compute.throttle
            if not throttle.permits(self.ingested, self.learner.updates_done):
                return
            if not self.replay.ready(cfg.minibatch_size):
                return
            self.update_busy = True
            self.updates_started += 1
            self.sched.push(t + self.update_compute.update_ns, self._sac_update_done)
        else:
            if not self.rollout.full:
                return
            self.update_busy = True
            self.updates_started += 1
            minibatches = math.ceil(self.ppo_cfg.horizon / self.ppo_cfg.minibatch_size)
            duration = self.update_compute.update_ns * self.ppo_cfg.epochs * minibatches
            self.sched.push(t + duration, self._ppo_update_done)

    def _sac_update_done(self, t: int) -> None:
        self.update_busy = False
        if self._finished:
            return
        throttle = self.update_compute.throttle
        snap = self.learner.update_cycle(self.replay, throttle, self.ingested, self.rngs.sampler)
        if snap is not None:
            self._log(t, "update", "update_done", self.learner.version, 0)
        self._maybe_start_update(t)

    def _ppo_update_done(self, t: int) -> None:
        self.update_busy = False
        if self._finished:
            return
        snap = self.learner.update(self.rollout, self.rngs.sampler)
        self._log(t, "update", "update_done", self.learner.version, 0)
        overflow, self._ppo_overflow = self._ppo_overflow, []
        for rec in overflow:
            self._ingest(t, rec)
        if self.mode == "remote_local":
            self._send_policy(t)
        self._maybe_start_update(t)

    def _send_policy(self, t: int) -> None:
        snap = self.learner.make_snapshot(wire=True)
        msg = self._wire(
            Message(
                kind=transport.POLICY,
                seq=self._next_seq(),
                sent_at=t,
                payload={"version": snap.version, "checksum": snap.checksum, "weights": snap.weights},
            )
        )
        arrive = self.link.delivery_time(t, self.rngs.link, "rev")
        if arrive is None:
            self._log(t, "link", "policy_dropped", snap.version, 0)
            return
        self._log(t, "link", "learning_path", transport.POLICY, arrive - t)
        self.sched.push(arrive, lambda tt, m=msg: self._local_receive(tt, m))

    def _local_receive(self, t: int, msg: Message) -> None:
        p = msg.payload
        snap = PolicySnapshot(version=p["version"], weights=np.asarray(p["weights"], dtype=np.float32), checksum=p["checksum"])
        if self.algo == "sac":
            sync_policy(self.actor_side, snap, self.events, t)
        else:
            if self.staged_snapshot is None or snap.version > self.staged_snapshot.version:
                self.staged_snapshot = snap  # applied at the episode boundary

    # -- top-level ------------------------------------------------------------

    def run(self, total_steps: int, clock_mode: str = "virtual") -> list[MetricRecord]:
        if total_steps < 1:
            raise StructuralError("total_steps must be >= 1")
        if clock_mode not in ("virtual", "wall"):
            raise StructuralError(f"unknown clock mode: {clock_mode}")
        self.total_steps = total_steps
        self._begin_episode(0)
        wall_start = time.monotonic() if clock_mode == "wall" else None
        try:
            while not self._finished:
                item = self.sched.pop()
                if item is None:
                    break
                t, fn = item
                if wall_start is not None:
                    lag = t / 1e9 - (time.monotonic() - wall_start)
                    if lag > 0:
                        time.sleep(lag)
                fn(t)
        except Exception:
            if self.ep_steps > 0:  # flush partial metrics before aborting
                self._emit_record()
            raise
        return self.records

    @property
    def meta(self) -> dict:
        applied = max(1, self.global_step)
        return {
            "run_id": self.run_id,
            "mode": self.mode,
            "algo": self.algo,
            "seed": self.seed,
            "steps": self.global_step,
            "episodes": len(self.records),
            "missed_deadlines": self.missed_total,
            "late_acts_discarded": self.late_acts,
            "lost_transitions": self.lost_transitions,
            "link_dropped": self.link.dropped,
            "updates": getattr(self.learner, "updates_done", self.learner.version),
            "learner_version": self.learner.version,
            "mean_staleness": self.staleness_sum / applied,
            "queue_max_occupancy": self.send_queue.max_occupancy,
            "experience_time_s": self.exp_time_ns / 1e9,
        }


def build_topology(
    mode: str,
    algo: str,
    task: str | TaskSpec = "pixel_reacher",
    local_compute: str | ComputeModel = "laptop",
    remote_compute: str | ComputeModel = "workstation",
    link: str | LinkModel | None = None,
    seed: int = 0,
    k: int | None = None,
    sac_cfg: SacConfig | None = None,
    ppo_cfg: PpoConfig | None = None,
    run_id: str | None = None,
    log_actions: bool = False,
) -> RunEngine:
    """Instantiate every process of the chosen mode on its host, size the
    queues, and complete the startup handshake. Returns a ready engine."""
    if mode not in MODES:
        raise StructuralError(f"unknown mode: {mode}")
    if algo not in ALGOS:
        raise StructuralError(f"unknown algorithm: {algo}")
    spec = task_spec(task) if isinstance(task, str) else task
    local = compute_preset(local_compute) if isinstance(local_compute, str) else local_compute
    remote = compute_preset(remote_compute) if isinstance(remote_compute, str) else remote_compute
    if link is None:
        link = link_preset("none")
    elif isinstance(link, str):
        link = link_preset(link)
    topo = ModeTopology.build(mode, k if k is not None else spec.max_episode_steps, local, remote)
    return RunEngine(
        topology=topo,
        algo=algo,
        task=spec,
        link=link,
        seed=seed,
        sac_cfg=sac_cfg or SacConfig(),
        ppo_cfg=ppo_cfg or PpoConfig(),
        run_id=run_id,
        log_actions=log_actions,
    )


def run(handle: RunEngine, total_steps: int, clock_mode: str = "virtual") -> list[MetricRecord]:
    return handle.run(total_steps, clock_mode)
