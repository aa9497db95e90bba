"""Shared domain types: observations, transitions, snapshots, clocks, metrics.

All timestamps are integer nanoseconds so long virtual runs never accumulate
float drift.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

FRAME_STACK = 3

# Fixed fan-out order for per-component RNG streams.  Mode comparisons must
# differ only in topology, so every run draws the same streams in the same
# order from the master seed.
RNG_STREAM_NAMES = ("env", "policy_init", "sampler", "link", "action_noise")


class StructuralError(ValueError):
    """A value violates a structural contract (shape/bounds mismatch)."""


@dataclass(frozen=True)
class Observation:
    """Stacked frames + proprioception + previous action.

    frames: (3, h, w, 3) float array, oldest to newest, values in [0, 1].
    """

    frames: np.ndarray
    proprio: np.ndarray
    prev_action: np.ndarray

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[0] != FRAME_STACK:
            raise StructuralError(f"expected {FRAME_STACK} stacked frames, got shape {self.frames.shape}")
        if self.frames.shape[3] != 3:
            raise StructuralError("frames must be channel-last RGB")
        if np.min(self.frames) < 0.0 or np.max(self.frames) > 1.0:
            raise StructuralError("pixel values out of [0, 1]")
        if self.proprio.ndim != 1 or self.prev_action.ndim != 1:
            raise StructuralError("proprio/prev_action must be 1-D vectors")

    @property
    def flat_dim(self) -> int:
        return self.frames.size + self.proprio.size + self.prev_action.size


def flatten_observation(obs: Observation) -> np.ndarray:
    """Flatten in fixed order: frames oldest-to-newest (row-major,
    channel-last), then proprio, then prev_action."""
    obs.validate()
    return np.concatenate(
        [obs.frames.ravel(order="C"), np.asarray(obs.proprio, dtype=np.float64), np.asarray(obs.prev_action, dtype=np.float64)]
    ).astype(np.float64)


def observation_dim(h: int, w: int, proprio_dim: int, action_dim: int) -> int:
    return FRAME_STACK * h * w * 3 + proprio_dim + action_dim


@dataclass(frozen=True)
class Action:
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def validate(self) -> None:
        if self.values.shape != self.lo.shape or self.values.shape != self.hi.shape:
            raise StructuralError("action/bounds shape mismatch")
        if np.any(self.values < self.lo) or np.any(self.values > self.hi):
            raise StructuralError("action component out of bounds")


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: np.ndarray
    reward: float
    next_obs: Observation
    done: bool
    episode_id: int
    step_index: int
    produced_at: int  # virtual ns
    # Recorded at action time by the acting policy; carried for on-policy
    # learners, ignored by off-policy ones.
    log_prob: float = 0.0
    pre_squash: np.ndarray | None = None


def weights_checksum(weights: np.ndarray) -> int:
    """64-bit digest of the float32 byte representation of a weight vector."""
    raw = np.asarray(weights, dtype="<f4").tobytes()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "big")


@dataclass(frozen=True)
class PolicySnapshot:
    version: int
    weights: np.ndarray  # flat float32 vector
    checksum: int

    @classmethod
    def create(cls, version: int, weights: np.ndarray) -> "PolicySnapshot":
        w32 = np.asarray(weights, dtype=np.float32)
        return cls(version=version, weights=w32, checksum=weights_checksum(w32))

    def verify(self) -> bool:
        return weights_checksum(self.weights) == self.checksum


class VirtualClock:
    """Deterministic time base owned by the scheduler."""

    mode = "virtual"

    def __init__(self, start_ns: int = 0):
        self.now_ns = int(start_ns)

    def advance(self, dt_ns: int) -> int:
        if dt_ns < 0:
            raise ValueError("dt must be non-negative")
        self.now_ns += int(dt_ns)
        return self.now_ns


class WallClock:
    """Real-time clock; advance sleeps until the target instant."""

    mode = "wall"

    def __init__(self):
        self._origin = time.monotonic_ns()

    @property
    def now_ns(self) -> int:
        return time.monotonic_ns() - self._origin

    def advance(self, dt_ns: int) -> int:
        if dt_ns < 0:
            raise ValueError("dt must be non-negative")
        target = self.now_ns + dt_ns
        while True:
            remaining = target - self.now_ns
            if remaining <= 0:
                return self.now_ns
            time.sleep(remaining / NS_PER_S)


def make_clock(mode: str):
    if mode == "virtual":
        return VirtualClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"unknown clock mode: {mode}")


class RngStreams:
    """Fan one master 64-bit seed out into named per-component streams."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        root = np.random.SeedSequence(self.master_seed)
        children = root.spawn(len(RNG_STREAM_NAMES))
        self._streams = {name: np.random.default_rng(seq) for name, seq in zip(RNG_STREAM_NAMES, children)}

    def __getattr__(self, name: str) -> np.random.Generator:
        try:
            return self._streams[name]
        except KeyError:
            raise AttributeError(name) from None


METRIC_CSV_HEADER = "run_id,seed,mode,algo,episode,return,steps,exp_time_s,missed_deadlines,policy_version"


@dataclass
class MetricRecord:
    run_id: str
    seed: int
    mode: str
    algorithm: str
    episode_index: int
    episodic_return: float
    episode_length_steps: int
    real_experience_time_s: float
    missed_deadlines: int
    policy_version_at_episode_start: int

    def csv_row(self) -> str:
        return ",".join(
            [
                self.run_id,
                str(self.seed),
                self.mode,
                self.algorithm,
                str(self.episode_index),
                repr(float(self.episodic_return)),
                str(self.episode_length_steps),
                repr(float(self.real_experience_time_s)),
                str(self.missed_deadlines),
                str(self.policy_version_at_episode_start),
            ]
        )


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        f.write(METRIC_CSV_HEADER + "\n")
        for rec in records:
            f.write(rec.csv_row() + "\n")


def read_metrics_csv(path) -> list[MetricRecord]:
    with open(path, "r") as f:
        header = f.readline().rstrip("\n")
        if header != METRIC_CSV_HEADER:
            raise ValueError(f"unknown metrics schema in {path}: {header!r}")
        out = []
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            out.append(
                MetricRecord(
                    run_id=parts[0],
                    seed=int(parts[1]),
                    mode=parts[2],
                    algorithm=parts[3],
                    episode_index=int(parts[4]),
                    episodic_return=float(parts[5]),
                    episode_length_steps=int(parts[6]),
                    real_experience_time_s=float(parts[7]),
                    missed_deadlines=int(parts[8]),
                    policy_version_at_episode_start=int(parts[9]),
                )
            )
        return out
