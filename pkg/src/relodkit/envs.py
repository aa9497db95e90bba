"""Simulated real-time analogues of the two vision tasks.

PixelReacher: a planar 5-joint velocity-controlled arm chasing a red target
disk rendered from a fingertip-mounted camera. ArenaRover: a differential
drive rover in a walled arena seeking a green wall patch.

Both advance strictly by fixed cycle ticks driven from outside; a missing
action means the previous command is held (the world does not pause).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FRAME_STACK, NS_PER_MS, Observation, StructuralError

ARM_ALPHA = 800.0
ARM_BETA = 1.0
ROVER_DONE_FRACTION = 0.12


@dataclass(frozen=True)
class TaskSpec:
    name: str
    action_dim: int
    action_lo: np.ndarray
    action_hi: np.ndarray
    cycle_time_ns: int
    max_episode_steps: int
    frame_h: int
    frame_w: int
    proprio_dim: int

    @property
    def obs_dim(self) -> int:
        return FRAME_STACK * self.frame_h * self.frame_w * 3 + self.proprio_dim + self.action_dim

    @property
    def cycle_time_s(self) -> float:
        return self.cycle_time_ns / 1e9


def arm_task_spec(frame_h: int = 8, frame_w: int = 8) -> TaskSpec:
    return TaskSpec(
        name="pixel_reacher",
        action_dim=5,
        action_lo=np.full(5, -0.7),
        action_hi=np.full(5, 0.7),
        cycle_time_ns=40 * NS_PER_MS,
        max_episode_steps=100,
        frame_h=frame_h,
        frame_w=frame_w,
        proprio_dim=10,
    )


def rover_task_spec(frame_h: int = 8, frame_w: int = 8) -> TaskSpec:
    return TaskSpec(
        name="arena_rover",
        action_dim=2,
        action_lo=np.full(2, -150.0),
        action_hi=np.full(2, 150.0),
        cycle_time_ns=45 * NS_PER_MS,
        max_episode_steps=666,
        frame_h=frame_h,
        frame_w=frame_w,
        proprio_dim=6,
    )


def task_spec(name: str, paper_scale: bool = False) -> TaskSpec:
    if name in ("pixel_reacher", "arm"):
        return arm_task_spec(90, 160) if paper_scale else arm_task_spec()
    if name in ("arena_rover", "rover"):
        return rover_task_spec(120, 160) if paper_scale else rover_task_spec()
    raise ValueError(f"unknown task: {name}")


def center_weight_matrix(h: int, w: int) -> np.ndarray:
    """Separable triangular ramp peaked at the image center, entries in [0,1]."""
    rows = 1.0 - np.abs(2.0 * np.arange(h) / (h - 1) - 1.0)
    cols = 1.0 - np.abs(2.0 * np.arange(w) / (w - 1) - 1.0)
    return np.outer(rows, cols)


def detect_red_mask(frame: np.ndarray) -> np.ndarray:
    r, g, b = frame[..., 0], frame[..., 1], frame[..., 2]
    return (r > 0.5) & (r > g) & (r > b)


def detect_green_mask(frame: np.ndarray) -> np.ndarray:
    r, g, b = frame[..., 0], frame[..., 1], frame[..., 2]
    return (g > 0.5) & (g > r) & (g > b)


def arm_reward_from_mask(mask: np.ndarray, omega: np.ndarray, weights: np.ndarray) -> float:
    h, w = mask.shape
    vision = ARM_ALPHA * float(np.sum(mask * weights)) / (h * w)
    posture = ARM_BETA * (abs(np.pi - float(np.sum(omega[:3]))) + abs(float(np.sum(omega[3:5]))))
    return vision - posture


def arm_reward(frame: np.ndarray, omega: np.ndarray, weights: np.ndarray) -> float:
    return arm_reward_from_mask(detect_red_mask(frame), omega, weights)


_BACKGROUND = np.array([0.10, 0.10, 0.10])
_RED = np.array([1.0, 0.15, 0.15])
_GREEN = np.array([0.15, 1.0, 0.15])


class PixelReacher:
    """Planar arm, fingertip camera, red target disk on a virtual monitor.

    Joints 1-3 form a cumulative-angle linkage that places the fingertip in
    the monitor plane; joints 4-5 are wrist joints that only enter the
    posture term of the reward.
    """

    LINKS = (0.5, 0.3, 0.2)
    HOME = np.array([np.pi, 0.0, 0.0, 0.0, 0.0])
    BOX_LO = np.array([-0.95, -0.5])  # fingertip bounding box
    BOX_HI = np.array([0.95, 1.0])
    TARGET_X = (-0.6, 0.6)
    TARGET_Y = (-0.2, 0.7)
    VIS_RANGE = 0.9  # misalignment at which the disk radius hits zero
    DISK_R0 = 2.0  # px at perfect alignment (8x8 scale; scales with frame)

    def __init__(self, spec: TaskSpec | None = None):
        self.spec = spec or arm_task_spec()
        self.weights = center_weight_matrix(self.spec.frame_h, self.spec.frame_w)
        self.omega = self.HOME.copy()
        self.velocity = np.zeros(5)
        self.target = np.zeros(2)
        self.prev_action = np.zeros(5)
        self.step_index = 0
        self.missed_deadlines = 0
        self.frames = None

    def fingertip(self, omega=None) -> np.ndarray:
        om = self.omega if omega is None else omega
        theta = np.cumsum(om[:3])
        x = float(np.sum(np.array(self.LINKS) * np.sin(theta)))
        y = float(-np.sum(np.array(self.LINKS) * np.cos(theta)))
        return np.array([x, y])

    def render_frame(self) -> np.ndarray:
        h, w = self.spec.frame_h, self.spec.frame_w
        frame = np.tile(_BACKGROUND, (h, w, 1))
        offset = self.target - self.fingertip()
        dist = float(np.hypot(*offset))
        scale = w / 2.0 / 1.0  # one unit of offset spans half the image
        radius = self.DISK_R0 * (w / 8.0) * max(0.0, 1.0 - dist / self.VIS_RANGE)
        if radius > 0.0:
            cc = (w - 1) / 2.0 + offset[0] * scale
            cr = (h - 1) / 2.0 - offset[1] * scale
            rr, ccgrid = np.mgrid[0:h, 0:w]
            disk = (rr - cr) ** 2 + (ccgrid - cc) ** 2 <= radius**2
            frame[disk] = _RED
        return frame

    def _push_frame(self, frame: np.ndarray) -> None:
        self.frames = np.concatenate([self.frames[1:], frame[None]], axis=0)

    def _observation(self) -> Observation:
        proprio = np.concatenate([self.omega, self.velocity])
        return Observation(frames=self.frames.copy(), proprio=proprio, prev_action=self.prev_action.copy())

    def reset(self, rng: np.random.Generator) -> Observation:
        self.omega = self.HOME.copy()
        self.velocity = np.zeros(5)
        self.prev_action = np.zeros(5)
        self.target = np.array(
            [rng.uniform(*self.TARGET_X), rng.uniform(*self.TARGET_Y)]
        )
        self.step_index = 0
        self.missed_deadlines = 0
        frame = self.render_frame()
        self.frames = np.repeat(frame[None], FRAME_STACK, axis=0)
        return self._observation()

    def step(self, action: np.ndarray | None, dt_s: float | None = None):
        """One cycle tick. action=None (or NaN) holds the previous command
        and counts a missed deadline."""
        dt = self.spec.cycle_time_s if dt_s is None else dt_s
        if action is None or not np.all(np.isfinite(action)):
            action = self.prev_action
            self.missed_deadlines += 1
        action = np.clip(np.asarray(action, dtype=np.float64), self.spec.action_lo, self.spec.action_hi)
        # Project the velocity command so the fingertip stays in its box.
        applied = np.zeros(5)
        for frac in (1.0, 0.5, 0.25, 0.125, 0.0):
            cand = self.omega + frac * action * dt
            tip = self.fingertip(cand)
            if np.all(tip >= self.BOX_LO) and np.all(tip <= self.BOX_HI):
                self.omega = cand
                applied = frac * action
                break
        self.velocity = applied
        self.prev_action = action.copy()
        frame = self.render_frame()
        self._push_frame(frame)
        reward = arm_reward(frame, self.omega, self.weights)
        self.step_index += 1
        done = self.step_index >= self.spec.max_episode_steps
        return self._observation(), reward, done


class ArenaRover:
    """Differential-drive rover in a walled arena; green target wall patch."""

    ARENA = (1100.0, 700.0)  # mm
    TRACK = 235.0  # wheel separation, mm (assumed; not in task description)
    RADIUS = 170.0  # body radius, mm
    TARGET = np.array([550.0, 700.0])  # patch center on the far wall
    FOV = np.deg2rad(120.0)
    SIZE_GAIN = 544.0  # patch side in px (8x8 scale) at 1mm... divided by d

    def __init__(self, spec: TaskSpec | None = None):
        self.spec = spec or rover_task_spec()
        self.pos = np.zeros(2)
        self.heading = 0.0
        self.wheel_speeds = np.zeros(2)
        self.prev_action = np.zeros(2)
        self.step_index = 0
        self.missed_deadlines = 0
        self.frames = None

    def render_frame(self) -> np.ndarray:
        h, w = self.spec.frame_h, self.spec.frame_w
        frame = np.tile(_BACKGROUND, (h, w, 1))
        rel = self.TARGET - self.pos
        dist = float(np.hypot(*rel))
        bearing = np.arctan2(rel[1], rel[0]) - self.heading
        bearing = (bearing + np.pi) % (2.0 * np.pi) - np.pi
        if abs(bearing) < self.FOV / 2.0 and dist > 1.0:
            side = self.SIZE_GAIN * (w / 8.0) / dist
            cc = (w - 1) / 2.0 - bearing / (self.FOV / 2.0) * (w / 2.0)
            cr = (h - 1) / 2.0
            rr, ccgrid = np.mgrid[0:h, 0:w]
            patch = (np.abs(rr - cr) <= side / 2.0) & (np.abs(ccgrid - cc) <= side / 2.0)
            frame[patch] = _GREEN
        return frame

    def target_fraction(self, frame: np.ndarray) -> float:
        return float(np.mean(detect_green_mask(frame)))

    def _push_frame(self, frame: np.ndarray) -> None:
        self.frames = np.concatenate([self.frames[1:], frame[None]], axis=0)

    def _observation(self) -> Observation:
        proprio = np.array(
            [
                self.pos[0] / self.ARENA[0],
                self.pos[1] / self.ARENA[1],
                np.cos(self.heading),
                np.sin(self.heading),
                self.wheel_speeds[0] / 150.0,
                self.wheel_speeds[1] / 150.0,
            ]
        )
        return Observation(frames=self.frames.copy(), proprio=proprio, prev_action=self.prev_action.copy() / 150.0)

    def reset(self, rng: np.random.Generator) -> Observation:
        self.pos = np.array(
            [
                rng.uniform(self.RADIUS, self.ARENA[0] - self.RADIUS),
                rng.uniform(self.RADIUS, self.ARENA[1] - self.RADIUS),
            ]
        )
        self.heading = rng.uniform(-np.pi, np.pi)
        self.wheel_speeds = np.zeros(2)
        self.prev_action = np.zeros(2)
        self.step_index = 0
        self.missed_deadlines = 0
        frame = self.render_frame()
        self.frames = np.repeat(frame[None], FRAME_STACK, axis=0)
        return self._observation()

    def step(self, action: np.ndarray | None, dt_s: float | None = None):
        dt = self.spec.cycle_time_s if dt_s is None else dt_s
        if action is None or not np.all(np.isfinite(action)):
            action = self.prev_action
            self.missed_deadlines += 1
        action = np.clip(np.asarray(action, dtype=np.float64), self.spec.action_lo, self.spec.action_hi)
        vl, vr = float(action[0]), float(action[1])
        v = (vl + vr) / 2.0
        omega = (vr - vl) / self.TRACK
        self.heading = (self.heading + omega * dt + np.pi) % (2.0 * np.pi) - np.pi
        self.pos = self.pos + v * dt * np.array([np.cos(self.heading), np.sin(self.heading)])
        self.pos = np.clip(self.pos, self.RADIUS, np.array(self.ARENA) - self.RADIUS)
        self.wheel_speeds = action.copy()
        self.prev_action = action.copy()
        frame = self.render_frame()
        self._push_frame(frame)
        reward = -1.0
        self.step_index += 1
        done = self.target_fraction(frame) > ROVER_DONE_FRACTION or self.step_index >= self.spec.max_episode_steps
        return self._observation(), reward, done


def make_env(name: str, paper_scale: bool = False):
    spec = task_spec(name, paper_scale)
    if spec.name == "pixel_reacher":
        return PixelReacher(spec)
    return ArenaRover(spec)
