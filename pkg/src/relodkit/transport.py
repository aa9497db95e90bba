"""The wire: message framing, a deterministic latency link model, and
bounded blocking queues.

Frame layout: [4-byte big-endian body length][1-byte kind][8-byte seq]
[8-byte sent_at ns][body]. The length field counts everything after itself.
Scalars travel as little-endian float32.
"""

from __future__ import annotations

import hashlib
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PORT = 9876

HELLO = 1
OBS = 2
ACT = 3
TRANSITIONS = 4
POLICY = 5
HEARTBEAT = 6
BYE = 7

KINDS = (HELLO, OBS, ACT, TRANSITIONS, POLICY, HEARTBEAT, BYE)
KIND_NAMES = {HELLO: "HELLO", OBS: "OBS", ACT: "ACT", TRANSITIONS: "TRANSITIONS", POLICY: "POLICY", HEARTBEAT: "HEARTBEAT", BYE: "BYE"}

HELLO_MAGIC = 0x524C4B31  # "RLK1"

_HEADER = struct.Struct(">BQQ")  # kind, seq, sent_at (after the length word)
_LEN = struct.Struct(">I")


class FramingError(ValueError):
    """Truncated or length-inconsistent frame."""


class ProtocolError(ValueError):
    """Well-framed but semantically invalid message."""


class IntegrityError(ValueError):
    """Digest mismatch on a protected frame."""


@dataclass(frozen=True)
class Message:
    kind: int
    seq: int
    sent_at: int
    payload: dict


def _f32(values) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


def _read_f32(buf: memoryview, off: int, n: int):
    end = off + 4 * n
    if end > len(buf):
        raise FramingError("body truncated reading float array")
    return np.frombuffer(buf[off:end], dtype="<f4").astype(np.float64), end


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _read_u32(buf: memoryview, off: int):
    if off + 4 > len(buf):
        raise FramingError("body truncated reading u32")
    return struct.unpack_from("<I", buf, off)[0], off + 4


def _u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def _read_u64(buf: memoryview, off: int):
    if off + 8 > len(buf):
        raise FramingError("body truncated reading u64")
    return struct.unpack_from("<Q", buf, off)[0], off + 8


def _policy_digest(seq: int, sent_at: int, version: int, checksum: int, weights_bytes: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack(">BQQ", POLICY, seq, sent_at))
    h.update(struct.pack("<QQ", version, checksum))
    h.update(weights_bytes)
    return int.from_bytes(h.digest(), "big")


def _encode_body(msg: Message) -> bytes:
    p = msg.payload
    if msg.kind == HELLO:
        name = p["task"].encode("utf-8")
        return b"".join(
            [
                _u32(HELLO_MAGIC),
                _u32(len(name)),
                name,
                _u32(p["action_dim"]),
                _u32(p["obs_dim"]),
                _u32(p["param_count"]),
            ]
        )
    if msg.kind == OBS:
        obs = np.asarray(p["obs"])
        applied = np.asarray(p["applied_action"])
        return b"".join(
            [
                _u32(p["episode_id"]),
                _u32(p["step_index"]),
                struct.pack("<f", p["reward"]),
                struct.pack("<B", 1 if p["done"] else 0),
                _u32(obs.size),
                _f32(obs),
                _u32(applied.size),
                _f32(applied),
            ]
        )
    if msg.kind == ACT:
        act = np.asarray(p["action"])
        return b"".join([_u32(act.size), _f32(act)])
    if msg.kind == TRANSITIONS:
        recs = p["transitions"]
        chunks = [_u32(len(recs))]
        for r in recs:
            obs = np.asarray(r["obs"])
            nxt = np.asarray(r["next_obs"])
            act = np.asarray(r["action"])
            pre = np.asarray(r.get("pre_squash", act * 0.0))
            chunks.extend(
                [
                    _u32(r["episode_id"]),
                    _u32(r["step_index"]),
                    _u64(r["produced_at"]),
                    struct.pack("<f", r["reward"]),
                    struct.pack("<B", 1 if r["done"] else 0),
                    struct.pack("<f", r.get("log_prob", 0.0)),
                    _u32(obs.size),
                    _f32(obs),
                    _u32(act.size),
                    _f32(act),
                    _u32(pre.size),
                    _f32(pre),
                    _u32(nxt.size),
                    _f32(nxt),
                ]
            )
        return b"".join(chunks)
    if msg.kind == POLICY:
        weights = np.asarray(p["weights"], dtype="<f4")
        wbytes = weights.tobytes()
        digest = _policy_digest(msg.seq, msg.sent_at, p["version"], p["checksum"], wbytes)
        return b"".join(
            [
                _u64(digest),
                _u64(p["version"]),
                _u64(p["checksum"]),
                _u32(weights.size),
                wbytes,
            ]
        )
    if msg.kind in (HEARTBEAT, BYE):
        return b""
    raise ProtocolError(f"unknown kind: {msg.kind}")


def _decode_body(kind: int, seq: int, sent_at: int, body: memoryview) -> dict:
    off = 0
    if kind == HELLO:
        magic, off = _read_u32(body, off)
        if magic != HELLO_MAGIC:
            raise ProtocolError("bad HELLO magic")
        nlen, off = _read_u32(body, off)
        if off + nlen > len(body):
            raise FramingError("HELLO name truncated")
        name = bytes(body[off : off + nlen]).decode("utf-8")
        off += nlen
        action_dim, off = _read_u32(body, off)
        obs_dim, off = _read_u32(body, off)
        param_count, off = _read_u32(body, off)
        payload = {"task": name, "action_dim": action_dim, "obs_dim": obs_dim, "param_count": param_count}
    elif kind == OBS:
        episode_id, off = _read_u32(body, off)
        step_index, off = _read_u32(body, off)
        if off + 5 > len(body):
            raise FramingError("OBS body truncated")
        reward = struct.unpack_from("<f", body, off)[0]
        done = body[off + 4] != 0
        off += 5
        n, off = _read_u32(body, off)
        obs, off = _read_f32(body, off, n)
        n, off = _read_u32(body, off)
        applied, off = _read_f32(body, off, n)
        payload = {
            "episode_id": episode_id,
            "step_index": step_index,
            "reward": float(reward),
            "done": done,
            "obs": obs,
            "applied_action": applied,
        }
    elif kind == ACT:
        n, off = _read_u32(body, off)
        act, off = _read_f32(body, off, n)
        payload = {"action": act}
    elif kind == TRANSITIONS:
        count, off = _read_u32(body, off)
        recs = []
        for _ in range(count):
            episode_id, off = _read_u32(body, off)
            step_index, off = _read_u32(body, off)
            produced_at, off = _read_u64(body, off)
            if off + 9 > len(body):
                raise FramingError("transition record truncated")
            reward = struct.unpack_from("<f", body, off)[0]
            done = body[off + 4] != 0
            log_prob = struct.unpack_from("<f", body, off + 5)[0]
            off += 9
            n, off = _read_u32(body, off)
            obs, off = _read_f32(body, off, n)
            n, off = _read_u32(body, off)
            act, off = _read_f32(body, off, n)
            n, off = _read_u32(body, off)
            pre, off = _read_f32(body, off, n)
            n, off = _read_u32(body, off)
            nxt, off = _read_f32(body, off, n)
            recs.append(
                {
                    "episode_id": episode_id,
                    "step_index": step_index,
                    "produced_at": produced_at,
                    "reward": float(reward),
                    "done": done,
                    "log_prob": float(log_prob),
                    "obs": obs,
                    "action": act,
                    "pre_squash": pre,
                    "next_obs": nxt,
                }
            )
        payload = {"transitions": recs}
    elif kind == POLICY:
        digest, off = _read_u64(body, off)
        version, off = _read_u64(body, off)
        checksum, off = _read_u64(body, off)
        n, off = _read_u32(body, off)
        end = off + 4 * n
        if end > len(body):
            raise FramingError("POLICY weights truncated")
        wbytes = bytes(body[off:end])
        off = end
        if _policy_digest(seq, sent_at, version, checksum, wbytes) != digest:
            raise IntegrityError("POLICY frame digest mismatch")
        weights = np.frombuffer(wbytes, dtype="<f4")
        payload = {"version": version, "checksum": checksum, "weights": weights}
    elif kind in (HEARTBEAT, BYE):
        payload = {}
    else:
        raise ProtocolError(f"unknown kind: {kind}")
    if off != len(body):
        raise FramingError(f"body length mismatch: consumed {off} of {len(body)}")
    return payload


def encode(msg: Message) -> bytes:
    body = _encode_body(msg)
    header = _HEADER.pack(msg.kind, msg.seq, msg.sent_at)
    return _LEN.pack(len(header) + len(body)) + header + body


def decode(frame: bytes) -> Message:
    if len(frame) < 4:
        raise FramingError("frame shorter than length word")
    (declared,) = _LEN.unpack_from(frame, 0)
    if len(frame) - 4 != declared:
        raise FramingError(f"declared length {declared} != actual {len(frame) - 4}")
    if declared < _HEADER.size:
        raise FramingError("frame shorter than header")
    kind, seq, sent_at = _HEADER.unpack_from(frame, 4)
    if kind not in KINDS:
        raise ProtocolError(f"unknown kind: {kind}")
    body = memoryview(frame)[4 + _HEADER.size :]
    payload = _decode_body(kind, seq, sent_at, body)
    return Message(kind=kind, seq=seq, sent_at=sent_at, payload=payload)


# -- wall-mode sockets ----------------------------------------------------


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


def recv_message(sock: socket.socket) -> Message:
    head = _recv_exact(sock, 4)
    (length,) = _LEN.unpack(head)
    rest = _recv_exact(sock, length)
    return decode(head + rest)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise FramingError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# -- link model ------------------------------------------------------------


@dataclass
class Jitter:
    kind: str = "none"  # none | uniform | normal
    a: float = 0.0  # lo (uniform) or mu (normal), in ns
    b: float = 0.0  # hi (uniform) or sigma (normal), in ns

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b)
        if self.kind == "normal":
            return max(0.0, rng.normal(self.a, self.b))
        raise ValueError(f"unknown jitter kind: {self.kind}")


class LinkModel:
    """Per-message delay model: base delay + jitter, optional drops; with
    reorder off, delivery times are clamped to preserve send order."""

    def __init__(self, base_delay_ns: int = 0, jitter: Jitter | None = None, drop_rate: float = 0.0, reorder: bool = False):
        self.base_delay_ns = int(base_delay_ns)
        self.jitter = jitter or Jitter()
        self.drop_rate = float(drop_rate)
        self.reorder = reorder
        self.dropped = 0
        self._last_delivery_ns = {}  # per direction key

    def delivery_time(self, now_ns: int, rng: np.random.Generator, direction: str = "fwd"):
        """Scheduled delivery timestamp, or None when the message drops."""
        if self.drop_rate > 0.0 and rng.random() < self.drop_rate:
            self.dropped += 1
            return None
        delay = self.base_delay_ns + self.jitter.draw(rng)
        t = now_ns + max(0.0, delay)
        if not self.reorder:
            t = max(t, self._last_delivery_ns.get(direction, 0))
            self._last_delivery_ns[direction] = t
        return int(round(t))


def link_preset(name: str) -> LinkModel:
    if name == "wifi":
        return LinkModel(base_delay_ns=5_000_000, jitter=Jitter("uniform", 0.0, 80_000_000.0))
    if name == "wired":
        return LinkModel(base_delay_ns=100_000)
    if name == "none":
        return LinkModel(base_delay_ns=0)
    raise ValueError(f"unknown link preset: {name}")


# -- bounded queue ----------------------------------------------------------


class BoundedQueue:
    """FIFO sized to the maximum episode length; a full queue blocks the
    producer (never drops). In virtual time, blocked producers register a
    callback that fires on the next pop."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self._items = []
        self._waiting = []
        self.max_occupancy = 0
        self.total_pushed = 0

    def __len__(self) -> int:
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) >= self.capacity

    def try_push(self, item) -> bool:
        if self.full:
            return False
        self._items.append(item)
        self.total_pushed += 1
        self.max_occupancy = max(self.max_occupancy, len(self._items))
        return True

    def push_or_wait(self, item, on_space) -> bool:
        """Push, or register a retry callback for when space frees up."""
        if self.try_push(item):
            return True
        self._waiting.append(on_space)
        return False

    def pop(self):
        if not self._items:
            raise IndexError("pop from empty queue")
        item = self._items.pop(0)
        if self._waiting:
            self._waiting.pop(0)()
        return item
