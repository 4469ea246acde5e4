"""Iterate and measurement transport.

Wire format of an iterate datagram (little endian)::

    u32 scenario_id | u8 sender | u32 mpc_step | u16 outer | u16 inner |
    u8 phase | u32 seq | u16 payload_len | f64 * payload_len | u32 crc32

The checksum covers every preceding byte. A resend request reuses the
header with ``phase | 0x80``, no payload and the *target* agent in the
sender field. Measurements travel on a separate port as
``u8 robot | u64 timestamp_ns | f64 x | f64 y | u32 crc32``.
"""

from __future__ import annotations

import logging
import random
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .agents import MessageKey, TransportTimeout

log = logging.getLogger(__name__)

__all__ = [
    "InProcBus",
    "IterateCache",
    "IterateMessage",
    "MeasurementMessage",
    "SimMeasurements",
    "UdpEndpoint",
    "UdpMeasurements",
    "decode_iterate",
    "decode_measurement",
    "encode_iterate",
    "encode_measurement",
    "open_endpoints",
]

HEADER = struct.Struct("<IBIHHBIH")
CRC = struct.Struct("<I")
MEASUREMENT = struct.Struct("<BQ2d")
MAX_DATAGRAM = 1400
MAX_PAYLOAD = (MAX_DATAGRAM - HEADER.size - CRC.size) // 8
RESEND_FLAG = 0x80
DEFAULT_GROUP = "239.255.76.67"
DEFAULT_PORT = 47600
DEFAULT_RESEND_INTERVAL = 0.005
DEFAULT_TIMEOUT = 0.150
EVICT_AFTER_STEPS = 2


@dataclass(frozen=True)
class IterateMessage:
    scenario_id: int
    sender: int
    mpc_step: int
    outer: int
    inner: int
    phase: int
    seq: int
    payload: np.ndarray

    @property
    def key(self) -> MessageKey:
        return MessageKey(self.sender, self.mpc_step, self.outer, self.inner, self.phase)

    @property
    def is_resend_request(self) -> bool:
        return bool(self.phase & RESEND_FLAG)


@dataclass(frozen=True)
class MeasurementMessage:
    robot: int
    timestamp_ns: int
    position: np.ndarray


def encode_iterate(msg: IterateMessage) -> bytes:
    payload = np.ascontiguousarray(msg.payload, dtype="<f8").ravel()
    if payload.size > MAX_PAYLOAD:
        raise ValueError(f"payload of {payload.size} values exceeds the single-datagram limit of {MAX_PAYLOAD}")
    head = HEADER.pack(msg.scenario_id, msg.sender, msg.mpc_step, msg.outer, msg.inner, msg.phase,
                       msg.seq, payload.size)
    body = head + payload.tobytes()
    return body + CRC.pack(zlib.crc32(body))


def decode_iterate(data: bytes) -> IterateMessage | None:
    """Parse a datagram; ``None`` for truncated or corrupted input."""
    if len(data) < HEADER.size + CRC.size:
        return None
    body, (crc,) = data[:-CRC.size], CRC.unpack(data[-CRC.size:])
    if zlib.crc32(body) != crc:
        return None
    sid, sender, step, outer, inner, phase, seq, n = HEADER.unpack(body[:HEADER.size])
    if len(body) != HEADER.size + 8 * n:
        return None
    payload = np.frombuffer(body, dtype="<f8", count=n, offset=HEADER.size).astype(float)
    return IterateMessage(sid, sender, step, outer, inner, phase, seq, payload)


def encode_measurement(msg: MeasurementMessage) -> bytes:
    x, y = (float(v) for v in msg.position)
    body = MEASUREMENT.pack(msg.robot, msg.timestamp_ns, x, y)
    return body + CRC.pack(zlib.crc32(body))


def decode_measurement(data: bytes) -> MeasurementMessage | None:
    if len(data) != MEASUREMENT.size + CRC.size:
        return None
    body, (crc,) = data[:-CRC.size], CRC.unpack(data[-CRC.size:])
    if zlib.crc32(body) != crc:
        return None
    robot, ts, x, y = MEASUREMENT.unpack(body)
    return MeasurementMessage(robot, ts, np.array([x, y]))


class IterateCache:
    """Key-value store shared by a receive loop and the compute thread."""

    def __init__(self):
        self._cond = threading.Condition()
        self._items: dict[MessageKey, tuple[int, np.ndarray]] = {}
        self.latest_step = 0

    def insert(self, key: MessageKey, seq: int, payload: np.ndarray) -> bool:
        with self._cond:
            old = self._items.get(key)
            if old is not None and old[0] >= seq:
                return False
            self._items[key] = (seq, payload)
            if key.mpc_step > self.latest_step:
                self.latest_step = key.mpc_step
                self._evict()
            self._cond.notify_all()
            return True

    def _evict(self):
        cutoff = self.latest_step - EVICT_AFTER_STEPS
        for k in [k for k in self._items if k.mpc_step < cutoff]:
            del self._items[k]

    def get(self, key: MessageKey):
        with self._cond:
            item = self._items.get(key)
            return None if item is None else item[1]

    def __len__(self):
        with self._cond:
            return len(self._items)

    def wait_for(self, keys: Iterable[MessageKey], deadline: float) -> tuple[dict, list]:
        """Wait until ``deadline`` (monotonic) at most; returns found items and missing keys."""
        keys = tuple(keys)
        with self._cond:
            while True:
                missing = [k for k in keys if k not in self._items]
                if not missing:
                    return {k: self._items[k][1] for k in keys}, []
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return {k: self._items[k][1] for k in keys if k in self._items}, missing
                self._cond.wait(remaining)


class InProcBus:
    """Exactly-once delivery between endpoints living in one process."""

    def __init__(self, agents: Iterable[int]):
        self.caches = {i: IterateCache() for i in agents}
        self._seq = 0
        self._lock = threading.Lock()

    def endpoint(self, agent: int) -> _InProcEndpoint:
        return _InProcEndpoint(self, agent)

    def deliver(self, key: MessageKey, payload: np.ndarray) -> None:
        with self._lock:
            self._seq += 1
            seq = self._seq
        for cache in self.caches.values():
            cache.insert(key, seq, payload)


class _InProcEndpoint:
    def __init__(self, bus: InProcBus, agent: int):
        self.bus = bus
        self.agent = agent
        self.cache = bus.caches[agent]

    def publish(self, key: MessageKey, payload: np.ndarray) -> None:
        self.bus.deliver(key, np.array(payload, dtype=float, copy=True))

    def await_keys(self, keys, timeout: float) -> dict:
        found, missing = self.cache.wait_for(keys, time.monotonic() + timeout)
        if missing:
            raise TransportTimeout(f"agent {self.agent}: timed out waiting for {missing}")
        return found

    def close(self) -> None:
        pass


def _multicast_sockets(group: str, port: int):
    recv = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    recv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    if hasattr(socket, "SO_REUSEPORT"):
        recv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    recv.bind(("", port))
    mreq = struct.pack("4s4s", socket.inet_aton(group), socket.inet_aton("127.0.0.1"))
    recv.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
    recv.settimeout(0.05)
    send = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    send.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
    send.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
    send.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton("127.0.0.1"))
    return recv, send


class UdpEndpoint:
    """Multicast publish-subscribe endpoint of one agent with receiver-driven resend.

    ``loss_rate`` drops incoming datagrams at random (seeded) before they
    reach the cache, which emulates a lossy network on loopback.
    """

    def __init__(self, agent: int, scenario_id: int, group: str = DEFAULT_GROUP, port: int = DEFAULT_PORT,
                 loss_rate: float = 0.0, seed: int = 0, resend_interval: float = DEFAULT_RESEND_INTERVAL):
        if not 0.0 <= loss_rate < 1.0:
            raise ValueError("loss_rate must be in [0, 1)")
        self.agent = agent
        self.scenario_id = scenario_id
        self.group, self.port = group, port
        self.loss_rate = loss_rate
        self.resend_interval = resend_interval
        self.cache = IterateCache()
        self._rng = random.Random(seed * 1000003 + agent)
        self._sent: dict[MessageKey, bytes] = {}
        self._sent_lock = threading.Lock()
        self._seq = 0
        self.stats = {"sent": 0, "received": 0, "dropped": 0, "corrupt": 0, "resend_requests": 0, "resent": 0}
        self._recv, self._send = _multicast_sockets(group, port)
        self._running = True
        self._thread = threading.Thread(target=self._receive_loop, name=f"udp-rx-{agent}", daemon=True)
        self._thread.start()

    def _transmit(self, data: bytes) -> None:
        self._send.sendto(data, (self.group, self.port))

    def publish(self, key: MessageKey, payload: np.ndarray) -> None:
        self._seq += 1
        msg = IterateMessage(self.scenario_id, key.sender, key.mpc_step, key.outer, key.inner, key.phase,
                             self._seq, payload)
        data = encode_iterate(msg)
        with self._sent_lock:
            self._sent[key] = data
            cutoff = key.mpc_step - EVICT_AFTER_STEPS
            for k in [k for k in self._sent if k.mpc_step < cutoff]:
                del self._sent[k]
        self.cache.insert(key, self._seq, np.array(payload, dtype=float, copy=True))
        self._transmit(data)
        self.stats["sent"] += 1

    def _request_resend(self, key: MessageKey) -> None:
        req = IterateMessage(self.scenario_id, key.sender, key.mpc_step, key.outer, key.inner,
                             key.phase | RESEND_FLAG, 0, np.zeros(0))
        self._transmit(encode_iterate(req))
        self.stats["resend_requests"] += 1

    def await_keys(self, keys, timeout: float) -> dict:
        start = time.monotonic()
        deadline = start + timeout
        while True:
            step_deadline = min(deadline, time.monotonic() + self.resend_interval)
            found, missing = self.cache.wait_for(keys, step_deadline)
            if not missing:
                return found
            if time.monotonic() >= deadline:
                raise TransportTimeout(f"agent {self.agent}: no data for {missing} after {timeout * 1e3:.0f} ms")
            for key in missing:
                self._request_resend(key)

    def _receive_loop(self) -> None:
        while self._running:
            try:
                data, _ = self._recv.recvfrom(65536)
            except socket.timeout:
                continue
            except OSError:
                break
            msg = decode_iterate(data)
            if msg is None:
                self.stats["corrupt"] += 1
                continue
            if msg.scenario_id != self.scenario_id:
                continue
            if self.loss_rate and self._rng.random() < self.loss_rate:
                self.stats["dropped"] += 1
                continue
            if msg.is_resend_request:
                if msg.sender == self.agent:
                    key = MessageKey(msg.sender, msg.mpc_step, msg.outer, msg.inner, msg.phase & ~RESEND_FLAG)
                    with self._sent_lock:
                        data = self._sent.get(key)
                    if data is not None:
                        self._transmit(data)
                        self.stats["resent"] += 1
                continue
            if msg.sender == self.agent:
                continue
            self.stats["received"] += 1
            self.cache.insert(msg.key, msg.seq, msg.payload)

    def close(self) -> None:
        self._running = False
        self._thread.join(timeout=1.0)
        self._recv.close()
        self._send.close()


class SimMeasurements:
    """Simulator-provided measurements: always fresh, never waits."""

    def __init__(self):
        self._latest: dict[int, MeasurementMessage] = {}

    def publish(self, msg: MeasurementMessage) -> None:
        self._latest[msg.robot] = msg

    def await_measurement(self, robot: int, max_wait: float = 0.0, newer_than: int | None = None):
        if robot not in self._latest:
            raise RuntimeError(f"no measurement for robot {robot} was ever received")
        return self._latest[robot], False

    def close(self) -> None:
        pass


class UdpMeasurements:
    """Pose channel on its own multicast port, isolated from iterate traffic."""

    def __init__(self, group: str = DEFAULT_GROUP, port: int = DEFAULT_PORT + 1, drop_all: bool = False):
        self.group, self.port = group, port
        self.drop_all = drop_all
        self._cond = threading.Condition()
        self._latest: dict[int, MeasurementMessage] = {}
        self._recv, self._send = _multicast_sockets(group, port)
        self._running = True
        self._thread = threading.Thread(target=self._receive_loop, name="udp-meas", daemon=True)
        self._thread.start()

    def publish(self, msg: MeasurementMessage) -> None:
        self._send.sendto(encode_measurement(msg), (self.group, self.port))

    def seed(self, msg: MeasurementMessage) -> None:
        """Provide an initial value without the network (simulator-provided initial state)."""
        with self._cond:
            self._latest.setdefault(msg.robot, msg)

    def _receive_loop(self) -> None:
        while self._running:
            try:
                data, _ = self._recv.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            msg = decode_measurement(data)
            if msg is None or self.drop_all:
                continue
            with self._cond:
                old = self._latest.get(msg.robot)
                if old is None or msg.timestamp_ns >= old.timestamp_ns:
                    self._latest[msg.robot] = msg
                    self._cond.notify_all()

    def await_measurement(self, robot: int, max_wait: float, newer_than: int | None = None):
        """Fresh measurement within ``max_wait`` seconds, else the cached one flagged stale."""
        deadline = time.monotonic() + max_wait
        with self._cond:
            while True:
                msg = self._latest.get(robot)
                if msg is not None and (newer_than is None or msg.timestamp_ns > newer_than):
                    return msg, False
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    if msg is None:
                        raise RuntimeError(f"no measurement for robot {robot} was ever received")
                    return msg, True
                self._cond.wait(remaining)

    def close(self) -> None:
        self._running = False
        self._thread.join(timeout=1.0)
        self._recv.close()
        self._send.close()


def open_endpoints(kind: str, agents: Iterable[int], scenario_id: int = 0, group: str = DEFAULT_GROUP,
                   port: int = DEFAULT_PORT, loss_rate: float = 0.0, seed: int = 0) -> Mapping[int, object]:
    agents = list(agents)
    if kind == "inproc":
        bus = InProcBus(agents)
        return {i: bus.endpoint(i) for i in agents}
    if kind == "udp":
        return {i: UdpEndpoint(i, scenario_id, group, port, loss_rate, seed) for i in agents}
    raise ValueError(f"unknown transport {kind!r}")
