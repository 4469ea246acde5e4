"""Execution model shared by the distributed solvers.

Agent algorithms are plain generators. They ``yield Publish(...)`` to send a
payload and ``yield Await(keys)`` to block until the listed messages are
available; the await expression evaluates to ``{key: payload}``. A driver
decides how those effects are realized:

* :func:`run_lockstep` interleaves all agents in one thread over an
  in-memory mailbox. It is deterministic and has no scheduling overhead.
* :func:`run_threaded` runs one thread per agent on top of transport
  endpoints (in-process bus or UDP) and turns timeouts into a
  :class:`TransportTimeout` raised inside the generator.

Both drivers feed the agents the same payload bytes, so iterates agree
bit for bit.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Mapping, NamedTuple

import numpy as np

COPIES = 0
AVERAGES = 1
REDUCE = 2
# inner index of the extra copy exchange that precedes an inner loop
PRE_ROUND = 0xFFFF


class MessageKey(NamedTuple):
    sender: int
    mpc_step: int
    outer: int
    inner: int
    phase: int


@dataclass(frozen=True)
class Publish:
    key: MessageKey
    payload: np.ndarray


@dataclass(frozen=True)
class Await:
    keys: tuple[MessageKey, ...]


class TransportTimeout(RuntimeError):
    """Awaited messages did not arrive within the timeout."""


AgentGen = Generator[Any, Any, Any]


@dataclass
class AgentContext:
    """Per-agent clock and timing log; the clock only runs while the agent computes."""

    index: int
    clock: Callable[[], int] = time.perf_counter_ns
    timings: list[tuple[str, float]] = field(default_factory=list)

    def now(self) -> int:
        return self.clock()

    def record(self, label: str, start_ns: int) -> int:
        end = self.clock()
        self.timings.append((label, (end - start_ns) / 1e3))
        return end


class _AgentClock:
    def __init__(self):
        self.accum = 0
        self.since: int | None = None

    def __call__(self) -> int:
        running = 0 if self.since is None else time.perf_counter_ns() - self.since
        return self.accum + running

    def start(self):
        self.since = time.perf_counter_ns()

    def stop(self):
        self.accum += time.perf_counter_ns() - self.since
        self.since = None


def payload_digest(payload: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(payload, dtype="<f8").tobytes()).hexdigest()


class IterateLog:
    """Thread-safe record of every published payload, by key."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: dict[MessageKey, str] = {}

    def __call__(self, key: MessageKey, payload: np.ndarray) -> None:
        with self._lock:
            self.entries[key] = payload_digest(payload)


def lockstep_contexts(indices) -> dict[int, AgentContext]:
    return {i: AgentContext(i, _AgentClock()) for i in indices}


def run_lockstep(gens: Mapping[int, AgentGen], contexts: Mapping[int, AgentContext] | None = None,
                 trace: Callable[[MessageKey, np.ndarray], None] | None = None) -> dict[int, Any]:
    """Drive all generators to completion in a single thread."""
    clocks = {}
    if contexts is not None:
        clocks = {i: c.clock for i, c in contexts.items() if isinstance(c.clock, _AgentClock)}
    mailbox: dict[MessageKey, np.ndarray] = {}
    results: dict[int, Any] = {}
    pending: dict[int, Any] = {i: None for i in gens}
    waiting: dict[int, tuple[MessageKey, ...]] = {}
    order = sorted(gens)
    while pending or waiting:
        progressed = False
        for i in order:
            if i in waiting:
                keys = waiting[i]
                if all(k in mailbox for k in keys):
                    del waiting[i]
                    pending[i] = {k: mailbox[k] for k in keys}
            if i not in pending:
                continue
            value = pending.pop(i)
            clock = clocks.get(i)
            while True:
                if clock is not None:
                    clock.start()
                try:
                    effect = gens[i].send(value)
                except StopIteration as stop:
                    results[i] = stop.value
                    effect = None
                finally:
                    if clock is not None:
                        clock.stop()
                progressed = True
                if effect is None:
                    break
                if isinstance(effect, Publish):
                    payload = np.array(effect.payload, dtype=float, copy=True)
                    mailbox[effect.key] = payload
                    if trace is not None:
                        trace(effect.key, payload)
                    value = None
                    continue
                if isinstance(effect, Await):
                    if all(k in mailbox for k in effect.keys):
                        value = {k: mailbox[k] for k in effect.keys}
                        continue
                    waiting[i] = tuple(effect.keys)
                    break
                raise TypeError(f"agent {i} yielded unsupported effect {effect!r}")
        if not progressed:
            missing = {i: [k for k in keys if k not in mailbox] for i, keys in waiting.items()}
            raise TransportTimeout(f"deadlock: agents wait for messages nobody sends: {missing}")
    return results


def run_threaded(gens: Mapping[int, AgentGen], endpoints: Mapping[int, Any], timeout: float,
                 trace: Callable[[MessageKey, np.ndarray], None] | None = None) -> dict[int, Any]:
    """One thread per agent; ``endpoints[i]`` provides ``publish`` and ``await_keys``.

    Returns the generator results; an agent that raised stores the exception.
    """
    results: dict[int, Any] = {}

    def worker(i):
        gen, ep = gens[i], endpoints[i]
        value = None
        error = None
        try:
            while True:
                try:
                    effect = gen.send(value) if error is None else gen.throw(error)
                except StopIteration as stop:
                    results[i] = stop.value
                    return
                error = None
                value = None
                if isinstance(effect, Publish):
                    payload = np.array(effect.payload, dtype=float, copy=True)
                    if trace is not None:
                        trace(effect.key, payload)
                    ep.publish(effect.key, payload)
                elif isinstance(effect, Await):
                    try:
                        value = ep.await_keys(effect.keys, timeout)
                    except TransportTimeout as exc:
                        error = exc
                else:
                    raise TypeError(f"agent {i} yielded unsupported effect {effect!r}")
        except BaseException as exc:  # surfaced to the caller through results
            results[i] = exc

    threads = [threading.Thread(target=worker, args=(i,), name=f"agent-{i}", daemon=True) for i in sorted(gens)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results
