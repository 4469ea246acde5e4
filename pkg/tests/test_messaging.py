import socket
import struct
import threading
import time
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmpc.agents import AVERAGES, COPIES, MessageKey, TransportTimeout
from dmpc.messaging import (
    MAX_PAYLOAD,
    InProcBus,
    IterateCache,
    IterateMessage,
    MeasurementMessage,
    SimMeasurements,
    UdpEndpoint,
    UdpMeasurements,
    decode_iterate,
    decode_measurement,
    encode_iterate,
    encode_measurement,
)

GROUP = "239.255.76.67"


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("", 0))
        return s.getsockname()[1]


def _msg(payload, seq=1, phase=COPIES):
    return IterateMessage(0xDEADBEEF, 3, 70000, 4, 2, phase, seq, np.asarray(payload, dtype=float))


class TestWireFormat:
    def test_layout_is_bit_exact(self):
        data = encode_iterate(_msg([1.5, -2.0], seq=9, phase=AVERAGES))
        head = struct.pack("<IBIHHBIH", 0xDEADBEEF, 3, 70000, 4, 2, 1, 9, 2)
        body = head + struct.pack("<2d", 1.5, -2.0)
        assert data == body + struct.pack("<I", zlib.crc32(body))
        assert len(data) == 20 + 16 + 4

    @settings(max_examples=60)
    @given(arrays(np.float64, st.integers(0, 64), elements=st.floats(allow_nan=False)))
    def test_roundtrip(self, payload):
        back = decode_iterate(encode_iterate(_msg(payload)))
        assert back.payload.tobytes() == payload.astype("<f8").tobytes()
        assert back.key == MessageKey(3, 70000, 4, 2, COPIES)

    @settings(max_examples=40)
    @given(st.integers(0, 55), st.integers(1, 255))
    def test_corruption_is_detected(self, pos, flip):
        data = bytearray(encode_iterate(_msg(np.arange(4.0))))
        data[pos % len(data)] ^= flip
        assert decode_iterate(bytes(data)) is None

    def test_truncated(self):
        assert decode_iterate(encode_iterate(_msg([1.0]))[:-5]) is None

    def test_oversize_payload_rejected(self):
        with pytest.raises(ValueError, match="single-datagram"):
            encode_iterate(_msg(np.zeros(MAX_PAYLOAD + 1)))
        assert len(encode_iterate(_msg(np.zeros(MAX_PAYLOAD)))) <= 1400

    def test_measurement_roundtrip(self):
        m = MeasurementMessage(2, 123456789012, np.array([0.25, -1.5]))
        back = decode_measurement(encode_measurement(m))
        assert back.robot == 2 and back.timestamp_ns == 123456789012
        assert back.position.tolist() == [0.25, -1.5]
        bad = bytearray(encode_measurement(m))
        bad[3] ^= 1
        assert decode_measurement(bytes(bad)) is None


class TestCache:
    KEY = MessageKey(1, 5, 0, 0, COPIES)

    def test_higher_seq_wins(self):
        c = IterateCache()
        assert c.insert(self.KEY, 2, np.array([2.0]))
        assert not c.insert(self.KEY, 1, np.array([1.0]))
        assert c.get(self.KEY).tolist() == [2.0]
        assert c.insert(self.KEY, 3, np.array([3.0]))
        assert c.get(self.KEY).tolist() == [3.0]

    def test_eviction_after_two_steps(self):
        c = IterateCache()
        c.insert(MessageKey(0, 1, 0, 0, 0), 1, np.zeros(1))
        c.insert(MessageKey(0, 3, 0, 0, 0), 2, np.zeros(1))
        assert len(c) == 2
        c.insert(MessageKey(0, 4, 0, 0, 0), 3, np.zeros(1))
        assert c.get(MessageKey(0, 1, 0, 0, 0)) is None and len(c) == 2

    def test_cached_returns_immediately(self):
        c = IterateCache()
        c.insert(self.KEY, 1, np.ones(2))
        t0 = time.monotonic()
        found, missing = c.wait_for([self.KEY], time.monotonic() + 5.0)
        assert not missing and time.monotonic() - t0 < 0.05

    def test_wait_wakes_on_insert(self):
        c = IterateCache()
        threading.Timer(0.02, c.insert, args=(self.KEY, 1, np.ones(1))).start()
        found, missing = c.wait_for([self.KEY], time.monotonic() + 2.0)
        assert not missing


class TestInProcess:
    def test_exactly_once_delivery(self):
        bus = InProcBus([0, 1, 2])
        eps = {i: bus.endpoint(i) for i in range(3)}
        eps[0].publish(MessageKey(0, 0, 0, 0, COPIES), np.array([1.0, 2.0]))
        for i in (1, 2):
            got = eps[i].await_keys([MessageKey(0, 0, 0, 0, COPIES)], 0.1)
            assert got[MessageKey(0, 0, 0, 0, COPIES)].tolist() == [1.0, 2.0]

    def test_timeout_with_halted_sender(self):
        ep = InProcBus([0, 1]).endpoint(1)
        t0 = time.monotonic()
        with pytest.raises(TransportTimeout):
            ep.await_keys([MessageKey(0, 0, 0, 0, COPIES)], 0.15)
        assert 0.15 <= time.monotonic() - t0 < 0.15 + 0.1

    def test_sim_measurements(self):
        meas = SimMeasurements()
        with pytest.raises(RuntimeError, match="ever received"):
            meas.await_measurement(0)
        meas.publish(MeasurementMessage(0, 1, np.array([1.0, 2.0])))
        msg, stale = meas.await_measurement(0)
        assert not stale and msg.position.tolist() == [1.0, 2.0]


class TestUdp:
    def test_resend_recovers_lost_messages(self):
        port = free_port()
        eps = [UdpEndpoint(i, 77, GROUP, port, loss_rate=0.3, seed=5) for i in range(2)]
        try:
            keys = [MessageKey(0, s, 0, l, COPIES) for s in range(3) for l in range(10)]
            for k in keys:
                eps[0].publish(k, np.array([k.mpc_step, k.inner], dtype=float))
            got = eps[1].await_keys(keys, 2.0)
            assert all(got[k].tolist() == [k.mpc_step, k.inner] for k in keys)
            assert eps[1].stats["dropped"] > 0
        finally:
            for ep in eps:
                ep.close()

    def test_timeout_surfaces_error(self):
        ep = UdpEndpoint(1, 78, GROUP, free_port())
        try:
            t0 = time.monotonic()
            with pytest.raises(TransportTimeout):
                ep.await_keys([MessageKey(0, 0, 0, 0, COPIES)], 0.15)
            assert time.monotonic() - t0 < 0.15 + 0.1
            assert ep.stats["resend_requests"] > 0
        finally:
            ep.close()

    def test_other_scenarios_ignored(self):
        port = free_port()
        a, b = UdpEndpoint(0, 1, GROUP, port), UdpEndpoint(1, 2, GROUP, port)
        try:
            a.publish(MessageKey(0, 0, 0, 0, COPIES), np.ones(1))
            with pytest.raises(TransportTimeout):
                b.await_keys([MessageKey(0, 0, 0, 0, COPIES)], 0.05)
        finally:
            a.close()
            b.close()

    def test_measurements_fresh_and_stale(self):
        meas = UdpMeasurements(GROUP, free_port())
        try:
            meas.seed(MeasurementMessage(0, 0, np.array([0.5, 0.5])))
            msg, stale = meas.await_measurement(0, 0.02, newer_than=0)
            assert stale and msg.position.tolist() == [0.5, 0.5]
            meas.publish(MeasurementMessage(0, 1, np.array([0.6, 0.5])))
            msg, stale = meas.await_measurement(0, 1.0, newer_than=0)
            assert not stale and msg.timestamp_ns == 1
            with pytest.raises(RuntimeError, match="ever received"):
                meas.await_measurement(3, 0.01)
        finally:
            meas.close()

    def test_dropping_measurements_leaves_iterates_alone(self):
        port = free_port()
        meas = UdpMeasurements(GROUP, port + 1 if port < 65535 else port - 1, drop_all=True)
        eps = [UdpEndpoint(i, 79, GROUP, port) for i in range(2)]
        try:
            meas.seed(MeasurementMessage(0, 0, np.zeros(2)))
            meas.publish(MeasurementMessage(0, 1, np.ones(2)))
            eps[0].publish(MessageKey(0, 0, 0, 0, COPIES), np.arange(3.0))
            assert eps[1].await_keys([MessageKey(0, 0, 0, 0, COPIES)], 1.0)
            _, stale = meas.await_measurement(0, 0.05, newer_than=0)
            assert stale
        finally:
            meas.close()
            for ep in eps:
                ep.close()
