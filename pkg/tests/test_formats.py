import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikepose.events import EventOrderError, EventRangeError, EventStream
from spikepose.formats import (ACTIVITY_DGRAM, POSE_DGRAM, ActivityDatagram, FormatError,
                               PoseDatagram, decode_events_bin, decode_events_csv, decode_gt_csv,
                               encode_events_bin, encode_events_csv, encode_gt_csv, read_events,
                               read_pose_stream, write_events, write_pose_stream)
from spikepose.network import HeadMaps
from spikepose.posedecode import Pose


def random_stream(seed, n=200, w=320, h=240):
    rng = np.random.default_rng(seed)
    return EventStream.from_arrays(np.sort(rng.integers(0, 2**40, n)), rng.integers(0, w, n),
                                   rng.integers(0, h, n), rng.integers(0, 2, n), w, h)


class TestEvents:
    @given(st.integers(0, 2**32), st.integers(0, 300))
    @settings(max_examples=50, deadline=None)
    def test_bin_round_trip(self, seed, n):
        s = random_stream(seed, n)
        back = decode_events_bin(encode_events_bin(s))
        assert back.width == s.width and back.height == s.height
        assert back.events.tobytes() == s.events.tobytes()
        assert encode_events_bin(back) == encode_events_bin(s)

    def test_record_layout(self):
        s = random_stream(0, 3)
        buf = encode_events_bin(s)
        assert len(buf) == 9 + 16 * 3 and buf[:4] == b"TNUS" and buf[4] == 1

    def test_csv_and_bin_agree(self, tmp_path):
        s = random_stream(1)
        write_events(s, tmp_path / "a.csv")
        write_events(s, tmp_path / "a.evt")
        a, b = read_events(tmp_path / "a.csv"), read_events(tmp_path / "a.evt")
        assert np.array_equal(a.events, b.events) and np.array_equal(a.events, s.events)

    def test_empty(self):
        s = decode_events_csv("# tonus-evt v1 160 160\n")
        assert len(s) == 0 and s.width == 160
        assert len(decode_events_bin(encode_events_bin(s))) == 0

    def test_errors_report_position(self):
        with pytest.raises(EventOrderError, match="line 3"):
            decode_events_csv("# tonus-evt v1 10 10\n5,1,1,0\n4,1,1,0\n")
        with pytest.raises(EventRangeError, match="line 2"):
            decode_events_csv("# tonus-evt v1 10 10\n5,10,1,0\n")
        with pytest.raises(FormatError, match="line 2"):
            decode_events_csv("# tonus-evt v1 10 10\n5,1,1\n")
        with pytest.raises(FormatError, match="line 1"):
            decode_events_csv("x\n")
        buf = encode_events_bin(random_stream(2, 4))
        with pytest.raises(FormatError, match="offset 57"):
            decode_events_bin(buf[:-3])
        bad = bytearray(buf)
        bad[9 + 16 + 14] = 7
        with pytest.raises(FormatError, match="offset 25"):
            decode_events_bin(bytes(bad))
        with pytest.raises(FormatError):
            decode_events_bin(b"XXXX" + buf[4:])


class TestPoseStreams:
    def test_gt_round_trip(self):
        rng = np.random.default_rng(0)
        ts = np.arange(5) * 10_000
        joints = rng.uniform(0, 160, (5, 13, 2))
        t2, j2, conf = decode_gt_csv(encode_gt_csv(ts, joints))
        assert conf is None and np.array_equal(t2, ts) and np.array_equal(j2, joints)

    def test_pose_stream_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        poses = [Pose(rng.uniform(0, 160, (13, 2)), rng.random(13), None, 10_000 * k) for k in range(4)]
        write_pose_stream(tmp_path / "p.csv", poses)
        back = read_pose_stream(tmp_path / "p.csv")
        for a, b in zip(poses, back):
            assert np.array_equal(a.xy, b.xy) and np.array_equal(a.confidence, b.confidence)
            assert a.timestamp_us == b.timestamp_us

    def test_non_increasing_timestamps(self):
        text = encode_gt_csv([0, 10], np.zeros((2, 13, 2))).replace("\n10,", "\n0,")
        with pytest.raises(FormatError, match="line 3"):
            decode_gt_csv(text)

    def test_empty_gt(self):
        ts, joints, _ = decode_gt_csv("# tonus-gt v1\n")
        assert len(ts) == 0 and joints.shape == (0, 13, 2)


class TestDatagrams:
    def test_sizes(self):
        assert POSE_DGRAM.size == 172 and ACTIVITY_DGRAM.size == 68

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**32))
    @settings(max_examples=100, deadline=None)
    def test_pose_round_trip(self, seq, t, seed):
        vals = np.random.default_rng(seed).normal(0, 100, (13, 3)).astype(np.float32)
        d = PoseDatagram(seq, t, vals)
        buf = d.encode()
        back = PoseDatagram.decode(buf)
        assert len(buf) == 172 and back.sequence == seq and back.timestamp_us == t
        assert back.values.tobytes() == vals.tobytes() and back.encode() == buf

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**32))
    @settings(max_examples=100, deadline=None)
    def test_activity_round_trip(self, seq, t, seed):
        vals = np.random.default_rng(seed).random(13).astype(np.float32)
        buf = ActivityDatagram(seq, t, vals).encode()
        back = ActivityDatagram.decode(buf)
        assert back.values.tobytes() == vals.tobytes() and back.encode() == buf

    def test_pose_from_pose_exact_in_f32(self):
        xy = np.random.default_rng(0).uniform(0, 160, (13, 2)).astype(np.float32).astype(np.float64)
        p = PoseDatagram.decode(PoseDatagram.from_pose(Pose(xy, timestamp_us=7), 3).encode()).to_pose()
        assert np.array_equal(p.xy, xy) and p.timestamp_us == 7

    def test_zero_heatmaps_zero_activity(self):
        d = ActivityDatagram.from_maps(HeadMaps(np.zeros((13, 40, 40))), 0, 0)
        assert not ActivityDatagram.decode(d.encode()).values.any()

    def test_bad_length_and_magic(self):
        with pytest.raises(FormatError):
            PoseDatagram.decode(b"\x00" * 171)
        with pytest.raises(FormatError):
            ActivityDatagram.decode(b"XXXX" + b"\x00" * 64)
