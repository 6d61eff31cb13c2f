"""Event, ground-truth, pose-stream and datagram encodings.

All binary layouts are little-endian. EVT-BIN is a 9-byte header
(``TNUS``, u8 version, u16 width, u16 height) followed by 16-byte records
(u64 t, u16 x, u16 y, u8 p, 3 zero bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EVENT_DTYPE, EventOrderError, EventRangeError, EventStream
from .network import NUM_JOINTS
from .posedecode import Pose


class FormatError(ValueError):
    """Malformed file or datagram."""


# -- events ------------------------------------------------------------------

CSV_MAGIC = "# tonus-evt v1"
BIN_MAGIC = b"TNUS"
BIN_VERSION = 1
BIN_HEADER = struct.Struct("<4sBHH")
BIN_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")])


def _check_events(ev, width, height, where):
    if len(ev) == 0:
        return
    bad = (ev["x"] >= width) | (ev["y"] >= height) | (ev["p"] > 1)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventRangeError(f"{where(i)}: event ({ev['x'][i]}, {ev['y'][i]}, p={ev['p'][i]}) "
                              f"outside {width}x{height} sensor")
    back = np.diff(ev["t"].astype(np.int64)) < 0
    if back.any():
        i = int(np.argmax(back)) + 1
        raise EventOrderError(f"{where(i)}: timestamp {ev['t'][i]} precedes {ev['t'][i - 1]}")


def encode_events_csv(stream):
    ev = stream.events
    lines = [f"{CSV_MAGIC} {stream.width} {stream.height}"]
    lines += [f"{t},{x},{y},{p}" for t, x, y, p in zip(ev["t"].tolist(), ev["x"].tolist(),
                                                       ev["y"].tolist(), ev["p"].tolist())]
    return "\n".join(lines) + "\n"


def decode_events_csv(text):
    lines = text.splitlines()
    if not lines:
        raise FormatError("line 1: missing header")
    head = lines[0].split()
    if " ".join(head[:3]) != CSV_MAGIC or len(head) != 5:
        raise FormatError(f"line 1: expected '{CSV_MAGIC} <width> <height>', got {lines[0]!r}")
    try:
        width, height = int(head[3]), int(head[4])
    except ValueError:
        raise FormatError(f"line 1: bad sensor size in {lines[0]!r}") from None
    rows, line_no = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
            if min(t, x, y, p) < 0:
                raise ValueError
        except ValueError:
            raise FormatError(f"line {n}: malformed record {line!r}") from None
        rows.append((t, x, y, p))
        line_no.append(n)
    ev = np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, EVENT_DTYPE)
    _check_events(ev, width, height, lambda i: f"line {line_no[i]}")
    return EventStream(ev, width, height)


def encode_events_bin(stream):
    ev = stream.events
    rec = np.zeros(len(ev), dtype=BIN_RECORD)
    for k in ("t", "x", "y", "p"):
        rec[k] = ev[k]
    return BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, stream.width, stream.height) + rec.tobytes()


def decode_events_bin(buf):
    buf = bytes(buf)
    if len(buf) < BIN_HEADER.size:
        raise FormatError("offset 0: truncated header")
    magic, version, width, height = BIN_HEADER.unpack_from(buf)
    if magic != BIN_MAGIC:
        raise FormatError(f"offset 0: bad magic {magic!r}")
    if version != BIN_VERSION:
        raise FormatError(f"offset 4: unsupported version {version}")
    body = len(buf) - BIN_HEADER.size
    if body % BIN_RECORD.itemsize:
        off = BIN_HEADER.size + body // BIN_RECORD.itemsize * BIN_RECORD.itemsize
        raise FormatError(f"offset {off}: truncated record")
    rec = np.frombuffer(buf, dtype=BIN_RECORD, offset=BIN_HEADER.size)
    pad = np.frombuffer(buf, np.uint8, offset=BIN_HEADER.size).reshape(-1, BIN_RECORD.itemsize)[:, 13:]
    if pad.any():
        i = int(np.argmax(pad.any(axis=1)))
        raise FormatError(f"offset {BIN_HEADER.size + i * BIN_RECORD.itemsize}: nonzero padding")
    ev = np.zeros(len(rec), dtype=EVENT_DTYPE)
    for k in ("t", "x", "y", "p"):
        ev[k] = rec[k]
    _check_events(ev, width, height,
                  lambda i: f"offset {BIN_HEADER.size + i * BIN_RECORD.itemsize}")
    return EventStream(ev, width, height)


def read_events(path):
    """Load EVT-BIN or EVT-CSV, detected by magic bytes."""
    data = Path(path).read_bytes()
    if data[:4] == BIN_MAGIC:
        return decode_events_bin(data)
    if data.startswith(CSV_MAGIC.encode()):
        return decode_events_csv(data.decode("ascii"))
    raise FormatError(f"{path}: neither EVT-BIN nor EVT-CSV")


def write_events(stream, path):
    """Write by extension: ``.csv`` / ``.txt`` as EVT-CSV, anything else EVT-BIN."""
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        path.write_text(encode_events_csv(stream))
    else:
        path.write_bytes(encode_events_bin(stream))


# -- ground truth and pose streams -------------------------------------------

GT_MAGIC = "# tonus-gt v1"
POSE_MAGIC = "# tonus-pose v1"


def encode_gt_csv(timestamps, joints, confidence=None):
    """Rows ``t_us,x0,y0,...,x12,y12`` (plus ``c0..c12`` for pose streams)."""
    joints = np.asarray(joints, dtype=np.float64).reshape(len(timestamps), NUM_JOINTS * 2)
    lines = [POSE_MAGIC if confidence is not None else GT_MAGIC]
    for i, t in enumerate(timestamps):
        vals = [repr(float(v)) for v in joints[i]]
        if confidence is not None:
            vals += [repr(float(v)) for v in confidence[i]]
        lines.append(",".join([str(int(t))] + vals))
    return "\n".join(lines) + "\n"


def decode_gt_csv(text):
    """Parse GT-CSV or a pose stream into ``(timestamps, joints (n,13,2), confidence | None)``."""
    lines = text.splitlines()
    if not lines or lines[0].strip() not in (GT_MAGIC, POSE_MAGIC):
        raise FormatError(f"line 1: expected '{GT_MAGIC}' or '{POSE_MAGIC}' header")
    with_conf = lines[0].strip() == POSE_MAGIC
    width = 1 + NUM_JOINTS * (3 if with_conf else 2)
    ts, rows = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != width:
                raise ValueError
            t = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(f"line {n}: expected {width} comma-separated fields") from None
        if ts and t <= ts[-1]:
            raise FormatError(f"line {n}: timestamp {t} not after {ts[-1]}")
        ts.append(t)
        rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    joints = arr[:, : 2 * NUM_JOINTS].reshape(-1, NUM_JOINTS, 2)
    conf = arr[:, 2 * NUM_JOINTS :] if with_conf else None
    return np.array(ts, dtype=np.int64), joints, conf


def read_gt(path):
    return decode_gt_csv(Path(path).read_text())


def write_gt(path, timestamps, joints):
    Path(path).write_text(encode_gt_csv(timestamps, joints))


def write_pose_stream(path, poses):
    ts = [p.timestamp_us for p in poses]
    Path(path).write_text(encode_gt_csv(ts, [p.xy for p in poses], [p.confidence for p in poses]))


def read_pose_stream(path):
    ts, joints, conf = read_gt(path)
    if conf is None:
        conf = np.ones((len(ts), NUM_JOINTS))
    return [Pose(j, c, None, int(t)) for t, j, c in zip(ts, joints, conf)]


# -- datagrams ---------------------------------------------------------------

POSE_DGRAM = struct.Struct("<4sIQ" + "f" * (3 * NUM_JOINTS))
ACTIVITY_DGRAM = struct.Struct("<4sIQ" + "f" * NUM_JOINTS)
POSE_DGRAM_MAGIC = b"TNP1"
ACTIVITY_DGRAM_MAGIC = b"TNA1"


@dataclass
class PoseDatagram:
    sequence: int
    timestamp_us: int
    values: np.ndarray  # (13, 3): x, y, confidence as float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(NUM_JOINTS, 3)

    @classmethod
    def from_pose(cls, pose, sequence):
        return cls(sequence, int(pose.timestamp_us), np.column_stack([pose.xy, pose.confidence]))

    def to_pose(self):
        v = self.values.astype(np.float64)
        return Pose(v[:, :2], v[:, 2], None, self.timestamp_us)

    def encode(self):
        return POSE_DGRAM.pack(POSE_DGRAM_MAGIC, self.sequence, self.timestamp_us,
                               *self.values.reshape(-1).tolist())

    @classmethod
    def decode(cls, buf):
        if len(buf) != POSE_DGRAM.size:
            raise FormatError(f"pose datagram must be {POSE_DGRAM.size} bytes, got {len(buf)}")
        magic, seq, t, *vals = POSE_DGRAM.unpack(buf)
        if magic != POSE_DGRAM_MAGIC:
            raise FormatError(f"bad pose datagram magic {magic!r}")
        return cls(seq, t, np.array(vals, dtype=np.float32))


@dataclass
class ActivityDatagram:
    sequence: int
    timestamp_us: int
    values: np.ndarray  # (13,) heatmap peaks in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(NUM_JOINTS)
        self.values = np.clip(np.nan_to_num(v, nan=0.0), 0.0, 1.0)

    @classmethod
    def from_maps(cls, maps, sequence, timestamp_us):
        heat = np.asarray(maps.heatmap)
        return cls(sequence, int(timestamp_us), heat.reshape(NUM_JOINTS, -1).max(axis=1))

    def encode(self):
        return ACTIVITY_DGRAM.pack(ACTIVITY_DGRAM_MAGIC, self.sequence, self.timestamp_us,
                                   *self.values.tolist())

    @classmethod
    def decode(cls, buf):
        if len(buf) != ACTIVITY_DGRAM.size:
            raise FormatError(f"activity datagram must be {ACTIVITY_DGRAM.size} bytes, got {len(buf)}")
        magic, seq, t, *vals = ACTIVITY_DGRAM.unpack(buf)
        if magic != ACTIVITY_DGRAM_MAGIC:
            raise FormatError(f"bad activity datagram magic {magic!r}")
        return cls(seq, t, np.array(vals, dtype=np.float32))
