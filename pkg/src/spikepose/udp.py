"""Fire-and-forget UDP emitters for pose and joint-activity datagrams."""

from __future__ import annotations

import logging
import socket

from .formats import ActivityDatagram, PoseDatagram

logger = logging.getLogger(__name__)


def parse_endpoint(text):
    """``"host:port"`` -> ``(host, port)``."""
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    try:
        port = int(port)
    except ValueError:
        raise ValueError(f"bad port in endpoint {text!r}") from None
    if not 0 < port < 65536:
        raise ValueError(f"port out of range in endpoint {text!r}")
    return host, port


class DatagramEmitter:
    """Send one datagram per call; transport errors are counted, never raised.

    Each emitter owns a sequence counter that increases by one per send
    attempt, so receivers can detect drops.
    """

    def __init__(self, endpoint, sock=None):
        self.endpoint = parse_endpoint(endpoint) if isinstance(endpoint, str) else tuple(endpoint)
        self.sock = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sequence = 0
        self.sent = 0
        self.failures = 0
        self.last_error = None

    def send(self, payload):
        try:
            self.sock.sendto(payload, self.endpoint)
            self.sent += 1
            return True
        except OSError as exc:
            self.failures += 1
            self.last_error = exc
            logger.debug("datagram to %s failed: %s", self.endpoint, exc)
            return False

    def _next(self):
        seq = self.sequence
        self.sequence = (self.sequence + 1) & 0xFFFFFFFF
        return seq

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PoseEmitter(DatagramEmitter):
    def emit(self, pose):
        return self.send(PoseDatagram.from_pose(pose, self._next()).encode())


class ActivityEmitter(DatagramEmitter):
    def emit(self, maps, timestamp_us):
        return self.send(ActivityDatagram.from_maps(maps, self._next(), timestamp_us).encode())

    def emit_peaks(self, peaks, timestamp_us):
        """Send precomputed per-joint heatmap maxima."""
        return self.send(ActivityDatagram(self._next(), int(timestamp_us), peaks).encode())


def emit_pose(emitter, pose):
    return emitter.emit(pose)


def emit_activity(emitter, maps, timestamp_us=0):
    return emitter.emit(maps, timestamp_us)
