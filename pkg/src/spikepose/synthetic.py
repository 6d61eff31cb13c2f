"""Seeded synthetic scenes: an animated 13-joint stick figure seen by an idealised event sensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream
from .network import NUM_JOINTS
from .posedecode import SKELETON

# standing figure facing the camera, in fractions of sensor width / height
BASE_POSE = np.array([
    [0.50, 0.12],
    [0.38, 0.25], [0.62, 0.25],
    [0.32, 0.42], [0.68, 0.42],
    [0.30, 0.57], [0.70, 0.57],
    [0.43, 0.55], [0.57, 0.55],
    [0.42, 0.74], [0.58, 0.74],
    [0.41, 0.92], [0.59, 0.92],
])

# per-joint motion amplitude, in fractions of sensor size
DEFAULT_AMPLITUDE = np.array([
    [0.02, 0.01],
    [0.02, 0.01], [0.02, 0.01],
    [0.08, 0.06], [0.08, 0.06],
    [0.14, 0.12], [0.14, 0.12],
    [0.02, 0.01], [0.02, 0.01],
    [0.04, 0.03], [0.04, 0.03],
    [0.05, 0.03], [0.05, 0.03],
])

GT_PERIOD_US = 10_000


@dataclass
class SyntheticSceneConfig:
    """Stick-figure animation and event sampling parameters.

    Joint ``j`` follows ``base + amplitude * sin(2 pi f t + phase)`` per axis
    (pixels). ``edge_event_rate`` is the expected number of events per pixel
    of area swept by a limb; ``noise_rate`` is background events per second
    over the whole sensor.
    """

    width: int = 160
    height: int = 160
    duration_us: int = 1_000_000
    seed: int = 0
    edge_event_rate: float = 1.5
    noise_rate: float = 2000.0
    limb_thickness: float = 2.0
    substep_us: int = 250
    base: np.ndarray = None
    amplitude: np.ndarray = None
    frequency: np.ndarray = None
    phase: np.ndarray = None

    def __post_init__(self):
        scale = np.array([self.width, self.height], dtype=np.float64)
        if self.base is None:
            self.base = BASE_POSE * scale
        if self.amplitude is None:
            self.amplitude = DEFAULT_AMPLITUDE * scale
        if self.frequency is None:
            self.frequency = np.linspace(0.8, 1.6, NUM_JOINTS)
        if self.phase is None:
            self.phase = np.outer(np.arange(NUM_JOINTS) * 0.7, [1.0, 1.0]) + np.array([0.0, np.pi / 2])
        self.base = np.asarray(self.base, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.amplitude = np.asarray(self.amplitude, dtype=np.float64).reshape(NUM_JOINTS, 2)
        self.frequency = np.asarray(self.frequency, dtype=np.float64).reshape(NUM_JOINTS)
        self.phase = np.asarray(self.phase, dtype=np.float64).reshape(NUM_JOINTS, 2)
        if self.edge_event_rate < 0 or self.noise_rate < 0:
            raise ValueError("event rates must be >= 0")
        if self.duration_us <= 0 or self.substep_us <= 0:
            raise ValueError("durations must be > 0")

    def joints_at(self, t_us):
        """Joint positions (..., 13, 2) at time(s) ``t_us``."""
        t = np.asarray(t_us, dtype=np.float64)[..., None, None] * 1e-6
        arg = 2 * np.pi * self.frequency[:, None] * t + self.phase
        xy = self.base + self.amplitude * np.sin(arg)
        upper = np.array([self.width - 1e-6, self.height - 1e-6])
        return np.clip(xy, 0.0, upper)


def ground_truth(scene):
    """Joint positions at 100 Hz: ``(timestamps_us, xy (n, 13, 2))``."""
    ts = np.arange(0, scene.duration_us + 1, GT_PERIOD_US, dtype=np.int64)
    return ts, scene.joints_at(ts)


def generate_synthetic(scene):
    """Render ``scene`` into ``(EventStream, timestamps_us, joints)``.

    Events are sampled along moving limbs in proportion to the area each
    limb segment sweeps; the leading side of a limb emits ON events and the
    trailing side OFF events. Background noise is uniform Poisson.
    """
    rng = np.random.default_rng(scene.seed)
    a_idx = np.array([a for a, _ in SKELETON])
    b_idx = np.array([b for _, b in SKELETON])
    ts, xs, ys, ps = [], [], [], []
    dt = scene.substep_us
    steps = np.arange(0, scene.duration_us, dt, dtype=np.int64)
    chunk = 512
    for c0 in range(0, len(steps) if scene.edge_event_rate > 0 else 0, chunk):
        t0 = steps[c0 : c0 + chunk]
        span = np.minimum(dt, scene.duration_us - t0).astype(np.float64)
        j0 = scene.joints_at(t0)
        vel = (scene.joints_at(t0 + span.astype(np.int64)) - j0) / span[:, None, None]  # px / us
        pa, pb = j0[:, a_idx], j0[:, b_idx]  # (S, L, 2)
        seg = pb - pa
        length = np.linalg.norm(seg, axis=-1)
        n = max(2, int(np.ceil(length.max())))
        s = (np.arange(n) + 0.5) / n  # sample points along each limb
        pts = pa[:, :, None] + s[:, None] * seg[:, :, None]  # (S, L, n, 2)
        v = ((1 - s)[:, None] * vel[:, a_idx, None] + s[:, None] * vel[:, b_idx, None])
        normal = np.stack([-seg[..., 1], seg[..., 0]], -1) / np.maximum(length, 1e-9)[..., None]
        v_perp = np.einsum("slnk,slk->sln", v, normal)
        swept = (length / n)[..., None] * np.abs(v_perp) * span[:, None, None]
        counts = rng.poisson(scene.edge_event_rate * swept).ravel()
        total = int(counts.sum())
        if total == 0:
            continue
        idx = np.repeat(np.arange(counts.size), counts)
        si, li, _ = np.unravel_index(idx, swept.shape)
        frac = rng.random(total) * span[si]
        lead = rng.random(total) < 0.5
        side = np.where(lead, 1.0, -1.0) * np.sign(v_perp.ravel()[idx])
        pos = (pts.reshape(-1, 2)[idx] + v.reshape(-1, 2)[idx] * frac[:, None]
               + (side * scene.limb_thickness / 2)[:, None] * normal[si, li]
               + rng.uniform(-0.5, 0.5, (total, 2)))
        ts.append(t0[si] + frac.astype(np.int64))
        xs.append(pos[:, 0])
        ys.append(pos[:, 1])
        ps.append(lead.astype(np.uint8))
    n_noise = rng.poisson(scene.noise_rate * scene.duration_us * 1e-6)
    if n_noise:
        ts.append(rng.integers(0, scene.duration_us, n_noise))
        xs.append(rng.uniform(0, scene.width, n_noise))
        ys.append(rng.uniform(0, scene.height, n_noise))
        ps.append(rng.integers(0, 2, n_noise).astype(np.uint8))
    if ts:
        t = np.concatenate(ts)
        x = np.floor(np.concatenate(xs))
        y = np.floor(np.concatenate(ys))
        p = np.concatenate(ps)
        keep = (x >= 0) & (x < scene.width) & (y >= 0) & (y < scene.height)
        t, x, y, p = t[keep], x[keep], y[keep], p[keep]
        order = np.argsort(t, kind="stable")
        stream = EventStream.from_arrays(t[order], x[order], y[order], p[order],
                                         scene.width, scene.height)
    else:
        stream = EventStream.empty(scene.width, scene.height)
    gt_t, gt_xy = ground_truth(scene)
    return stream, gt_t, gt_xy
