"""Per-joint constant-velocity Kalman filtering of decoded poses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NUM_JOINTS
from .posedecode import Pose

H_OBS = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


@dataclass
class KalmanConfig:
    """Noise variances (pixels, pixels per step) and the nominal step length."""

    process_noise_pos: float = 1.0
    process_noise_vel: float = 10.0
    measurement_noise: float = 4.0
    dt_us: int = 10_000
    init_variance: float = 100.0

    def __post_init__(self):
        if min(self.process_noise_pos, self.process_noise_vel, self.measurement_noise,
               self.init_variance) <= 0:
            raise ValueError("Kalman noise variances must be > 0")
        if self.dt_us <= 0:
            raise ValueError("dt_us must be > 0")


@dataclass
class KalmanJointState:
    mean: np.ndarray  # (x, y, vx, vy)
    cov: np.ndarray  # 4 x 4

    @classmethod
    def initial(cls, xy, cfg):
        return cls(np.array([xy[0], xy[1], 0.0, 0.0]), np.eye(4) * cfg.init_variance)


def transition(dt):
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


def process_noise(dt, cfg):
    return np.diag([cfg.process_noise_pos, cfg.process_noise_pos,
                    cfg.process_noise_vel, cfg.process_noise_vel]) * dt


def _symmetrize(p):
    return 0.5 * (p + p.T)


def predict(state, dt, cfg):
    """Constant-velocity prediction over ``dt`` steps."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    f = transition(dt)
    return KalmanJointState(f @ state.mean, _symmetrize(f @ state.cov @ f.T + process_noise(dt, cfg)))


def update(state, measurement, cfg, measurement_noise=None):
    """Linear Kalman update with a position-only observation."""
    z = np.asarray(measurement, dtype=np.float64)
    if z.shape != (2,) or not np.isfinite(z).all():
        raise ValueError(f"measurement must be a finite (x, y) pair, got {measurement!r}")
    r = cfg.measurement_noise if measurement_noise is None else measurement_noise
    p = state.cov
    s = H_OBS @ p @ H_OBS.T + np.eye(2) * r
    k = np.linalg.solve(s, H_OBS @ p).T
    mean = state.mean + k @ (z - H_OBS @ state.mean)
    # Joseph form keeps the covariance positive definite
    i_kh = np.eye(4) - k @ H_OBS
    cov = i_kh @ p @ i_kh.T + k @ (np.eye(2) * r) @ k.T
    return KalmanJointState(mean, _symmetrize(cov))


class PoseTracker:
    """Stateful tracker for one pose stream."""

    def __init__(self, cfg=None):
        self.cfg = cfg or KalmanConfig()
        self.states = [None] * NUM_JOINTS
        self.last_t = None

    def step(self, pose):
        t = int(pose.timestamp_us)
        if self.last_t is not None and t <= self.last_t:
            raise ValueError(f"timestamps must increase strictly ({t} after {self.last_t})")
        dt = None if self.last_t is None else (t - self.last_t) / self.cfg.dt_us
        self.last_t = t
        xy = pose.xy.copy()
        for j in range(NUM_JOINTS):
            st = self.states[j]
            if st is None:
                if pose.visible[j]:
                    self.states[j] = KalmanJointState.initial(pose.xy[j], self.cfg)
                continue
            st = predict(st, dt, self.cfg)
            if pose.visible[j]:
                st = update(st, pose.xy[j], self.cfg)
            self.states[j] = st
            xy[j] = st.mean[:2]
        return Pose(xy, pose.confidence.copy(), pose.visible.copy(), t)


def track(poses, cfg=None):
    """Smooth a time-ordered pose sequence."""
    tracker = PoseTracker(cfg)
    return [tracker.step(p) for p in poses]
