"""Conversion between 13-joint poses and multihead output maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import HEAD_CHANNELS, HeadMaps, NUM_JOINTS

JOINT_NAMES = (
    "head",
    "shoulder_right", "shoulder_left",
    "elbow_right", "elbow_left",
    "hand_right", "hand_left",
    "hip_right", "hip_left",
    "knee_right", "knee_left",
    "foot_right", "foot_left",
)
JOINT_LABELS = ("hd", "sR", "sL", "eR", "eL", "wR", "wL", "hR", "hL", "kR", "kL", "fR", "fL")
SKELETON = (
    (0, 1), (0, 2), (1, 2),
    (1, 3), (3, 5), (2, 4), (4, 6),
    (1, 7), (2, 8), (7, 8),
    (7, 9), (9, 11), (8, 10), (10, 12),
)


@dataclass
class Pose:
    """13 joints in model-resolution pixels.

    ``xy`` is (13, 2) with columns (x, y); ``confidence`` and ``visible`` are
    per joint.
    """

    xy: np.ndarray
    confidence: np.ndarray = None
    visible: np.ndarray = None
    timestamp_us: int = 0

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64)
        if self.xy.shape != (NUM_JOINTS, 2):
            raise ValueError(f"a pose has {NUM_JOINTS} (x, y) joints, got shape {self.xy.shape}")
        if self.confidence is None:
            self.confidence = np.ones(NUM_JOINTS)
        if self.visible is None:
            self.visible = np.ones(NUM_JOINTS, dtype=bool)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)


@dataclass
class DecodeConfig:
    tau: float = 0.1
    downsample_factor: int = 4

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")


@dataclass
class EncodeConfig:
    gaussian_sigma: float = 2.0
    map_size: int = 40
    downsample_factor: int = 4

    def __post_init__(self):
        if not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be > 0")


def _round_half_up(a):
    return np.floor(np.asarray(a) + 0.5).astype(np.int64)


def barycenter(joints, downsample_factor=4, visible=None):
    """Rounded mean of the downsampled visible joints, as integer ``(cx, cy)``."""
    xy = joints.xy if isinstance(joints, Pose) else np.asarray(joints, dtype=np.float64)
    if visible is None:
        visible = joints.visible if isinstance(joints, Pose) else np.ones(len(xy), bool)
    if not np.any(visible):
        raise ValueError("barycenter needs at least one visible joint")
    cells = np.floor(xy[visible] / downsample_factor)
    c = _round_half_up(cells.mean(axis=0))
    return int(c[0]), int(c[1])


def _gaussian(size, cx, cy, sigma):
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))


def encode_ground_truth(pose, cfg=None, heads=("heatmap", "center", "regression", "offset")):
    """Build training targets for one pose.

    Heatmaps hold unit-peak gaussians at each joint's cell; the center map
    holds one at the barycenter cell, where the regression and offset
    channels store the per-joint displacement and sub-cell residual.
    """
    cfg = cfg or EncodeConfig()
    m, f = cfg.map_size, cfg.downsample_factor
    xy = pose.xy
    vis = pose.visible
    if ((xy[vis] < 0) | (xy[vis] >= m * f)).any():
        raise ValueError(f"visible joints must lie within [0, {m * f})")
    cells = np.floor(xy / f).astype(np.int64)
    heat = np.zeros((NUM_JOINTS, m, m))
    for j in np.flatnonzero(vis):
        heat[j] = _gaussian(m, cells[j, 0], cells[j, 1], cfg.gaussian_sigma)
    out = {"heatmap": heat}
    if len(heads) > 1:
        cx, cy = barycenter(pose, f)
        out["center"] = _gaussian(m, cx, cy, cfg.gaussian_sigma)[None]
        reg = np.zeros((2 * NUM_JOINTS, m, m))
        off = np.zeros((2 * NUM_JOINTS, m, m))
        r = cells - np.array([cx, cy])
        o = xy - (np.array([cx, cy]) + r) * f
        r[~vis] = 0
        o[~vis] = 0
        reg[:, cy, cx] = r.reshape(-1)
        off[:, cy, cx] = o.reshape(-1)
        out["regression"], out["offset"] = reg, off
    return HeadMaps(**out)


def heatmap_candidates(heatmap, tau):
    """Boolean mask of heatmap cells at or above ``tau``."""
    return heatmap >= tau


def decode_pose(maps, cfg=None, timestamp_us=0):
    """Combine the four heads into joint coordinates.

    For each joint the heatmap is thresholded at ``tau`` and the surviving
    cell nearest the regression estimate ``C + R`` is refined by the offset.
    Joints without surviving cells fall back to the regression estimate and
    are flagged invisible. With heatmaps only, each joint is the heatmap peak.
    """
    cfg = cfg or DecodeConfig()
    f = cfg.downsample_factor
    heat = maps.heatmap
    m_h, m_w = heat.shape[-2:]
    xy = np.zeros((NUM_JOINTS, 2))
    conf = np.zeros(NUM_JOINTS)
    vis = np.zeros(NUM_JOINTS, bool)
    multi = maps.center is not None and maps.regression is not None
    if multi:
        ci = int(np.argmax(maps.center[0]))
        cy, cx = divmod(ci, m_w)
        reg = maps.regression[:, cy, cx].reshape(NUM_JOINTS, 2)
        off = (maps.offset[:, cy, cx] if maps.offset is not None else np.zeros(2 * NUM_JOINTS))
        off = off.reshape(NUM_JOINTS, 2)
        coarse = np.array([cx, cy], dtype=np.float64) + reg
    ys, xs = np.mgrid[0:m_h, 0:m_w]
    for j in range(NUM_JOINTS):
        h = heat[j]
        mask = heatmap_candidates(h, cfg.tau)
        if not multi:
            k = int(np.argmax(h))
            py, px = divmod(k, m_w)
            xy[j] = (px * f, py * f)
            conf[j] = h[py, px]
            vis[j] = conf[j] >= cfg.tau
            continue
        if mask.any():
            d2 = (xs - coarse[j, 0]) ** 2 + (ys - coarse[j, 1]) ** 2
            d2 = np.where(mask, d2, np.inf)
            # argmin over the flattened grid breaks ties row-major first
            k = int(np.argmin(d2))
            py, px = divmod(k, m_w)
            xy[j] = np.array([px, py]) * f + off[j]
            conf[j] = h[py, px]
            vis[j] = True
        else:
            xy[j] = coarse[j] * f + off[j]
            conf[j] = float(h.max())
    upper = np.array([np.nextafter(m_w * f, 0), np.nextafter(m_h * f, 0)])
    xy = np.clip(xy, 0.0, upper)
    return Pose(xy, conf, vis, timestamp_us)


def decode_batch(maps, cfg=None, timestamps=None):
    n = len(maps)
    ts = timestamps if timestamps is not None else [0] * n
    if not maps.batched:
        return [decode_pose(maps, cfg, ts[0])]
    return [decode_pose(maps.sample(i), cfg, int(ts[i])) for i in range(n)]
