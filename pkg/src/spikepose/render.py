"""Portable-pixmap overlays of events, heatmaps and decoded joints."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .events import EventStream
from .posedecode import JOINT_LABELS, SKELETON

BACKGROUND = (16, 16, 16)
ON_COLOR = (220, 220, 220)
OFF_COLOR = (80, 110, 200)
HEAT_COLOR = (255, 80, 0)
BONE_COLOR = (0, 200, 0)
JOINT_COLOR = (255, 230, 0)
HIDDEN_COLOR = (128, 128, 128)
TEXT_COLOR = (255, 255, 255)

# 3x5 glyphs for the joint label alphabet
_GLYPHS = {
    "h": "100100111101101",
    "d": "001001111101111",
    "s": "111100111001111",
    "e": "111101111100111",
    "w": "000101101111101",
    "k": "100101110101101",
    "f": "011100111100100",
    "R": "110101110101101",
    "L": "100100100100111",
}
GLYPHS = {c: np.array([int(b) for b in bits], dtype=bool).reshape(5, 3) for c, bits in _GLYPHS.items()}


def _event_planes(events, h, w):
    """Per-polarity event counts on the model grid, (2, h, w)."""
    if events is None:
        return np.zeros((2, h, w))
    if isinstance(events, EventStream):
        ev = events.events
        planes = np.zeros((2, h, w))
        np.add.at(planes, (ev["p"].astype(np.intp), ev["y"].astype(np.intp), ev["x"].astype(np.intp)), 1)
        return planes
    data = np.asarray(getattr(events, "data", events), dtype=np.float64)
    if data.ndim == 4:
        data = data.sum(axis=0)
    if data.shape != (2, h, w):
        raise ValueError(f"events of shape {data.shape} do not match a {h}x{w} image")
    return data


def _blend(img, mask, color, alpha=1.0):
    a = np.asarray(alpha, dtype=np.float64) * mask
    img[:] = img * (1 - a[..., None]) + np.asarray(color, dtype=np.float64) * a[..., None]


def _line(img, p0, p1, color):
    n = int(np.ceil(np.abs(np.subtract(p1, p0)).max())) + 1
    xs = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    ys = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def _box(img, cx, cy, r, color):
    y0, y1 = max(cy - r, 0), min(cy + r + 1, img.shape[0])
    x0, x1 = max(cx - r, 0), min(cx + r + 1, img.shape[1])
    if y0 < y1 and x0 < x1:
        img[y0:y1, x0:x1] = color


def _text(img, x, y, text, color, px=1):
    for i, ch in enumerate(text):
        g = np.kron(GLYPHS[ch], np.ones((px, px), dtype=bool))
        gx = x + i * 4 * px
        ys, xs = np.nonzero(g)
        ys, xs = ys + y, xs + gx
        ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
        img[ys[ok], xs[ok]] = color


def overlay_image(maps=None, pose=None, events=None, model_size=None, scale=2, downsample_factor=4):
    """Compose the overlay as a ``(H*scale, W*scale, 3)`` uint8 array.

    ``model_size`` is ``(height, width)``; when omitted it is taken from the
    event tensor, then from the heatmap size times ``downsample_factor``.
    """
    scale = int(scale)
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    if model_size is None:
        if isinstance(events, EventStream):
            model_size = (events.height, events.width)
        elif events is not None:
            model_size = np.shape(getattr(events, "data", events))[-2:]
        elif maps is not None:
            model_size = tuple(np.array(maps.heatmap.shape[-2:]) * downsample_factor)
        else:
            model_size = (160, 160)
    h, w = (int(v) for v in model_size)
    img = np.empty((h, w, 3))
    img[:] = BACKGROUND
    planes = _event_planes(events, h, w)
    _blend(img, planes[0] > 0, OFF_COLOR)
    _blend(img, planes[1] > 0, ON_COLOR)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    if maps is not None:
        heat = np.clip(np.asarray(maps.heatmap, dtype=np.float64), 0.0, 1.0).max(axis=0)
        fy, fx = img.shape[0] // heat.shape[0], img.shape[1] // heat.shape[1]
        heat = np.repeat(np.repeat(heat, fy, axis=0), fx, axis=1)
        full = np.zeros(img.shape[:2])
        full[: heat.shape[0], : heat.shape[1]] = heat[: img.shape[0], : img.shape[1]]
        _blend(img, np.ones(img.shape[:2]), HEAT_COLOR, 0.6 * full)
    img = np.rint(img).astype(np.uint8)
    if pose is not None:
        pts = np.floor(np.asarray(pose.xy) * scale + scale / 2).astype(int)
        vis = np.asarray(pose.visible, dtype=bool)
        for a, b in SKELETON:
            if vis[a] and vis[b]:
                _line(img, pts[a], pts[b], BONE_COLOR)
        r = max(1, scale // 2)
        px = max(1, scale // 2)
        for j, (x, y) in enumerate(pts):
            _box(img, x, y, r, JOINT_COLOR if vis[j] else HIDDEN_COLOR)
            _text(img, x + r + 1, y - 5 * px - r, JOINT_LABELS[j], TEXT_COLOR, px)
    return img


def encode_ppm(img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM images are (height, width, 3)")
    return f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(buf):
    """Parse the binary PPM written by :func:`encode_ppm`."""
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a binary 8-bit PPM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError("PPM pixel data has the wrong length")
    return data.reshape(h, w, 3)


def render_overlay(maps, pose, events, path, scale=2, model_size=None, downsample_factor=4):
    """Write the overlay to ``path`` as a binary PPM; returns the bytes written."""
    data = encode_ppm(overlay_image(maps, pose, events, model_size, scale, downsample_factor))
    Path(path).write_bytes(data)
    return data
