"""Camera trajectories that follow the walls, depth compositing of furniture
over layout renders, and the UV-to-sphere transform."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ParameterError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraWaypoint:
    camera: tuple
    target: tuple
    up: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        for name in ("camera", "target", "up"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.camera == self.target:
            raise ParameterError("camera and target coincide")

    @property
    def ray(self):
        return np.subtract(self.target, self.camera)

    def to_dict(self):
        return {"camera": list(self.camera), "target": list(self.target), "up": list(self.up)}


@dataclass(frozen=True)
class ZigzagParams:
    margin: float = 0.3
    h_min: float = 1.0
    h_max: float = 2.0
    d_min: float = 1.0
    period: float | None = None  # advance along the long axis per waypoint; default short side / 3
    offset_frac: float = 0.25  # target's along-wall lead, as a fraction of the usable width
    max_angle_deg: float = 60.0


def _walls(bounds):
    x0, y0, x1, y1 = bounds
    # (distance function, inward normal)
    return [
        (lambda p: p[0] - x0, (1.0, 0.0, 0.0)),
        (lambda p: x1 - p[0], (-1.0, 0.0, 0.0)),
        (lambda p: p[1] - y0, (0.0, 1.0, 0.0)),
        (lambda p: y1 - p[1], (0.0, -1.0, 0.0)),
    ]


def view_angle_to_wall(wp, bounds):
    """Degrees between the view ray and the normal of the wall nearest the target.

    When the target is equidistant from two walls (a corner) the smaller angle counts.
    """
    walls = [(f(wp.target), n) for f, n in _walls(bounds)]
    near = min(d for d, _ in walls)
    ray = wp.ray
    norm = float(np.linalg.norm(ray))
    best = 90.0
    for d, n in walls:
        if d <= near + 1e-9:
            c = abs(float(np.dot(ray, n))) / norm
            best = min(best, math.degrees(math.acos(min(1.0, c))))
    return best


def _triangle(u, a, b):
    """Reflect u back and forth inside [a, b]."""
    span = b - a
    if span <= 0:
        return a
    r = math.fmod(u, 2 * span)
    return a + (r if r <= span else 2 * span - r)


def check_trajectory(waypoints, bounds, params):
    """Names of violated properties: opposite motion, minimum distance, view angle."""
    bad = []
    for i, wp in enumerate(waypoints):
        if np.linalg.norm(wp.ray) < params.d_min - 1e-12:
            bad.append(f"distance<d_min at waypoint {i}")
        if view_angle_to_wall(wp, bounds) > params.max_angle_deg + 1e-9:
            bad.append(f"view angle>{params.max_angle_deg:g} deg at waypoint {i}")
    for i in range(1, len(waypoints)):
        dc = np.subtract(waypoints[i].camera, waypoints[i - 1].camera)[:2]
        dt = np.subtract(waypoints[i].target, waypoints[i - 1].target)[:2]
        if float(dc @ dt) >= 0:
            bad.append(f"camera/target not moving oppositely at step {i}")
    return bad


def zigzag_trajectory(bounds, n_waypoints, params=None):
    """Wall-following zigzag: the camera hops between the two long walls while the
    target sits on the wall opposite, so their lateral motions always oppose.

    Along the long axis the camera advances ``period`` per waypoint on a
    triangle wave and the target leads or trails it by an alternating offset.
    Target height sweeps h_min -> h_max and the camera height is
    h_min + h_max - target height.
    """
    params = params or ZigzagParams()
    if n_waypoints < 2:
        raise ParameterError("n_waypoints must be >= 2")
    if not 0 <= params.h_min <= params.h_max:
        raise ParameterError("need 0 <= h_min <= h_max")
    x0, y0, x1, y1 = (float(v) for v in bounds)
    long_x = (x1 - x0) >= (y1 - y0)
    # work in (a, b) = (along long walls, across room) coordinates
    a0, a1, b0, b1 = (x0, x1, y0, y1) if long_x else (y0, y1, x0, x1)
    m = params.margin
    width = (b1 - b0) - 2 * m
    if width <= 0:
        raise ParameterError(f"margin {m} leaves no room between the long walls")
    if width < params.d_min:
        raise ParameterError(f"d_min={params.d_min} unattainable: usable width {width:.3f} m")
    delta = params.offset_frac * width
    period = params.period if params.period is not None else (b1 - b0) / 3.0
    lo, hi = a0 + m + delta, a1 - m - delta
    if lo > hi:
        lo = hi = 0.5 * (a0 + a1)
        delta = min(delta, 0.5 * (a1 - a0) - m)
    out = []
    for i in range(n_waypoints):
        frac = i / (n_waypoints - 1)
        th = params.h_min + (params.h_max - params.h_min) * frac
        ch = params.h_min + params.h_max - th
        ca = _triangle(i * period, lo, hi)
        side = i % 2
        cb = b0 + m if side == 0 else b1 - m
        tb = b1 - m if side == 0 else b0 + m
        ta = ca + (delta if side == 0 else -delta)
        cam = (ca, cb) if long_x else (cb, ca)
        tgt = (ta, tb) if long_x else (tb, ta)
        out.append(CameraWaypoint((cam[0], cam[1], ch), (tgt[0], tgt[1], th)))
    bad = check_trajectory(out, (x0, y0, x1, y1), params)
    if bad:
        raise ParameterError("trajectory constraint violated: " + "; ".join(bad[:3]))
    return out


def center_rotation_trajectory(bounds, n_waypoints, params=None):
    """Baseline: camera fixed at the room centre, target swept around the walls."""
    params = params or ZigzagParams()
    x0, y0, x1, y1 = (float(v) for v in bounds)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    hx, hy = 0.5 * (x1 - x0) - params.margin, 0.5 * (y1 - y0) - params.margin
    h = 0.5 * (params.h_min + params.h_max)
    out = []
    for i in range(n_waypoints):
        ang = 2 * math.pi * i / n_waypoints
        dx, dy = math.cos(ang), math.sin(ang)
        scale = min(hx / abs(dx) if abs(dx) > 1e-12 else math.inf, hy / abs(dy) if abs(dy) > 1e-12 else math.inf)
        out.append(CameraWaypoint((cx, cy, h), (cx + scale * dx, cy + scale * dy, h)))
    return out


def trajectory_to_json(waypoints):
    return json.dumps([w.to_dict() for w in waypoints], indent=2) + "\n"


# ------------------------------------------------------------ compositing


@dataclass
class DepthBuffers:
    color_f: np.ndarray
    depth_f: np.ndarray
    color_l: np.ndarray
    depth_l: np.ndarray

    def __post_init__(self):
        self.color_f = np.asarray(self.color_f)
        self.color_l = np.asarray(self.color_l)
        self.depth_f = np.asarray(self.depth_f)
        self.depth_l = np.asarray(self.depth_l)
        if self.color_f.ndim != 3 or self.color_f.shape != self.color_l.shape:
            raise ParameterError("color buffers must share an (h, w, c) shape")
        hw = self.color_f.shape[:2]
        if self.depth_f.shape != hw or self.depth_l.shape != hw:
            raise ParameterError(f"depth buffers must be {hw}, got {self.depth_f.shape} and {self.depth_l.shape}")
        if np.any(self.depth_f < 0) or np.any(self.depth_l < 0):
            raise ParameterError("depths must be non-negative")

    @property
    def resolution(self):
        h, w = self.color_f.shape[:2]
        return w, h


def composite(b):
    """Per pixel, furniture where D_f <= D_l, layout elsewhere."""
    dtype = np.result_type(b.color_f, b.color_l)
    return kernels.composite(
        np.ascontiguousarray(b.color_f, dtype=dtype), np.ascontiguousarray(b.depth_f),
        np.ascontiguousarray(b.color_l, dtype=dtype), np.ascontiguousarray(b.depth_l),
    )


# Raw buffer files: row-major, 5 float32 per pixel (R, G, B, A, depth), no header.


def write_raw(path, color, depth):
    color = np.asarray(color, dtype=np.float32)
    depth = np.asarray(depth, dtype=np.float32)
    if color.ndim != 3 or color.shape[2] != 4 or depth.shape != color.shape[:2]:
        raise ParameterError("raw buffers need RGBA (h, w, 4) color and (h, w) depth")
    np.concatenate([color, depth[..., None]], axis=2).astype("<f4").tofile(path)


def read_raw(path, width, height):
    data = np.fromfile(Path(path), dtype="<f4")
    if data.size != width * height * 5:
        raise ParameterError(f"{path}: expected {width * height * 5} floats, found {data.size}")
    data = data.reshape(height, width, 5).astype(np.float32)
    return data[..., :4], data[..., 4]


# ------------------------------------------------------------ UV sphere


def uv_to_sphere(u, v):
    """theta = 2 pi u, phi = pi v -> (sin phi cos theta, sin phi sin theta, cos phi)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
        warnings.warn("uv outside [0, 1]; clamping", RuntimeWarning, stacklevel=2)
        u = np.clip(u, 0.0, 1.0)
        v = np.clip(v, 0.0, 1.0)
    th = 2 * np.pi * u
    ph = np.pi * v
    out = np.stack([np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)], axis=-1)
    return out
