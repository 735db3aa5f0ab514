"""Gravity settling of bounding-box proxies.

Boxes drop straight down in order of their initial bottom height and rest on
the floor or on the highest already-settled top they overlap. A box whose
overlap with that top is below ``tau`` of its footprint is nudged sideways off
it and keeps falling.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, UnsupportedConfigurationError
from .layout import Violation, ViolationReport, overlap_volume

logger = logging.getLogger(__name__)

TOL = 1e-9
NUDGE_GAP = 1e-6
MAX_NUDGES = 16


@dataclass(frozen=True)
class RigidProxy:
    box: object  # SemanticBox
    movable: bool = True


@dataclass(frozen=True)
class Transform:
    name: str
    dt: tuple
    dyaw: float = 0.0

    def to_dict(self):
        return {"name": self.name, "dt": [float(v) for v in self.dt], "dyaw": float(self.dyaw)}


def transforms_to_json(transforms):
    return json.dumps([t.to_dict() for t in transforms], indent=2) + "\n"


def transforms_from_json(text):
    return [Transform(d["name"], tuple(float(v) for v in d["dt"]), float(d.get("dyaw", 0.0))) for d in json.loads(text)]


def xy_overlap(a, b):
    ex = min(a.hi[0], b.hi[0]) - max(a.lo[0], b.lo[0])
    ey = min(a.hi[1], b.hi[1]) - max(a.lo[1], b.lo[1])
    return max(ex, 0.0) * max(ey, 0.0)


def _bottom(b):
    return b.p[2] - b.s[2] / 2


def _top(b):
    return b.p[2] + b.s[2] / 2


def _landing(box, settled):
    """(rest height of the bottom face, supporting boxes at that height)."""
    below = [o for o in settled if xy_overlap(box, o) > 0 and _top(o) <= _bottom(box) + TOL]
    if not below:
        return 0.0, []
    h = max(_top(o) for o in below)
    return h, [o for o in below if _top(o) >= h - TOL]


def _collides(box, others):
    return any(overlap_volume(box, o) > TOL for o in others)


def _nudges(box, supports, room):
    """Sideways moves that take ``box`` off every box in ``supports``, shortest first."""
    lo = np.min([o.lo for o in supports], axis=0)
    hi = np.max([o.hi for o in supports], axis=0)
    moves = [
        (hi[0] - box.lo[0] + NUDGE_GAP, 0.0), (lo[0] - box.hi[0] - NUDGE_GAP, 0.0),
        (0.0, hi[1] - box.lo[1] + NUDGE_GAP), (0.0, lo[1] - box.hi[1] - NUDGE_GAP),
    ]
    moves.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d))
    out = []
    for dx, dy in moves:
        cand = box.moved(dx, dy)
        if room is not None:
            x0, y0, x1, y1 = room
            if cand.lo[0] < x0 - TOL or cand.lo[1] < y0 - TOL or cand.hi[0] > x1 + TOL or cand.hi[1] > y1 + TOL:
                continue
        out.append(cand)
    return out


def _weak(box, settled, tau):
    _, supports = _landing(box, settled)
    area = sum(xy_overlap(box, o) for o in supports)
    return supports if supports and area < tau * box.footprint - TOL else []


def _find_rest(box, settled, others, room, tau):
    """Shift ``box`` sideways until the surface it would land on carries >= tau of it.

    Nudges that lead straight to a sound landing win; otherwise the shortest
    collision-free nudge is taken and the search repeats from there.
    """
    cur, seen = box, {box.p}
    for _ in range(MAX_NUDGES):
        weak = _weak(cur, settled, tau)
        if not weak:
            return cur
        options = [c for c in _nudges(cur, weak, room) if not _collides(c, others) and c.p not in seen]
        if not options:
            break
        sound = [c for c in options if not _weak(c, settled, tau)]
        cur = (sound or options)[0]
        seen.add(cur.p)
    if _weak(cur, settled, tau):
        logger.warning("%s: no sideways escape from a weak support; resting on it", box.name)
    return cur


def _drop_to(box, z_bottom):
    return dataclasses.replace(box, p=(box.p[0], box.p[1], z_bottom + box.s[2] / 2))


def settle(proxies, room=None, gravity=(0.0, 0.0, -1.0), tau=0.3):
    """Per-box transforms that bring every movable proxy to rest."""
    if not 0 < tau <= 1:
        raise ParameterError("tau must lie in (0, 1]")
    g = np.asarray(gravity, dtype=float)
    if g.shape != (3,) or abs(np.linalg.norm(g) - 1.0) > 1e-9:
        raise ParameterError("gravity must be a unit 3-vector")
    names = [p.box.name for p in proxies]
    if len(set(names)) != len(names):
        raise ParameterError("proxy names must be unique")
    if not (abs(g[0]) < 1e-12 and abs(g[1]) < 1e-12 and g[2] < 0):
        return _settle_tilted(proxies, g)
    settled = [p.box for p in proxies if not p.movable]
    pending = [p.box for p in proxies if p.movable]
    final = {b.name: b for b in settled}
    for box in sorted(pending, key=lambda b: (_bottom(b), b.name)):
        others = settled + [b for b in pending if b.name not in final and b.name != box.name]
        cur = _find_rest(box, settled, others, room, tau)
        h, _ = _landing(cur, settled)
        if _bottom(cur) - h > TOL:
            cur = _drop_to(cur, h)
        settled.append(cur)
        final[cur.name] = cur
    out = []
    for p in proxies:
        b0, b1 = p.box, final[p.box.name]
        out.append(Transform(b0.name, tuple(float(v) for v in np.subtract(b1.p, b0.p))))
    return out


def _settle_tilted(proxies, g):
    movable = [p for p in proxies if p.movable]
    if len(proxies) != 1 or len(movable) != 1:
        raise UnsupportedConfigurationError(
            "non-vertical gravity is only supported for a single box on the floor plane")
    if g[2] >= 0:
        raise UnsupportedConfigurationError("gravity has no downward component")
    b = movable[0].box
    dist = _bottom(b) / -g[2]
    return [Transform(b.name, tuple(float(v) for v in g * dist))]


def apply_transforms(boxes, transforms):
    by_name = {t.name: t for t in transforms}
    out = []
    for b in boxes:
        t = by_name.get(b.name)
        out.append(b if t is None else b.moved(*t.dt))
    return out


def interpenetration_check(boxes, transforms=None, eps=TOL):
    boxes = sorted(apply_transforms(boxes, transforms) if transforms else list(boxes), key=lambda b: b.name)
    viol = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            v = overlap_volume(boxes[i], boxes[j])
            if v > eps:
                viol.append(Violation("overlap", (boxes[i].name, boxes[j].name), v))
        if _bottom(boxes[i]) < -eps:
            viol.append(Violation("out_of_bounds", (boxes[i].name,), -_bottom(boxes[i])))
    viol.sort(key=lambda v: (v.kind, v.subjects))
    return ViolationReport(viol)


def support_ok(box, others, tau=0.3, tol=TOL):
    """Bottom on the floor, or on tops (within tol) covering >= tau of the footprint."""
    z = _bottom(box)
    if abs(z) <= tol:
        return True
    area = sum(xy_overlap(box, o) for o in others if o.name != box.name and abs(_top(o) - z) <= tol)
    return area >= tau * box.footprint - tol


def proxies_from_layout(h, static=()):
    return [RigidProxy(b, b.name not in set(static)) for b in h.boxes()]


def center_heights(boxes):
    return {b.name: b.p[2] for b in boxes}


def total_drop(transforms):
    return float(sum(-t.dt[2] for t in transforms if math.isfinite(t.dt[2])))
