"""Layout programs: semantic boxes in rooms, conflict checks, the verify/refine
loop, group-wise orientation assignment and planar mesh export."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import kernels
from .errors import NameCollisionError, ParameterError, ParseError, RefinerError

logger = logging.getLogger(__name__)

EPS_OVERLAP = 1e-6
GROUP_RADIUS = 1.5
GRID_STEP = 0.1
SEPARATION_GAP = 1e-3
CARDINALS = (0.0, math.pi / 2, math.pi, -math.pi / 2)


def wrap_yaw(a):
    """Map an angle into (-pi, pi]."""
    a = math.remainder(float(a), 2 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass(frozen=True)
class SemanticBox:
    name: str
    cls: int
    p: tuple
    s: tuple
    group: str | None = None
    yaw: float | None = None

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        s = tuple(float(v) for v in self.s)
        if len(p) != 3 or len(s) != 3:
            raise ParameterError(f"box {self.name!r}: p and s need 3 components")
        if not all(math.isfinite(v) for v in p + s):
            raise ParameterError(f"box {self.name!r}: non-finite geometry")
        if min(s) <= 0:
            raise ParameterError(f"box {self.name!r}: sizes must be positive, got {s}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "s", s)
        if self.yaw is not None:
            object.__setattr__(self, "yaw", wrap_yaw(self.yaw))

    @property
    def lo(self):
        return np.subtract(self.p, np.multiply(self.s, 0.5))

    @property
    def hi(self):
        return np.add(self.p, np.multiply(self.s, 0.5))

    @property
    def volume(self):
        return self.s[0] * self.s[1] * self.s[2]

    @property
    def footprint(self):
        return self.s[0] * self.s[1]

    def moved(self, dx, dy, dz=0.0):
        return dataclasses.replace(self, p=(self.p[0] + dx, self.p[1] + dy, self.p[2] + dz))


@dataclass(frozen=True)
class Room:
    name: str
    bounds: tuple  # x0, y0, x1, y1
    height: float
    boxes: tuple = ()

    def __post_init__(self):
        b = tuple(float(v) for v in self.bounds)
        if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
            raise ParameterError(f"room {self.name!r}: bounds must be x0 < x1, y0 < y1")
        if not self.height > 0:
            raise ParameterError(f"room {self.name!r}: height must be positive")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "height", float(self.height))
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def center(self):
        x0, y0, x1, y1 = self.bounds
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class Door:
    segment: tuple  # x0, y0, x1, y1 on a wall line
    height: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "segment", tuple(float(v) for v in self.segment))
        object.__setattr__(self, "height", float(self.height))


@dataclass(frozen=True)
class HouseLayout:
    rooms: tuple
    relations: tuple = ()  # (subject, target) pairs
    doors: tuple = ()
    snap: bool = False

    def boxes(self):
        return [b for r in self.rooms for b in r.boxes]

    def box_room(self):
        return {b.name: r for r in self.rooms for b in r.boxes}

    def find(self, name):
        for r in self.rooms:
            for b in r.boxes:
                if b.name == name:
                    return b
        raise KeyError(name)

    def replace_box(self, box):
        rooms = []
        for r in self.rooms:
            boxes = tuple(box if b.name == box.name else b for b in r.boxes)
            rooms.append(dataclasses.replace(r, boxes=boxes))
        return dataclasses.replace(self, rooms=tuple(rooms))


# ---------------------------------------------------------------- parsing


def _req(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise ParseError(f"missing field {key!r}", path)
    return d[key]


def _floats(v, n, path):
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise ParseError(f"expected a list of {n} numbers", path)
    try:
        out = tuple(float(x) for x in v)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"non-numeric entry ({exc})", path) from exc
    if not all(math.isfinite(x) for x in out):
        raise ParseError("non-finite entry", path)
    return out


def parse_layout(doc):
    """Build a HouseLayout from a JSON string or an already-decoded dict."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("layout document must be an object")
    rooms_doc = _req(doc, "rooms", "")
    if not isinstance(rooms_doc, list) or not rooms_doc:
        raise ParseError("rooms must be a non-empty list", "rooms")
    seen = {}
    rooms = []
    for i, rd in enumerate(rooms_doc):
        rp = f"rooms[{i}]"
        name = str(_req(rd, "name", rp))
        bounds = _floats(_req(rd, "bounds", rp), 4, rp + ".bounds")
        height = rd.get("height", 2.5)
        boxes = []
        for j, bd in enumerate(rd.get("boxes", [])):
            bp = f"{rp}.boxes[{j}]"
            bname = str(_req(bd, "name", bp))
            if bname in seen:
                raise NameCollisionError(f"duplicate box name {bname!r} (first at {seen[bname]})", bp + ".name")
            seen[bname] = bp
            try:
                cls = int(_req(bd, "class", bp))
            except (TypeError, ValueError) as exc:
                raise ParseError("class must be an integer", bp + ".class") from exc
            p = _floats(_req(bd, "p", bp), 3, bp + ".p")
            s = _floats(_req(bd, "s", bp), 3, bp + ".s")
            if min(s) <= 0:
                raise ParseError(f"sizes must be positive, got {list(s)}", bp + ".s")
            yaw = bd.get("yaw")
            group = bd.get("group")
            boxes.append(SemanticBox(bname, cls, p, s, None if group is None else str(group),
                                     None if yaw is None else float(yaw)))
        try:
            rooms.append(Room(name, bounds, float(height), tuple(boxes)))
        except (ParameterError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), rp) from exc
    relations = []
    for k, rel in enumerate(doc.get("relations", [])):
        rp = f"relations[{k}]"
        relations.append((str(_req(rel, "subject", rp)), str(_req(rel, "target", rp))))
    doors = []
    for k, dd in enumerate(doc.get("doors", [])):
        dp = f"doors[{k}]"
        doors.append(Door(_floats(_req(dd, "segment", dp), 4, dp + ".segment"), float(dd.get("height", 2.0))))
    return HouseLayout(tuple(rooms), tuple(relations), tuple(doors), bool(doc.get("snap", False)))


def layout_to_dict(h):
    rooms = []
    for r in h.rooms:
        boxes = []
        for b in r.boxes:
            bd = {"name": b.name, "class": b.cls, "p": list(b.p), "s": list(b.s)}
            if b.group is not None:
                bd["group"] = b.group
            if b.yaw is not None:
                bd["yaw"] = b.yaw
            boxes.append(bd)
        rooms.append({"name": r.name, "bounds": list(r.bounds), "height": r.height, "boxes": boxes})
    doc = {"rooms": rooms, "relations": [{"subject": s, "target": t} for s, t in h.relations]}
    if h.doors:
        doc["doors"] = [{"segment": list(d.segment), "height": d.height} for d in h.doors]
    if h.snap:
        doc["snap"] = True
    return doc


def serialize_layout(h):
    return json.dumps(layout_to_dict(h), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------- validation


def overlap_volume(a, b):
    """Intersection volume of the axis-aligned boxes (yaw ignored)."""
    ext = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    return float(np.prod(np.clip(ext, 0.0, None)))


def protrusion(box, room):
    """Largest distance the box footprint sticks out past the room rectangle."""
    x0, y0, x1, y1 = room.bounds
    lo, hi = box.lo, box.hi
    return float(max(0.0, x0 - lo[0], y0 - lo[1], hi[0] - x1, hi[1] - y1))


@dataclass(frozen=True)
class Violation:
    kind: str
    subjects: tuple
    magnitude: float

    def to_dict(self):
        return {"kind": self.kind, "subjects": list(self.subjects), "magnitude": self.magnitude}


@dataclass
class ViolationReport:
    violations: list = field(default_factory=list)

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __bool__(self):
        return bool(self.violations)

    @property
    def total_overlap(self):
        return sum(v.magnitude for v in self.violations if v.kind == "overlap")

    @property
    def total_protrusion(self):
        return sum(v.magnitude for v in self.violations if v.kind == "out_of_bounds")

    def to_list(self):
        return [v.to_dict() for v in self.violations]

    def to_json(self):
        return json.dumps(self.to_list(), indent=2)

    @classmethod
    def from_list(cls, items):
        return cls([Violation(d["kind"], tuple(d["subjects"]), float(d["magnitude"])) for d in items])


def _box_arrays(boxes):
    lo = np.array([b.lo for b in boxes], dtype=float).reshape(-1, 3)
    hi = np.array([b.hi for b in boxes], dtype=float).reshape(-1, 3)
    return lo, hi


def validate(h, eps_overlap=EPS_OVERLAP):
    if eps_overlap < 0:
        raise ParameterError("eps_overlap must be >= 0")
    boxes = sorted(h.boxes(), key=lambda b: b.name)
    out = []
    if len(boxes) > 1:
        lo, hi = _box_arrays(boxes)
        ov = kernels.overlap_matrix(lo, hi)
        ia, ib = np.nonzero(np.triu(ov > eps_overlap, k=1))
        for a, b in zip(ia, ib):
            out.append(Violation("overlap", (boxes[a].name, boxes[b].name), float(ov[a, b])))
    rooms = h.box_room()
    for b in boxes:
        d = protrusion(b, rooms[b.name])
        if d > 0:
            out.append(Violation("out_of_bounds", (b.name,), d))
    out.sort(key=lambda v: (v.kind, v.subjects))
    return ViolationReport(out)


# --------------------------------------------------------- local refiner


def _clamp_into(box, room):
    x0, y0, x1, y1 = room.bounds
    p = list(box.p)
    for k, (a, b) in enumerate(((x0, x1), (y0, y1))):
        half = box.s[k] / 2
        if b - a < 2 * half:
            p[k] = 0.5 * (a + b)
        else:
            p[k] = min(max(p[k], a + half), b - half)
    return dataclasses.replace(box, p=tuple(p))


def _overlap_with_others(box, others_lo, others_hi):
    if others_lo.shape[0] == 0:
        return 0.0
    return float(kernels.overlap_against(box.lo, box.hi, others_lo, others_hi).sum())


def _free_slot(box, room, others_lo, others_hi, eps):
    """Nearest grid position (GRID_STEP lattice) where the box is in bounds and touches nothing."""
    x0, y0, x1, y1 = room.bounds
    hx, hy = box.s[0] / 2, box.s[1] / 2
    if x1 - x0 < 2 * hx or y1 - y0 < 2 * hy:
        return None
    xs = np.arange(x0 + hx, x1 - hx + 1e-12, GRID_STEP)
    ys = np.arange(y0 + hy, y1 - hy + 1e-12, GRID_STEP)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cand = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d = np.hypot(cand[:, 0] - box.p[0], cand[:, 1] - box.p[1])
    for k in np.lexsort((cand[:, 1], cand[:, 0], d)):
        trial = dataclasses.replace(box, p=(float(cand[k, 0]), float(cand[k, 1]), box.p[2]))
        if _overlap_with_others(trial, others_lo, others_hi) <= eps:
            return trial
    return None


def _relocate(box, anchor, room, others, eps):
    """Move ``box`` off ``anchor`` (and everything else) with the least xy motion."""
    others_lo, others_hi = _box_arrays(others) if others else (np.zeros((0, 3)), np.zeros((0, 3)))
    a_lo, a_hi = anchor.lo, anchor.hi
    lo, hi = box.lo, box.hi
    pushes = [
        (a_hi[0] - lo[0] + SEPARATION_GAP, 0.0),
        (a_lo[0] - hi[0] - SEPARATION_GAP, 0.0),
        (0.0, a_hi[1] - lo[1] + SEPARATION_GAP),
        (0.0, a_lo[1] - hi[1] - SEPARATION_GAP),
    ]
    pushes.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d))
    candidates = [_clamp_into(box.moved(dx, dy), room) for dx, dy in pushes]
    for c in candidates:
        if _overlap_with_others(c, others_lo, others_hi) <= eps:
            return c
    slot = _free_slot(box, room, others_lo, others_hi, eps)
    if slot is not None:
        return slot
    candidates.append(_clamp_into(box, room))
    return min(candidates, key=lambda c: (_overlap_with_others(c, others_lo, others_hi),
                                          math.hypot(c.p[0] - box.p[0], c.p[1] - box.p[1])))


def separate_worst(h, report=None, eps_overlap=EPS_OVERLAP):
    """One deterministic repair: fix the worst overlap, else the worst protrusion.

    For an overlap the smaller box (by volume, then name) moves; if no
    collision-free spot exists for it the larger box is tried instead.
    """
    report = validate(h, eps_overlap) if report is None else report
    overlaps = [v for v in report if v.kind == "overlap"]
    rooms = h.box_room()
    if overlaps:
        worst = min(overlaps, key=lambda v: (-v.magnitude, v.subjects))
        a, b = (h.find(n) for n in worst.subjects)
        order = sorted((a, b), key=lambda x: (x.volume, x.name))
        for mover, anchor in (order, order[::-1]):
            others = [x for x in h.boxes() if x.name != mover.name]
            moved = _relocate(mover, anchor, rooms[mover.name], others, eps_overlap)
            others_lo, others_hi = _box_arrays(others)
            if _overlap_with_others(moved, others_lo, others_hi) <= eps_overlap:
                return h.replace_box(moved)
        return h.replace_box(_relocate(order[0], order[1], rooms[order[0].name],
                                       [x for x in h.boxes() if x.name != order[0].name], eps_overlap))
    oob = [v for v in report if v.kind == "out_of_bounds"]
    if oob:
        worst = max(oob, key=lambda v: v.magnitude)
        box = h.find(worst.subjects[0])
        room = rooms[box.name]
        others = [x for x in h.boxes() if x.name != box.name]
        others_lo, others_hi = _box_arrays(others) if others else (np.zeros((0, 3)), np.zeros((0, 3)))
        clamped = _clamp_into(box, room)
        if _overlap_with_others(clamped, others_lo, others_hi) > eps_overlap:
            slot = _free_slot(box, room, others_lo, others_hi, eps_overlap)
            if slot is not None:
                return h.replace_box(slot)
        return h.replace_box(clamped)
    return h


def _score(report):
    return (round(report.total_overlap, 12), round(report.total_protrusion, 12))


@dataclass
class RefineResult:
    layout: HouseLayout
    iterations: int
    report: ViolationReport
    history: list = field(default_factory=list)  # total overlap after each round

    def __iter__(self):
        return iter((self.layout, self.iterations, self.report))


def refine_loop(h, refiner=None, max_iter=20, eps_overlap=EPS_OVERLAP):
    """Serialize, validate, ask the refiner, re-parse; repeat until clean or out of rounds.

    A candidate is accepted only if it does not raise total overlap volume or
    total protrusion; refiner errors, unparsable programs and rejected
    candidates fall back to the local refiner for that round.
    """
    from .refiner import LocalRefiner, RefinerRequest

    if max_iter < 1:
        raise ParameterError("max_iter must be >= 1")
    local = LocalRefiner(eps_overlap)
    refiner = refiner or local
    current = h
    report = validate(current, eps_overlap)
    history = [report.total_overlap]
    rounds = 0
    while report and rounds < max_iter:
        rounds += 1
        req = RefinerRequest(serialize_layout(current), report.to_list(), rounds)
        cand = None
        if refiner is not local:
            try:
                cand = parse_layout(refiner.refine(req).program)
            except (RefinerError, ParseError, ParameterError) as exc:
                logger.warning("round %d: refiner failed (%s); using local refiner", rounds, exc)
        if cand is not None:
            cand_report = validate(cand, eps_overlap)
            if _score(cand_report) > _score(report) or [b.name for b in cand.boxes()] != [b.name for b in current.boxes()]:
                logger.warning("round %d: refiner output rejected (not an improvement)", rounds)
                cand = None
        if cand is None:
            cand = parse_layout(local.refine(req).program)
            cand_report = validate(cand, eps_overlap)
            if _score(cand_report) > _score(report):
                logger.info("round %d: local repair did not improve; keeping current layout", rounds)
                history.append(report.total_overlap)
                continue
        current, report = cand, cand_report
        history.append(report.total_overlap)
    if report:
        logger.warning("refinement stopped after %d rounds with %d violations", rounds, len(report))
    return RefineResult(current, rounds, report, history)


# ------------------------------------------------------------ orientation


def _groups_for_room(room):
    boxes = sorted(room.boxes, key=lambda b: b.name)
    if not boxes:
        return []
    if any(b.group is not None for b in boxes):
        groups = {}
        for b in boxes:
            groups.setdefault(b.group if b.group is not None else "\0" + b.name, []).append(b.name)
        return [sorted(v) for _, v in sorted(groups.items())]
    if len(boxes) == 1:
        return [[boxes[0].name]]
    pts = np.array([b.p[:2] for b in boxes])
    labels = fcluster(linkage(pts, method="single"), t=GROUP_RADIUS, criterion="distance")
    groups = {}
    for b, lab in zip(boxes, labels):
        groups.setdefault(int(lab), []).append(b.name)
    return sorted(groups.values())


def orientation_groups(h):
    return [g for r in h.rooms for g in _groups_for_room(r)]


def reference_of(boxes):
    return min(boxes, key=lambda b: (-b.footprint, b.name))


def facing(subject_p, target_p):
    dx, dy = target_p[0] - subject_p[0], target_p[1] - subject_p[1]
    if dx == 0 and dy == 0:
        return 0.0
    return wrap_yaw(math.atan2(dy, dx))


def snap_yaw(yaw):
    return wrap_yaw(min(CARDINALS, key=lambda c: abs(math.remainder(yaw - c, 2 * math.pi))))


def assign_orientations(h, relations=None, snap=None):
    """Give every box a yaw (0 faces +x).

    Within each group the reference is the box with the largest footprint
    (name breaks ties). Related subjects face their target; everything else,
    and the reference when its own relation would close a cycle, faces the
    room centre.
    """
    relations = list(h.relations if relations is None else relations)
    snap = h.snap if snap is None else snap
    boxes = {b.name: b for b in h.boxes()}
    rooms = h.box_room()
    group_of = {}
    groups = orientation_groups(h)
    for gi, g in enumerate(groups):
        for n in g:
            group_of[n] = gi
    out_edge = {}
    for subj, tgt in relations:
        if subj not in boxes or tgt not in boxes:
            raise ParameterError(f"relation {subj!r} -> {tgt!r} names an unknown box")
        if subj == tgt:
            raise ParameterError(f"relation {subj!r} -> itself")
        if group_of[subj] != group_of[tgt]:
            raise ParameterError(f"relation {subj!r} -> {tgt!r} crosses groups")
        if subj in out_edge and out_edge[subj] != tgt:
            logger.warning("%s has several targets; keeping %s", subj, out_edge[subj])
            continue
        out_edge[subj] = tgt
    # break every cycle at its reference member
    for g in groups:
        for start in sorted(g):
            path, node = [], start
            while node in out_edge and node not in path:
                path.append(node)
                node = out_edge[node]
            if node in path:
                cyc = path[path.index(node):]
                ref = reference_of([boxes[n] for n in cyc])
                logger.info("cycle %s broken at %s", " -> ".join(cyc), ref.name)
                del out_edge[ref.name]
    yaws = {}
    for name, b in boxes.items():
        if name in out_edge:
            yaw = facing(b.p, boxes[out_edge[name]].p)
        else:
            yaw = facing(b.p, rooms[name].center)
        yaws[name] = snap_yaw(yaw) if snap else yaw
    rooms_out = tuple(
        dataclasses.replace(r, boxes=tuple(dataclasses.replace(b, yaw=yaws[b.name]) for b in r.boxes))
        for r in h.rooms
    )
    return dataclasses.replace(h, rooms=rooms_out)


def group_references(h):
    return {tuple(g): reference_of([h.find(n) for n in g]).name for g in orientation_groups(h)}


# ------------------------------------------------------------ mesh export


def _on_wall(door, a, b, tol=1e-9):
    """Parameter interval [t0, t1] of the door along wall a->b, or None."""
    p0 = np.array(door.segment[:2])
    p1 = np.array(door.segment[2:])
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    length = float(np.hypot(*d))
    u = d / length
    n = np.array([-u[1], u[0]])
    if abs((p0 - a) @ n) > tol or abs((p1 - a) @ n) > tol:
        return None
    t0, t1 = sorted(((p0 - a) @ u, (p1 - a) @ u))
    t0, t1 = max(t0, 0.0), min(t1, length)
    if t1 - t0 <= tol:
        return None
    return t0, t1, length


def _wall_quads(a, b, height, doors):
    """Quads (4 xyz corners) covering wall a->b, minus any door openings."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    spans = []
    length = float(np.hypot(*(b - a)))
    for d in doors:
        hit = _on_wall(d, a, b)
        if hit is not None:
            spans.append((hit[0], hit[1], min(d.height, height)))
    u = (b - a) / length

    def quad(t0, t1, z0, z1):
        q0, q1 = a + u * t0, a + u * t1
        return [(q0[0], q0[1], z0), (q1[0], q1[1], z0), (q1[0], q1[1], z1), (q0[0], q0[1], z1)]

    if not spans:
        return [quad(0.0, length, 0.0, height)]
    out, cursor = [], 0.0
    for t0, t1, dh in sorted(spans):
        if t0 > cursor:
            out.append(quad(cursor, t0, 0.0, height))
        if dh < height:
            out.append(quad(t0, t1, dh, height))
        cursor = max(cursor, t1)
    if cursor < length:
        out.append(quad(cursor, length, 0.0, height))
    return out


def room_faces(room, doors=()):
    """(label, normal, corners) for floor, ceiling and the four walls, normals pointing inward."""
    x0, y0, x1, y1 = room.bounds
    h = room.height
    faces = [
        ("floor", (0.0, 0.0, 1.0), [(x0, y0, 0.0), (x1, y0, 0.0), (x1, y1, 0.0), (x0, y1, 0.0)]),
        ("ceiling", (0.0, 0.0, -1.0), [(x0, y0, h), (x0, y1, h), (x1, y1, h), (x1, y0, h)]),
    ]
    walls = [
        ("wall_south", (0.0, 1.0, 0.0), (x0, y0), (x1, y0)),
        ("wall_east", (-1.0, 0.0, 0.0), (x1, y0), (x1, y1)),
        ("wall_north", (0.0, -1.0, 0.0), (x1, y1), (x0, y1)),
        ("wall_west", (1.0, 0.0, 0.0), (x0, y1), (x0, y0)),
    ]
    for label, n, a, b in walls:
        quads = _wall_quads(a, b, h, doors)
        for k, q in enumerate(quads):
            faces.append((label if len(quads) == 1 else f"{label}_{k}", n, q))
    return faces


def export_planar_mesh(h):
    """OBJ text: one object per room face, axis-aligned quads with per-face normals."""
    buf = io.StringIO()
    buf.write("# planar layout mesh\n")
    v_index = 1
    n_index = 1
    for room in h.rooms:
        for label, n, corners in room_faces(room, h.doors):
            buf.write(f"o {room.name}/{label}\n")
            for c in corners:
                buf.write("v %.6f %.6f %.6f\n" % tuple(float(x) + 0.0 for x in c))
            buf.write("vn %.6f %.6f %.6f\n" % tuple(float(x) + 0.0 for x in n))
            idx = " ".join(f"{v_index + k}//{n_index}" for k in range(4))
            buf.write(f"f {idx}\n")
            v_index += 4
            n_index += 1
    return buf.getvalue()


def count_faces(obj_text):
    return sum(1 for line in obj_text.splitlines() if line.startswith("f "))
