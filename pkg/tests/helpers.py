"""Shared generators for tests."""
import numpy as np

from ctskit.layout import HouseLayout, Room, SemanticBox, overlap_volume, validate


def random_layout(seed, n_min=5, n_max=15, n_forced=3, bounds=(0.0, 0.0, 6.0, 5.0)):
    """Non-overlapping random boxes, then n_forced of them dropped onto others."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_min, n_max + 1))
    x0, y0, x1, y1 = bounds
    boxes = []
    while len(boxes) < n:
        s = rng.uniform(0.3, 1.0, size=3)
        p = (rng.uniform(x0 + s[0] / 2, x1 - s[0] / 2), rng.uniform(y0 + s[1] / 2, y1 - s[1] / 2), s[2] / 2)
        b = SemanticBox(f"b{len(boxes):02d}", int(rng.integers(0, 5)), p, tuple(s))
        if all(overlap_volume(b, o) == 0 for o in boxes):
            boxes.append(b)
    idx = rng.permutation(n)
    for k in range(n_forced):
        mover, host = boxes[idx[2 * k % n]], boxes[idx[(2 * k + 1) % n]]
        shift = rng.uniform(-0.1, 0.1, size=2)
        moved = SemanticBox(mover.name, mover.cls, (host.p[0] + shift[0], host.p[1] + shift[1], mover.p[2]), mover.s)
        boxes[idx[2 * k % n]] = moved
    h = HouseLayout((Room("room", bounds, 2.5, tuple(boxes)),))
    return h


def forced_overlap_count(h):
    return sum(1 for v in validate(h) if v.kind == "overlap")


def random_stack(seed, room=(0.0, 0.0, 4.0, 4.0)):
    """2-8 boxes hovering at distinct heights over a small area, so many land on each other."""
    from ctskit.physics import RigidProxy

    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    cx, cy = 0.5 * (room[0] + room[2]), 0.5 * (room[1] + room[3])
    proxies = []
    for k in range(n):
        s = rng.uniform(0.3, 1.0, size=3)
        z = 0.2 + 1.2 * k + rng.uniform(0, 0.1) + s[2] / 2
        p = (cx + rng.uniform(-0.6, 0.6), cy + rng.uniform(-0.6, 0.6), z)
        proxies.append(RigidProxy(SemanticBox(f"s{k}", 0, p, tuple(s)), movable=bool(k > 0 or rng.random() < 0.7)))
    order = rng.permutation(n)
    return [proxies[i] for i in order]
