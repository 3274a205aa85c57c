"""Regenerate the shipped scene files from a few face parameters.

    python tools/make_scenes.py src/articmpc/data/scenes
"""
import math
import sys
from pathlib import Path

import numpy as np
import yaml

Z = np.array([0.0, 0.0, 1.0])
WALL_H = 2.0


def r(v):
    return [round(float(a), 6) for a in v]


def box(center, size, n=None, name=None):
    d = {"center": r(center), "size": r(size)}
    if n is not None:
        d["yaw"] = round(math.atan2(n[1], n[0]), 9)
    if name:
        d["name"] = name
    return d


def frame(n):
    n = np.asarray(n, dtype=float)
    lat = np.cross(Z, n)
    return n, lat / np.linalg.norm(lat)


def counter(face_point, n, length, depth=0.6, height=0.9, name="counter"):
    n, lat = frame(n)
    c = np.asarray(face_point, dtype=float) - 0.5 * depth * n
    c[2] = 0.5 * height
    return box(c, [depth, length, height], n, name)


def drawer(oid, face_point, n, z=0.75, width=0.5, height=0.2, handle=0.3, travel=0.45):
    n, lat = frame(n)
    c = np.asarray(face_point, dtype=float)
    c[2] = z
    hc = c + 0.06 * n
    return {
        "id": oid,
        "category": "drawer",
        "joint": {"type": "prismatic", "axis": r(n), "pivot": r(c), "limits": [0.0, travel]},
        "link": [box(c + 0.01 * n, [0.02, width, height], n), box(hc, [0.02, handle, 0.02], n)],
        "handle": [r(hc - 0.5 * handle * lat), r(hc + 0.5 * handle * lat)],
        "normal": r(n),
        "face": {"center": r(c + 0.02 * n), "width": width, "height": height},
    }


def oven(oid, face_point, n, z0=0.1, height=0.7, width=0.6, handle=0.4):
    n, lat = frame(n)
    c = np.asarray(face_point, dtype=float)
    c[2] = z0 + 0.5 * height
    pivot = c + 0.03 * n
    pivot[2] = z0
    hc = c + 0.07 * n
    hc[2] = z0 + height - 0.06
    return {
        "id": oid,
        "category": "oven",
        "hinge_side": "bottom",
        "joint": {"type": "revolute", "axis": r(np.cross(Z, n)), "pivot": r(pivot), "limits": [0.0, round(math.pi / 2, 9)]},
        "link": [box(c + 0.015 * n, [0.03, width, height], n), box(hc, [0.02, handle, 0.02], n)],
        "handle": [r(hc - 0.5 * handle * lat), r(hc + 0.5 * handle * lat)],
        "normal": r(n),
        "face": {"center": r(c + 0.03 * n), "width": width, "height": height},
    }


def side_door(oid, category, face_point, n, zc=0.5, width=0.6, height=0.5, handle=0.2, side="left",
              q_max=1.75):
    n, lat = frame(n)
    c = np.asarray(face_point, dtype=float)
    c[2] = zc
    s = -1.0 if side == "left" else 1.0
    hinge = c + 0.03 * n + s * 0.5 * width * lat
    e = -s * lat
    hc = c + 0.07 * n - s * (0.5 * width - 0.06) * lat
    return {
        "id": oid,
        "category": category,
        "hinge_side": side,
        "joint": {"type": "revolute", "axis": r(np.cross(e, n)), "pivot": r(hinge), "limits": [0.0, round(q_max, 9)]},
        "link": [box(c + 0.015 * n, [0.03, width, height], n), box(hc, [0.02, 0.02, handle], n)],
        "handle": [r(hc - 0.5 * handle * Z), r(hc + 0.5 * handle * Z)],
        "normal": r(n),
        "face": {"center": r(c + 0.03 * n), "width": width, "height": height},
    }


def walls(lo, hi, t=0.1):
    (x0, y0), (x1, y1) = lo, hi
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return [
        box([cx, y1 - t / 2, WALL_H / 2], [x1 - x0, t, WALL_H], name="wall_n"),
        box([cx, y0 + t / 2, WALL_H / 2], [x1 - x0, t, WALL_H], name="wall_s"),
        box([x1 - t / 2, cy, WALL_H / 2], [t, y1 - y0, WALL_H], name="wall_e"),
        box([x0 + t / 2, cy, WALL_H / 2], [t, y1 - y0, WALL_H], name="wall_w"),
    ]


def scene(name, boxes, objects, spawn_lo, spawn_hi, dynamic=None):
    d = {
        "name": name,
        "resolution": 0.1,
        "bounds": {"lower": [-3.0, -3.0, 0.0], "upper": [3.0, 3.0, 2.0]},
        "spawn": {"lower": r(spawn_lo), "upper": r(spawn_hi)},
        "boxes": walls((-3, -3), (3, 3)) + boxes,
        "objects": objects,
    }
    if dynamic:
        d["dynamic"] = dynamic
    return d


def build():
    N = [0.0, -1.0, 0.0]
    E = [1.0, 0.0, 0.0]
    W = [-1.0, 0.0, 0.0]
    out = {}
    # straight counter along the north wall, island to the east
    out["kitchen_a"] = scene(
        "kitchen_a",
        [counter([0, 2.4, 0], N, 5.8), box([2.3, 0.2, 0.45], [0.8, 1.2, 0.9], name="island")],
        [drawer("drawer_a", [-1.5, 2.4, 0], N), oven("oven_a", [0.0, 2.4, 0], N),
         side_door("washer_a", "washing_machine", [1.5, 2.4, 0], N)],
        [-1.8, -0.6, 0.6], [1.2, 0.4, 2.5])
    # counter along the west wall, dining table and stool on the east side
    out["kitchen_b"] = scene(
        "kitchen_b",
        [counter([-2.4, 0, 0], E, 5.8), box([1.6, 1.5, 0.375], [1.0, 0.8, 0.75], name="table"),
         box([1.7, -1.4, 0.25], [0.4, 0.4, 0.5], name="stool")],
        [side_door("washer_b", "washing_machine", [-2.4, 1.5, 0], E), drawer("drawer_b", [-2.4, 0.0, 0], E),
         oven("oven_b", [-2.4, -1.5, 0], E)],
        [-0.6, -1.8, 2.3], [0.6, 1.8, 4.0])
    # L-shaped counter with a tall cabinet beside the washer
    out["kitchen_c"] = scene(
        "kitchen_c",
        [counter([-0.4, 2.4, 0], N, 5.0), counter([2.4, -0.6, 0], W, 3.6),
         box([2.7, 1.45, 0.9], [0.6, 0.7, 1.8], name="tall_cabinet")],
        [drawer("drawer_c", [-1.0, 2.4, 0], N), oven("oven_c", [-2.2, 2.4, 0], N),
         side_door("washer_c", "washing_machine", [2.4, 0.3, 0], W)],
        [-1.6, -2.0, -0.3], [0.8, -0.4, 1.9])
    # drawer with a box wandering beside the work site; its reachable area
    # overlaps the robot's footprint while the drawer is pulled
    out["drawer_dynamic"] = scene(
        "drawer_dynamic",
        [counter([0, 2.4, 0], N, 5.8)],
        [drawer("drawer_d", [0.0, 2.4, 0], N)],
        [-1.0, -2.4, 0.9], [1.0, -1.6, 2.2],
        dynamic=[{"size": [0.3, 0.3, 1.2], "z": 0.6, "speed": 0.5, "waypoints": [[1.4, 1.0]],
                  "region": [[0.25, 0.8], [1.5, 1.9]]}])
    # ranking: long drawer handle, tall cabinet standing in front of and beside
    # the first handle end; the robot waits in the free lane next to it
    rank_drawer = drawer("drawer_r", [0.0, 1.0, 0], N, width=0.8, handle=0.6)
    out["rank_obstacle"] = {
        "name": "rank_obstacle", "resolution": 0.1,
        "bounds": {"lower": [-2.0, -2.0, 0.0], "upper": [2.0, 2.0, 2.0]},
        "spawn": {"lower": [0.45, -0.8, math.pi / 2], "upper": [0.45, -0.8, math.pi / 2]},
        "boxes": [counter([0, 1.0, 0], N, 3.0), box([-0.55, 0.15, 0.7], [0.6, 0.9, 1.4], name="obstacle")],
        "objects": [rank_drawer],
    }
    out["rank_symmetric"] = {
        "name": "rank_symmetric", "resolution": 0.1,
        "bounds": {"lower": [-2.0, -2.0, 0.0], "upper": [2.0, 2.0, 2.0]},
        "spawn": {"lower": [0.0, -0.8, math.pi / 2], "upper": [0.0, -0.8, math.pi / 2]},
        "boxes": [counter([0, 1.0, 0], N, 3.0)],
        "objects": [rank_drawer],
    }
    return out


def main(dest):
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for name, d in build().items():
        with open(dest / f"{name}.yaml", "w") as fh:
            yaml.safe_dump(d, fh, sort_keys=False, default_flow_style=None, width=110)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/articmpc/data/scenes")
