"""Cross-sensor detection clustering.

Detections carry projected meter coordinates and a timestamp. Each
detection owns a circular buffer of fixed radius (default 800 m).
Same-sensor detections merge when their buffers intersect (center
distance <= 2 * radius). Across sensors, detections additionally need
timestamps within the coincidence window (default 600 s) to link. A
cluster is a connected component of these links; clusters containing
both sensors are joint, the rest belong to whichever sensor they hold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Detection:
    x_m: float
    y_m: float
    t_s: float
    sensor: str


@dataclass
class ClusterCounts:
    joint: int
    only_a: int
    only_b: int
    n_clusters: int


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def cluster_match(dets_a, dets_b, radius_m: float = 800.0,
                  window_s: float = 600.0) -> ClusterCounts:
    """Count joint and single-sensor clusters between two detection lists."""
    dets = list(dets_a) + list(dets_b)
    n_a = len(dets_a)
    n = len(dets)
    if n == 0:
        return ClusterCounts(0, 0, 0, 0)

    xs = np.array([d.x_m for d in dets])
    ys = np.array([d.y_m for d in dets])
    ts = np.array([d.t_s for d in dets])
    is_a = np.arange(n) < n_a
    link_dist = 2.0 * radius_m

    uf = _UnionFind(n)
    for i in range(n):
        dx = xs[i + 1:] - xs[i]
        dy = ys[i + 1:] - ys[i]
        close = dx * dx + dy * dy <= link_dist * link_dist
        same = is_a[i + 1:] == is_a[i]
        in_window = np.abs(ts[i + 1:] - ts[i]) <= window_s
        for j in np.flatnonzero(close & (same | in_window)):
            uf.union(i, i + 1 + j)

    roots = {}
    for i in range(n):
        roots.setdefault(uf.find(i), []).append(i)
    joint = only_a = only_b = 0
    for members in roots.values():
        has_a = any(is_a[m] for m in members)
        has_b = any(not is_a[m] for m in members)
        if has_a and has_b:
            joint += 1
        elif has_a:
            only_a += 1
        else:
            only_b += 1
    return ClusterCounts(joint=joint, only_a=only_a, only_b=only_b,
                         n_clusters=len(roots))


def read_detections_csv(path, sensor: str):
    """CSV with a header containing x_m, y_m, t_s columns."""
    out = []
    with open(path) as f:
        header = f.readline().strip().split(",")
        try:
            ix, iy, it = header.index("x_m"), header.index("y_m"), header.index("t_s")
        except ValueError:
            raise ValueError(f"{path}: header must name x_m, y_m, t_s columns")
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            out.append(Detection(float(parts[ix]), float(parts[iy]),
                                 float(parts[it]), sensor))
    return out
