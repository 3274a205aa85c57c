"""Occupancy fusion and robot-centric signed distance windows.

Voxel ``(i, j, k)`` covers ``origin + [i, i+1) * resolution`` on each axis and
its centre is at ``origin + (i + 0.5) * resolution``.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Pose

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


@dataclass
class PointCloud:
    """Points in the sensor frame together with the sensor pose."""

    points: np.ndarray
    pose: Pose = field(default_factory=lambda: Pose(np.zeros(3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite points")

    def world_points(self):
        return self.points @ self.pose.rotation.T + self.pose.position

    def __len__(self):
        return self.points.shape[0]


class OccupancyGrid:
    """Hit/miss counting voxel map.

    A voxel is occupied when it has at least ``hit_threshold`` hits and more
    hits than misses, free when observed otherwise, unknown when never
    observed. Each cloud casts one vote per voxel (see integrate_pointcloud)
    and counters saturate at ``cap``, so moving obstacles appear at once and
    the voxels they vacate clear after about ``cap / 2`` clouds.
    """

    def __init__(self, shape, resolution=0.1, origin=(0.0, 0.0, 0.0), hit_threshold=1, cap=8):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.shape = tuple(int(s) for s in shape)
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.hit_threshold = int(hit_threshold)
        self.cap = int(cap)
        self.hits = np.zeros(self.shape, dtype=np.int32)
        self.misses = np.zeros(self.shape, dtype=np.int32)

    @classmethod
    def from_bounds(cls, lower, upper, resolution=0.1, **kw):
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        shape = np.ceil((upper - lower) / resolution - 1e-9).astype(int)
        return cls(shape, resolution, lower, **kw)

    def copy(self):
        g = OccupancyGrid(self.shape, self.resolution, self.origin, self.hit_threshold, self.cap)
        g.hits[...] = self.hits
        g.misses[...] = self.misses
        return g

    def occupied(self):
        return (self.hits >= self.hit_threshold) & (self.hits > self.misses)

    def observed(self):
        return (self.hits + self.misses) > 0

    def state(self):
        s = np.full(self.shape, UNKNOWN, dtype=np.int8)
        s[self.observed()] = FREE
        s[self.occupied()] = OCCUPIED
        return s

    def index_of(self, p):
        p = np.asarray(p, dtype=np.float64)
        return np.floor((p - self.origin) / self.resolution).astype(int)

    def center_of(self, idx):
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def set_occupied(self, mask):
        """Mark voxels directly (scene voxelization for tests and oracles)."""
        mask = np.asarray(mask, dtype=bool)
        self.hits[mask] = max(self.hit_threshold, 1)
        self.misses[mask] = 0
        self.misses[~mask & ~self.observed()] = 1

    def occupancy_slice(self, zmin, zmax):
        """2D occupancy: any occupied voxel whose z-extent overlaps [zmin, zmax]."""
        k0 = int(np.floor((zmin - self.origin[2]) / self.resolution))
        k1 = int(np.ceil((zmax - self.origin[2]) / self.resolution))
        k0, k1 = max(k0, 0), min(k1, self.shape[2])
        if k1 <= k0:
            return np.zeros(self.shape[:2], dtype=bool)
        return self.occupied()[:, :, k0:k1].any(axis=2)


def integrate_pointcloud(grid, cloud, nudge=1e-6):
    """Fuse one cloud: a hit at each endpoint voxel, a miss along each ray.

    Votes are per voxel and per cloud. A voxel holding an endpoint counts as
    hit even when other rays of the same cloud cross it. A hit adds one to
    ``hits`` and clears ``misses``; a miss adds one to ``misses`` and takes
    one from ``hits``. An observed voxel therefore never becomes unknown.
    """
    if len(cloud) == 0:
        return grid
    res = grid.resolution
    start_w = cloud.pose.position
    ends_w = cloud.world_points()
    ray = ends_w - start_w
    norm = np.linalg.norm(ray, axis=1, keepdims=True)
    ok = norm[:, 0] > 0
    # push endpoints off voxel faces so a surface point lands behind the face
    ends_w = ends_w[ok] + nudge * ray[ok] / norm[ok]
    start = np.ascontiguousarray((start_w - grid.origin) / res)
    ends = np.ascontiguousarray((ends_w - grid.origin) / res)
    hit = np.zeros(grid.shape, dtype=np.uint8)
    miss = np.zeros(grid.shape, dtype=np.uint8)
    kernels.raycast_mark(hit, miss, start, ends)
    hit = hit.view(bool)
    miss = miss.view(bool) & ~hit
    grid.hits[hit] = np.minimum(grid.hits[hit] + 1, grid.cap)
    grid.misses[hit] = 0
    grid.hits[miss] = np.maximum(grid.hits[miss] - 1, 0)
    grid.misses[miss] = np.minimum(grid.misses[miss] + 1, grid.cap)
    return grid


@dataclass(frozen=True)
class EsdfWindow:
    """Signed distances on the voxel centres of a box-shaped sub-grid.

    ``lo`` is the global index of the first voxel; values outside the window
    are not stored.
    """

    lo: np.ndarray
    values: np.ndarray
    resolution: float
    grid_origin: np.ndarray
    d_max: float

    @property
    def shape(self):
        return self.values.shape

    @property
    def first_center(self):
        return self.grid_origin + (self.lo + 0.5) * self.resolution

    @property
    def center(self):
        return self.first_center + 0.5 * (np.array(self.shape) - 1) * self.resolution

    @property
    def half_extents(self):
        return 0.5 * np.array(self.shape) * self.resolution

    def voxel_centers(self):
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.shape], indexing="ij"), axis=-1)
        return self.first_center + idx * self.resolution

    def value_at_index(self, gidx):
        """Stored value by global voxel index, or None outside the window."""
        local = np.asarray(gidx) - self.lo
        if np.any(local < 0) or np.any(local >= np.array(self.shape)):
            return None
        return float(self.values[tuple(local)])

    def _interp(self, p):
        """Trilinear interpolation; returns (d, inside) for points (M, 3)."""
        g = (p - self.first_center) / self.resolution
        n = np.array(self.shape)
        i0 = np.floor(g).astype(int)
        # a point on the last centre plane uses the last cell with weight 1
        i0 = np.minimum(i0, n - 2)
        inside = np.all((g >= 0) & (g <= n - 1), axis=1) & np.all(n >= 2)
        i0 = np.clip(i0, 0, np.maximum(n - 2, 0))
        f = np.clip(g - i0, 0.0, 1.0)
        V = self.values
        if min(n) < 2:
            return np.full(p.shape[0], self.d_max), np.zeros(p.shape[0], dtype=bool)
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c00 = V[x0, y0, z0] * (1 - fx) + V[x0 + 1, y0, z0] * fx
        c10 = V[x0, y0 + 1, z0] * (1 - fx) + V[x0 + 1, y0 + 1, z0] * fx
        c01 = V[x0, y0, z0 + 1] * (1 - fx) + V[x0 + 1, y0, z0 + 1] * fx
        c11 = V[x0, y0 + 1, z0 + 1] * (1 - fx) + V[x0 + 1, y0 + 1, z0 + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz, inside

    def sample(self, points):
        """Batched distance and gradient queries.

        Returns ``(d, grad, outside)``. Points whose gradient stencil leaves
        the window get ``d_max``, a zero gradient and ``outside = True``.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        M = p.shape[0]
        h = 0.25 * self.resolution
        offs = np.concatenate([np.zeros((1, 3)), h * np.eye(3), -h * np.eye(3)])
        q = (p[:, None, :] + offs[None]).reshape(-1, 3)
        vals, inside = self._interp(q)
        vals = vals.reshape(M, 7)
        ok = inside.reshape(M, 7).all(axis=1)
        d = np.where(ok, vals[:, 0], self.d_max)
        grad = (vals[:, 1:4] - vals[:, 4:7]) / (2.0 * h)
        grad[~ok] = 0.0
        return d, grad, ~ok


def sample_distance(esdf, p):
    """Distance and gradient at one point; third element flags out-of-window."""
    d, g, out = esdf.sample(np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(d[0]), g[0], bool(out[0])


def window_bounds(grid, center, half_extents):
    """Global index range [lo, hi) of voxels whose centres lie in the box."""
    res = grid.resolution
    c = np.asarray(center, dtype=np.float64)
    e = np.asarray(half_extents, dtype=np.float64)
    lo = np.ceil((c - e - grid.origin) / res - 0.5 - 1e-9).astype(int)
    hi = np.floor((c + e - grid.origin) / res - 0.5 + 1e-9).astype(int) + 1
    return lo, hi


def compute_esdf(grid, center, half_extents, d_max=2.0, max_voxels=4_000_000):
    """Exact signed distance on a robot-centred window of ``grid``.

    Unknown and out-of-grid voxels count as free. Occupied voxels within
    ``d_max`` of the window contribute even when they lie outside it.
    """
    res = grid.resolution
    lo, hi = window_bounds(grid, center, half_extents)
    if np.any(hi <= lo):
        raise ValueError("empty ESDF window")
    if np.prod(hi - lo) > max_voxels:
        raise ValueError("ESDF window exceeds the configured maximum size")
    pad = int(np.floor(d_max / res))
    shape = np.array(grid.shape)
    # padded region, clipped to one voxel beyond the grid on each side
    plo = np.maximum(lo - pad, -1)
    phi = np.minimum(hi + pad, shape + 1)
    plo = np.minimum(plo, lo)
    phi = np.maximum(phi, hi)
    occ = np.zeros(tuple(phi - plo), dtype=np.uint8)
    glo = np.maximum(plo, 0)
    ghi = np.minimum(phi, shape)
    if np.all(ghi > glo):
        sub = grid.occupied()[glo[0]:ghi[0], glo[1]:ghi[1], glo[2]:ghi[2]]
        a = glo - plo
        occ[a[0]:a[0] + sub.shape[0], a[1]:a[1] + sub.shape[1], a[2]:a[2] + sub.shape[2]] = sub
    w0 = lo - plo
    w1 = w0 + (hi - lo)
    win = (slice(w0[0], w1[0]), slice(w0[1], w1[1]), slice(w0[2], w1[2]))
    occ_win = occ[win].astype(bool)
    d_pos = np.sqrt(kernels.squared_edt(np.ascontiguousarray(occ)))[win] * res
    values = np.minimum(d_pos, d_max)
    if occ_win.any():
        free = np.ascontiguousarray((1 - occ).astype(np.uint8))
        d_neg = np.sqrt(kernels.squared_edt(free))[win] * res
        values = np.where(occ_win, -np.minimum(d_neg, d_max), values)
    values = np.ascontiguousarray(values)
    values.setflags(write=False)
    return EsdfWindow(lo=lo, values=values, resolution=res, grid_origin=grid.origin.copy(), d_max=float(d_max))


def dump_slice_csv(path, values, first_center, resolution, axis=2, index=None):
    """Write one slice of a voxel array as rows ``x,y,z,value``."""
    values = np.asarray(values)
    if index is None:
        index = values.shape[axis] // 2
    sl = [slice(None)] * 3
    sl[axis] = slice(index, index + 1)
    block = values[tuple(sl)]
    offs = [0, 0, 0]
    offs[axis] = index
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "value"])
        for idx in np.ndindex(block.shape):
            gi = np.array(idx) + offs
            p = np.asarray(first_center) + gi * resolution
            w.writerow([f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", repr(float(block[idx]))])
