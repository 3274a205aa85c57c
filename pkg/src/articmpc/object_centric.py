"""Articulation models, grasp frames and keyframe plans for articulated objects."""
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, axis_angle_matrix
from .mapping import PointCloud

CATEGORIES = ("drawer", "oven", "washing_machine", "cabinet")
SECONDS_PER_RAD = 10.0
SECONDS_PER_M = 20.0


class EstimationError(RuntimeError):
    pass


@dataclass
class ArticulationModel:
    joint_type: str
    axis: np.ndarray
    pivot: np.ndarray
    q: float = 0.0
    q_limits: tuple = (0.0, 1.0)
    category: str = "drawer"

    def __post_init__(self):
        if self.joint_type not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint type {self.joint_type!r}")
        a = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise ValueError("articulation axis has zero norm")
        self.axis = a / n
        self.pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
        lo, hi = float(self.q_limits[0]), float(self.q_limits[1])
        if not lo < hi:
            raise ValueError("articulation limits need lower < upper")
        self.q_limits = (lo, hi)
        if not lo - 1e-12 <= self.q <= hi + 1e-12:
            raise ValueError("articulation state outside its limits")

    @property
    def q_max(self):
        return self.q_limits[1]

    def displacement(self, dq):
        """Homogeneous transform moving the link by joint displacement ``dq``."""
        T = np.eye(4)
        if self.joint_type == "revolute":
            R = axis_angle_matrix(self.axis, dq)
            T[:3, :3] = R
            T[:3, 3] = self.pivot - R @ self.pivot
        else:
            T[:3, 3] = dq * self.axis
        return T

    def joint_coordinate(self, p, p_ref):
        """Joint displacement that best maps reference point ``p_ref`` toward ``p``."""
        if self.joint_type == "prismatic":
            return float(np.dot(np.asarray(p) - p_ref, self.axis))
        a = self.axis
        r0 = p_ref - self.pivot
        r1 = np.asarray(p) - self.pivot
        r0 = r0 - np.dot(r0, a) * a
        r1 = r1 - np.dot(r1, a) * a
        return float(np.arctan2(np.dot(a, np.cross(r0, r1)), np.dot(r0, r1)))


@dataclass
class KinematicPlan:
    times: np.ndarray
    poses: list
    articulation: ArticulationModel
    grasp: Pose
    q_values: np.ndarray = field(default=None)

    @property
    def duration(self):
        return float(self.times[-1])

    def positions(self):
        return np.array([p.position for p in self.poses])

    def orientations(self):
        return np.array([p.orientation for p in self.poses])


def default_duration(art, q_start, q_goal):
    rate = SECONDS_PER_RAD if art.joint_type == "revolute" else SECONDS_PER_M
    return max(abs(q_goal - q_start) * rate, 1e-3)


def generate_keyframes(art, grasp, q_start, q_goal, N=20, duration=None):
    """Sweep the grasp frame along the joint in N uniformly spaced keyframes."""
    lo, hi = art.q_limits
    for name, q in (("q_start", q_start), ("q_goal", q_goal)):
        if not lo - 1e-12 <= q <= hi + 1e-12:
            raise ValueError(f"{name}={q} outside articulation limits [{lo}, {hi}]")
    if N < 2:
        raise ValueError("need at least two keyframes")
    if duration is None:
        duration = default_duration(art, q_start, q_goal)
    if not duration > 0:
        raise ValueError("duration must be positive")
    G = grasp.matrix()
    qs = q_start + np.arange(N) * (q_goal - q_start) / (N - 1)
    times = np.arange(N) * duration / (N - 1)
    poses = [Pose.from_matrix(art.displacement(q - q_start) @ G) for q in qs]
    return KinematicPlan(times, poses, art, grasp, qs)


def handle_grasp_pose(p0, p1, normal, s=0.5):
    """Grasp frame on a handle segment.

    x (approach) = -normal, y along the handle, z = x cross y. The handle
    direction sign is fixed so a vertical handle's y points up and a
    horizontal handle's z points up.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    seg = p1 - p0
    L = np.linalg.norm(seg)
    if L < 1e-9:
        raise ValueError("handle endpoints coincide")
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise ValueError("face normal is zero")
    n = n / nn
    h = seg / L
    h = h - np.dot(h, n) * n
    hn = np.linalg.norm(h)
    if hn < 1e-6:
        raise ValueError("face normal is parallel to the handle")
    h = h / hn
    x = -n
    if abs(h[2]) > 0.7:
        if h[2] < 0:
            h = -h
    elif np.cross(x, h)[2] < 0:
        h = -h
    z = np.cross(x, h)
    R = np.column_stack([x, h, z])
    # re-orthonormalize against rounding
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return Pose.from_rotation(p0 + s * seg, R)


# ------------------------------------------------------------- RANSAC
def fit_plane_ransac(points, threshold=0.01, iterations=300, seed=0, min_inlier_frac=0.4):
    """Returns (normal, centroid, inlier mask). Normal sign is arbitrary."""
    P = np.asarray(points, dtype=np.float64)
    if P.shape[0] < 3:
        raise EstimationError("too few points for a plane fit")
    c = P.mean(axis=0)
    sv = np.linalg.svd(P - c, compute_uv=False)
    if sv[1] < 1e-9 * max(1.0, sv[0]):
        raise EstimationError("degenerate point set")
    rng = np.random.default_rng(seed)
    best = None
    best_count = -1
    for _ in range(iterations):
        i = rng.choice(P.shape[0], 3, replace=False)
        a, b, d = P[i]
        n = np.cross(b - a, d - a)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n /= nn
        mask = np.abs((P - a) @ n) < threshold
        cnt = int(mask.sum())
        if cnt > best_count:
            best_count = cnt
            best = mask
    if best is None or best_count < min_inlier_frac * P.shape[0]:
        raise EstimationError("insufficient plane inliers")
    Q = P[best]
    c = Q.mean(axis=0)
    _, sv, Vt = np.linalg.svd(Q - c, full_matrices=False)
    if sv[1] < 1e-9 * max(1.0, sv[0]):
        raise EstimationError("degenerate inlier set")
    n = Vt[2]
    mask = np.abs((P - c) @ n) < threshold
    return n, c, mask


def face_frame(normal):
    """Lateral (viewer's right) and up directions on a face with outward normal."""
    n = np.asarray(normal, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    lat = np.cross(z, n)
    if np.linalg.norm(lat) < 1e-6:
        lat = np.cross(np.array([0.0, 1.0, 0.0]), n)
    lat /= np.linalg.norm(lat)
    up = np.cross(n, lat)
    return lat, up


def estimate_articulation(cloud, category, hints=None, seed=0, iterations=300, threshold=0.01):
    """Articulation model from a cloud of the moving face.

    ``hints``: ``hinge_side`` in {left, right, bottom, top} (viewer's
    perspective), ``q_limits`` and ``q`` of the object.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    hints = dict(hints or {})
    P = cloud.world_points()
    if P.shape[0] < 50:
        raise EstimationError("need at least 50 points on the moving face")
    n, c, mask = fit_plane_ransac(P, threshold, iterations, seed)
    sensor = cloud.pose.position
    if np.dot(sensor - c, n) < 0:
        n = -n
    lat, up = face_frame(n)
    Q = P[mask] - c
    l = Q @ lat
    u = Q @ up
    l0, l1 = np.percentile(l, [0.5, 99.5])
    u0, u1 = np.percentile(u, [0.5, 99.5])
    lm, um = 0.5 * (l0 + l1), 0.5 * (u0 + u1)
    limits = tuple(hints.get("q_limits", (0.0, 1.0)))
    q = float(hints.get("q", limits[0]))
    if category == "drawer":
        return ArticulationModel("prismatic", n, c + lm * lat + um * up, q, limits, category)
    default_side = {"oven": "bottom", "washing_machine": "left", "cabinet": "left"}[category]
    side = hints.get("hinge_side", default_side)
    if side == "left":
        hinge = c + l0 * lat + um * up
        e = lat
    elif side == "right":
        hinge = c + l1 * lat + um * up
        e = -lat
    elif side == "bottom":
        hinge = c + lm * lat + u0 * up
        e = up
    elif side == "top":
        hinge = c + lm * lat + u1 * up
        e = -up
    else:
        raise ValueError(f"unknown hinge side {side!r}")
    return ArticulationModel("revolute", np.cross(e, n), hinge, q, limits, category)


def synthetic_face_cloud(center, normal, width, height, sensor, n_points=400, noise=0.005,
                         outlier_frac=0.1, seed=0):
    """Noisy samples of a rectangular face plus off-plane clutter, seen from ``sensor``."""
    rng = np.random.default_rng(seed)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    lat, up = face_frame(n)
    m = int(round(n_points * (1 - outlier_frac)))
    a = rng.uniform(-0.5, 0.5, m) * width
    b = rng.uniform(-0.5, 0.5, m) * height
    pts = np.asarray(center) + a[:, None] * lat + b[:, None] * up + rng.normal(0, noise, (m, 3))
    k = n_points - m
    if k:
        # clutter in front of and behind the face
        off = rng.uniform(-0.5, 0.5, (k, 2)) * [width, height]
        depth = rng.choice([-1.0, 1.0], k) * rng.uniform(0.05, 0.3, k)
        clutter = np.asarray(center) + off[:, :1] * lat + off[:, 1:] * up + depth[:, None] * n
        pts = np.vstack([pts, clutter])
    pose = Pose(np.asarray(sensor, dtype=np.float64))
    return PointCloud(pts - pose.position, pose)
