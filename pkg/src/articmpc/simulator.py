"""Deterministic kinematic world with articulated objects and moving obstacles."""
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import yaml

from . import kernels
from .baselines import FootprintChecker
from .geometry import Pose, box_minus, quat_from_matrix, rotation_angle, rpy_matrix, wrap_angle
from .mapping import OccupancyGrid, PointCloud
from .model import default_model, integrate_state
from .object_centric import ArticulationModel, handle_grasp_pose

SUCCESS_FRACTION = {"oven": 0.60, "drawer": 0.65, "washing_machine": 0.75, "cabinet": 0.60}
FREE, GRASPING, SLIPPED = "free", "grasping", "slipped"


class SceneError(ValueError):
    pass


# ------------------------------------------------------------ geometry
@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    name: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half = np.asarray(self.half, dtype=np.float64).reshape(3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        if not (np.all(np.isfinite(self.center)) and np.all(self.half > 0)):
            raise SceneError(f"box {self.name!r} needs finite centre and positive extents")

    def transformed(self, T):
        return Box(T[:3, :3] @ self.center + T[:3, 3], self.half, T[:3, :3] @ self.R, self.name)

    def contains(self, p):
        local = (np.atleast_2d(p) - self.center) @ self.R
        return np.all(np.abs(local) <= self.half, axis=1)

    def distance(self, p):
        """Euclidean distance from points to the box (0 inside)."""
        local = (np.atleast_2d(p) - self.center) @ self.R
        q = np.maximum(np.abs(local) - self.half, 0.0)
        return np.linalg.norm(q, axis=1)


def ray_boxes(origin, dirs, boxes):
    """Nearest positive hit distance per ray against oriented boxes.

    Returns (t, index) with t = inf and index = -1 where nothing is hit.
    """
    dirs = np.atleast_2d(dirs)
    nr = dirs.shape[0]
    if not boxes:
        return np.full(nr, np.inf), np.full(nr, -1)
    C = np.array([b.center for b in boxes])
    H = np.array([b.half for b in boxes])
    R = np.ascontiguousarray([b.R for b in boxes])
    best = np.empty(nr)
    idx = np.empty(nr, dtype=np.int_)
    kernels.ray_boxes(np.ascontiguousarray(origin, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
                      C, H, R, best, idx)
    return best, idx


# ------------------------------------------------------------- scene
@dataclass
class ArticulatedObject:
    id: str
    category: str
    articulation: ArticulationModel
    link: list  # boxes of the moving part at q = 0
    handle: np.ndarray  # (2, 3) at q = 0
    normal: np.ndarray  # outward face normal at q = 0
    hinge_side: str = ""
    face: tuple = None  # (centre, width, height) of the front face at q = 0

    def link_transform(self, q):
        return self.articulation.displacement(q)

    def link_boxes(self, q):
        T = self.link_transform(q)
        return [b.transformed(T) for b in self.link]

    def grasp_pose(self, q=0.0, s=0.5):
        G = handle_grasp_pose(self.handle[0], self.handle[1], self.normal, s).matrix()
        return Pose.from_matrix(self.link_transform(q) @ G)


@dataclass
class DynamicObstacle:
    half: np.ndarray
    waypoints: np.ndarray  # (M, 2) planar goals, cycled
    speed: float
    z: float = 0.5
    random_region: np.ndarray = None  # (2, 2) [lo, hi]; when set, goals are sampled

    def __post_init__(self):
        if self.speed < 0:
            raise SceneError("dynamic obstacle speed must be non-negative")


@dataclass
class Scene:
    name: str
    bounds: np.ndarray  # (2, 3) lower/upper corner of the mapped volume
    boxes: list
    objects: dict
    dynamic: list = field(default_factory=list)
    spawn: np.ndarray = None  # (2, 3): [x, y, yaw] lower / upper
    resolution: float = 0.1

    def object(self, oid):
        try:
            return self.objects[oid]
        except KeyError:
            raise KeyError(f"unknown object id {oid!r}") from None

    def static_boxes(self, state=None, exclude_links=()):
        """All rendered boxes: static, articulated links at their state, obstacles."""
        out = list(self.boxes)
        for oid, obj in self.objects.items():
            if oid in exclude_links:
                continue
            q = 0.0 if state is None else state.obj_q[oid]
            out.extend(obj.link_boxes(q))
        if state is not None:
            for ob, p in zip(self.dynamic, state.dyn_pos):
                out.append(Box([p[0], p[1], ob.z], ob.half, name="dynamic"))
        return out

    def make_grid(self, **kw):
        return OccupancyGrid.from_bounds(self.bounds[0], self.bounds[1], self.resolution, **kw)

    def voxelize(self, state=None, exclude_links=(), include_dynamic=True):
        """Ground-truth occupancy by voxel-centre containment."""
        grid = self.make_grid()
        centers = grid.center_of(np.stack(np.meshgrid(*[np.arange(n) for n in grid.shape], indexing="ij"), -1).reshape(-1, 3))
        occ = np.zeros(len(centers), dtype=bool)
        boxes = self.static_boxes(state, exclude_links)
        if not include_dynamic:
            boxes = [b for b in boxes if b.name != "dynamic"]
        for b in boxes:
            occ |= b.contains(centers)
        grid.set_occupied(occ.reshape(grid.shape))
        return grid


def _box_from(d, name=""):
    if "center" not in d or "size" not in d:
        raise SceneError(f"box {name!r} needs center and size")
    R = rpy_matrix([0.0, 0.0, float(d.get("yaw", 0.0))])
    return Box(d["center"], 0.5 * np.asarray(d["size"], dtype=np.float64), R, d.get("name", name))


def scene_from_dict(data, name="scene"):
    try:
        bounds = np.array([data["bounds"]["lower"], data["bounds"]["upper"]], dtype=np.float64)
    except (KeyError, TypeError):
        raise SceneError("scene needs bounds.lower and bounds.upper") from None
    boxes = [_box_from(b, f"box{i}") for i, b in enumerate(data.get("boxes", []))]
    objects = {}
    for o in data.get("objects", []):
        oid = str(o["id"])
        cat = o["category"]
        j = o["joint"]
        art = ArticulationModel(j["type"], j["axis"], j.get("pivot", [0, 0, 0]), float(j.get("q", 0.0)),
                                tuple(j["limits"]), cat)
        link = [_box_from(b, f"{oid}_link{i}") for i, b in enumerate(o["link"])]
        handle = np.asarray(o["handle"], dtype=np.float64).reshape(2, 3)
        normal = np.asarray(o["normal"], dtype=np.float64)
        normal = normal / np.linalg.norm(normal)
        face = o.get("face")
        if face is not None:
            face = (np.asarray(face["center"], dtype=np.float64), float(face["width"]), float(face["height"]))
        objects[oid] = ArticulatedObject(oid, cat, art, link, handle, normal, o.get("hinge_side", ""), face)
        boxes.extend(_box_from(b, f"{oid}_body{i}") for i, b in enumerate(o.get("body", [])))
    dynamic = []
    for d in data.get("dynamic", []):
        region = d.get("region")
        dynamic.append(DynamicObstacle(0.5 * np.asarray(d["size"], dtype=np.float64),
                                       np.asarray(d.get("waypoints", [[0, 0]]), dtype=np.float64).reshape(-1, 2),
                                       float(d.get("speed", 0.5)), float(d.get("z", 0.5)),
                                       None if region is None else np.asarray(region, dtype=np.float64)))
    spawn = data.get("spawn")
    if spawn is None:
        raise SceneError("scene needs a spawn region")
    spawn = np.array([spawn["lower"], spawn["upper"]], dtype=np.float64)
    return Scene(data.get("name", name), bounds, boxes, objects, dynamic, spawn, float(data.get("resolution", 0.1)))


def load_scene(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise SceneError(f"{path}: scene file must be a mapping")
    return scene_from_dict(data, name=str(path))


# ---------------------------------------------------------- simulation
@dataclass
class SimConfig:
    dt: float = 1.0 / 240.0
    control_period: float = 1.0 / 30.0
    sensor_period: float = 0.2
    clip_min: float = 0.1
    clip_max: float = 8.0
    grasp_pos_tol: float = 0.02
    grasp_ori_tol: float = 0.15
    slip_pos_tol: float = 0.03
    slip_ori_tol: float = math.radians(15.0)
    spring_k: float = 0.5
    damping_b: float = 2.0
    camera_height: float = 0.5
    camera_cols: int = 64
    camera_rows: int = 48

    def __post_init__(self):
        if not self.dt < self.control_period:
            raise ValueError("physics dt must be below the control period")
        if not 0 <= self.clip_min < self.clip_max:
            raise ValueError("sensor clip bounds must satisfy min < max")


@dataclass
class WorldState:
    t: float
    x: np.ndarray
    obj_q: dict
    obj_qd: dict
    grasp: str = FREE
    grasp_obj: str = None
    grasp_rel: np.ndarray = None  # EE pose in the link frame at grasp time
    dyn_pos: list = field(default_factory=list)
    dyn_goal: list = field(default_factory=list)
    dyn_rng: object = None
    slipped: bool = False
    ee_T: np.ndarray = None  # EE transform at t while grasping

    def copy(self):
        return replace(self, x=self.x.copy(), obj_q=dict(self.obj_q), obj_qd=dict(self.obj_qd),
                       dyn_pos=[p.copy() for p in self.dyn_pos], dyn_goal=[g.copy() for g in self.dyn_goal])


def initial_state(scene, x0, seed=0):
    rng = np.random.default_rng([seed, 7919])
    pos, goals = [], []
    for ob in scene.dynamic:
        pos.append(ob.waypoints[0].astype(np.float64).copy())
        goals.append(_next_goal(ob, rng, 0))
    return WorldState(0.0, np.asarray(x0, dtype=np.float64).copy(),
                      {k: o.articulation.q for k, o in scene.objects.items()},
                      {k: 0.0 for k in scene.objects}, dyn_pos=pos, dyn_goal=goals, dyn_rng=rng)


def _next_goal(ob, rng, k):
    if ob.random_region is not None:
        return rng.uniform(ob.random_region[0], ob.random_region[1])
    return ob.waypoints[(k + 1) % len(ob.waypoints)].astype(np.float64).copy()


def _spring_matrix(k, b, dt):
    return scipy.linalg.expm(np.array([[0.0, 1.0], [-k, -b]]) * dt)


_SPRING_CACHE = {}


def ee_matrix(model, x):
    return model.fk_all(np.asarray(x).reshape(1, -1))[0, model.ee_index]


def step_world(scene, state, u, cfg, model=None):
    """Advance one physics step of length ``cfg.dt`` with input ``u`` held."""
    model = default_model() if model is None else model
    s = state.copy()
    dt = cfg.dt
    T_old = None
    if s.grasp == GRASPING:
        T_old = s.ee_T if s.ee_T is not None else ee_matrix(model, s.x)
    s.ee_T = None
    u = np.clip(np.asarray(u, dtype=np.float64), model.u_lower, model.u_upper)
    x = integrate_state(model, s.x, u, dt)
    x[3:] = np.clip(x[3:], model.q_lower, model.q_upper)
    s.x = x
    # moving obstacles
    for i, ob in enumerate(scene.dynamic):
        d = s.dyn_goal[i] - s.dyn_pos[i]
        dist = np.linalg.norm(d)
        stepl = ob.speed * dt
        if dist <= stepl:
            s.dyn_pos[i] = s.dyn_goal[i].copy()
            s.dyn_goal[i] = _next_goal(ob, s.dyn_rng, _goal_index(ob, s.dyn_pos[i]))
        else:
            s.dyn_pos[i] = s.dyn_pos[i] + d * (stepl / dist)
    key = (cfg.spring_k, cfg.damping_b, dt)
    if key not in _SPRING_CACHE:
        _SPRING_CACHE[key] = _spring_matrix(*key)
    Phi = _SPRING_CACHE[key]
    for oid, obj in scene.objects.items():
        lo, hi = obj.articulation.q_limits
        if s.grasp == GRASPING and s.grasp_obj == oid:
            T_new = ee_matrix(model, s.x)
            s.ee_T = T_new
            art = obj.articulation
            q = s.obj_q[oid]
            # displacement of the EE expressed at the closed configuration
            Tinv = np.linalg.inv(art.displacement(q))
            p_old = (Tinv @ np.append(T_old[:3, 3], 1.0))[:3]
            p_new = (Tinv @ np.append(T_new[:3, 3], 1.0))[:3]
            dq = art.joint_coordinate(p_new, p_old)
            qn = float(np.clip(q + dq, lo, hi))
            s.obj_qd[oid] = (qn - q) / dt if lo < qn < hi else 0.0
            s.obj_q[oid] = qn
            rel = np.linalg.inv(obj.link_transform(qn)) @ T_new
            dp = np.linalg.norm(rel[:3, 3] - s.grasp_rel[:3, 3])
            da = rotation_angle(s.grasp_rel[:3, :3].T @ rel[:3, :3])
            if dp > cfg.slip_pos_tol or da > cfg.slip_ori_tol:
                s.grasp = SLIPPED
                s.slipped = True
                s.grasp_obj = None
                s.ee_T = None
        else:
            q, qd = s.obj_q[oid], s.obj_qd[oid]
            q, qd = Phi @ np.array([q, qd])
            if q <= lo or q >= hi:
                q = float(np.clip(q, lo, hi))
                qd = 0.0
            s.obj_q[oid], s.obj_qd[oid] = float(q), float(qd)
    s.t = state.t + dt
    return s


def _goal_index(ob, p):
    if ob.random_region is not None:
        return 0
    d = np.linalg.norm(ob.waypoints - p, axis=1)
    return int(np.argmin(d))


def attempt_grasp(state, scene, oid, model=None, cfg=None, s=0.5):
    """Close the gripper; succeeds when the EE is within tolerance of the handle pose."""
    obj = scene.object(oid)
    model = default_model() if model is None else model
    cfg = SimConfig() if cfg is None else cfg
    if state.grasp == GRASPING:
        return state
    target = obj.grasp_pose(state.obj_q[oid], s)
    T = ee_matrix(model, state.x)
    dp = np.linalg.norm(T[:3, 3] - target.position)
    da = np.linalg.norm(box_minus(target.orientation, quat_from_matrix(T[:3, :3])))
    if dp <= cfg.grasp_pos_tol and da <= cfg.grasp_ori_tol:
        out = state.copy()
        out.grasp = GRASPING
        out.grasp_obj = oid
        out.grasp_rel = np.linalg.inv(obj.link_transform(state.obj_q[oid])) @ T
        return out
    return state


def release(state):
    out = state.copy()
    out.grasp = FREE if out.grasp == GRASPING else out.grasp
    out.grasp_obj = None
    return out


def check_success(state, scene, oid):
    obj = scene.object(oid)
    frac = SUCCESS_FRACTION.get(obj.category, 0.60)
    q_max = obj.articulation.q_limits[1]
    return bool(state.obj_q[oid] >= frac * q_max - 1e-12)


def camera_directions(cfg):
    """Unit ray directions (camera frame, x forward) on the fixed angular grid."""
    cols, rows = cfg.camera_cols, cfg.camera_rows
    step = (math.pi / 2) / cols
    a = (np.arange(cols) - cols // 2) * step
    b = (np.arange(rows) - rows // 2) * step
    A, Bm = np.meshgrid(a, b, indexing="xy")
    d = np.stack([np.cos(Bm) * np.cos(A), np.cos(Bm) * np.sin(A), np.sin(Bm)], axis=-1)
    return d.reshape(-1, 3)


def sensor_pose(state, cfg):
    x = state.x
    return Pose([x[0], x[1], cfg.camera_height], quat_from_matrix(rpy_matrix([0.0, 0.0, x[2]])))


def render_pointcloud(scene, state, pose, cfg, exclude_links=(), n_cameras=4, return_labels=False):
    """Depth returns of ``n_cameras`` sensors spaced evenly in yaw around ``pose``.

    Points are expressed in the frame of ``pose``. Ranges outside the clip
    interval are dropped.
    """
    base = camera_directions(cfg)
    dirs = []
    for c in range(n_cameras):
        yaw = 2.0 * math.pi * c / n_cameras
        Rz = rpy_matrix([0.0, 0.0, yaw])
        dirs.append(base @ Rz.T)
    dirs = np.vstack(dirs)
    world_dirs = dirs @ pose.rotation.T
    boxes = scene.static_boxes(state, exclude_links)
    t, idx = ray_boxes(pose.position, world_dirs, boxes)
    keep = (t >= cfg.clip_min) & (t <= cfg.clip_max)
    pts = dirs[keep] * t[keep, None]
    cloud = PointCloud(pts, pose)
    if return_labels:
        return cloud, [boxes[i].name for i in idx[keep]]
    return cloud


def sample_start_pose(scene, seed, model=None, radius=None, max_attempts=1000, checker=None):
    """Collision-free base pose drawn uniformly from the spawn region."""
    if checker is None:
        if radius is None:
            radius = model.base_radius + 0.05 if model is not None else 0.45
        grid = scene.voxelize(include_dynamic=False)
        occ = grid.occupancy_slice(0.02, 1.2)
        checker = FootprintChecker(occ, grid.origin, grid.resolution, radius)
    rng = np.random.default_rng([seed, 104729])
    lo, hi = scene.spawn
    for _ in range(max_attempts):
        p = rng.uniform(lo, hi)
        if checker.free(p[:2])[0]:
            p[2] = wrap_angle(p[2])
            return p
    raise SceneError(f"no collision-free spawn pose after {max_attempts} attempts")


def geometric_clearance(model, x, boxes):
    """min over spheres and boxes of (distance to box - radius)."""
    c = model.sphere_centers(x)[0]
    if not boxes:
        return np.inf
    d = np.min([b.distance(c) for b in boxes], axis=0)
    return float(np.min(d - model.sphere_radius))
