"""Kinematic model of a differential-drive mobile manipulator.

State ``x = [x_b, y_b, theta_b, q_1..q_n]`` and input
``u = [v, omega, qdot_1..qdot_n]``. The base moves on the floor plane and can
only drive along its heading; the arm joints are velocity controlled.

Model document grammar
----------------------
A model is plain text with one block per line; ``#`` starts a comment and a
line starting with whitespace continues the previous block. Each block is a
keyword followed by a YAML flow value::

    base {type: diff_drive, height: 0.0, v_max: 1.0, omega_max: 1.0}
    joint {name: j1, type: revolute, parent: base, axis: [0, 0, 1],
           origin_xyz: [0.2, 0, 0.45], origin_rpy: [0, 0, 0],
           limits_pos: [-2.9, 2.9], limit_vel: 1.2}
    frame {name: ee, parent: j6, origin_xyz: [0.15, 0, 0]}
    sphere {frame: j2, offset_xyz: [0.15, 0, 0], radius: 0.08}
    self_collision_pairs [[8, 0], [8, 1]]
    end_effector: ee

The base frame is always called ``base``. Each joint creates a frame of the
same name, placed at ``origin`` in its parent and then moved by the joint.
``frame`` blocks add fixed frames. Spheres are indexed in document order.
"""
import functools
from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import Pose, rpy_matrix, skew, wrap_angle

KEYWORDS = ("base", "joint", "frame", "sphere", "self_collision_pairs", "end_effector")


class ModelError(ValueError):
    """Malformed or invalid robot model document."""

    def __init__(self, msg, line=None):
        self.line = line
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)


@dataclass(frozen=True)
class Joint:
    name: str
    type: str
    parent: str
    axis: np.ndarray
    origin: np.ndarray  # 4x4 transform in the parent frame
    lower: float
    upper: float
    vel_limit: float


@dataclass(frozen=True)
class Sphere:
    frame: str
    offset: np.ndarray
    radius: float


@dataclass
class RobotModel:
    """Immutable kinematic description; build with :func:`load_robot_model`."""

    joints: list
    spheres: list
    self_collision_pairs: list
    end_effector: str
    base_height: float = 0.0
    v_max: float = 1.0
    omega_max: float = 1.0
    fixed_frames: dict = field(default_factory=dict)  # name -> (parent, 4x4 origin)

    def __post_init__(self):
        self._build()

    # derived tables, rebuilt whenever the model is constructed
    def _build(self):
        names = ["base"]
        parents = [-1]
        origins = [np.eye(4)]
        joint_of = [-1]
        pending = [(j.name, j.parent, j.origin, i) for i, j in enumerate(self.joints)]
        pending += [(n, p, o, -1) for n, (p, o) in self.fixed_frames.items()]
        index = {"base": 0}
        # topological order; anything left over is a cycle or dangling parent
        while pending:
            progressed = False
            rest = []
            for item in pending:
                name, parent, origin, ji = item
                if parent in index:
                    index[name] = len(names)
                    names.append(name)
                    parents.append(index[parent])
                    origins.append(np.asarray(origin, dtype=np.float64))
                    joint_of.append(ji)
                    progressed = True
                else:
                    rest.append(item)
            pending = rest
            if not progressed:
                missing = sorted({p for _, p, _, _ in pending})
                raise ModelError(f"cycle or unknown parent frame(s): {missing}")
        self.frame_names = names
        self.frame_index = index
        self.frame_parent = np.array(parents)
        self.frame_origin = np.array(origins)
        self.frame_joint = np.array(joint_of)
        n = len(self.joints)
        F = len(names)
        anc = np.zeros((F, n), dtype=bool)
        for f in range(F):
            g = f
            while g >= 0:
                if joint_of[g] >= 0:
                    anc[f, joint_of[g]] = True
                g = parents[g]
        self.ancestors = anc
        self.joint_frame = np.array([index[j.name] for j in self.joints], dtype=int)
        self.joint_axis = np.array([j.axis for j in self.joints]).reshape(n, 3)
        self.joint_revolute = np.array([j.type == "revolute" for j in self.joints], dtype=bool)
        self.sphere_frame = np.array([index[s.frame] for s in self.spheres], dtype=int)
        self.sphere_offset = np.array([s.offset for s in self.spheres]).reshape(-1, 3)
        self.sphere_radius = np.array([s.radius for s in self.spheres], dtype=np.float64)
        self.pairs = np.array(self.self_collision_pairs, dtype=int).reshape(-1, 2)
        self.ee_index = index[self.end_effector]

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def nx(self):
        return 3 + len(self.joints)

    @property
    def nu(self):
        return 2 + len(self.joints)

    @property
    def q_lower(self):
        return np.array([j.lower for j in self.joints])

    @property
    def q_upper(self):
        return np.array([j.upper for j in self.joints])

    @property
    def u_upper(self):
        return np.concatenate([[self.v_max, self.omega_max], [j.vel_limit for j in self.joints]])

    @property
    def u_lower(self):
        return -self.u_upper

    @property
    def base_radius(self):
        """Planar circumscribed radius of the spheres attached to the base."""
        on_base = self.sphere_frame == 0
        if not on_base.any():
            return 0.0
        r = np.linalg.norm(self.sphere_offset[on_base, :2], axis=1) + self.sphere_radius[on_base]
        return float(r.max())

    def frame_id(self, frame):
        if isinstance(frame, (int, np.integer)):
            if not 0 <= frame < len(self.frame_names):
                raise KeyError(f"unknown frame index {frame}")
            return int(frame)
        try:
            return self.frame_index[frame]
        except KeyError:
            raise KeyError(f"unknown frame {frame!r}") from None

    def neutral_state(self):
        q = 0.5 * (self.q_lower + self.q_upper)
        return np.concatenate([np.zeros(3), q])

    # ------------------------------------------------------------------ FK
    def fk_all(self, X):
        """World transforms of every frame, shape (B, F, 4, 4), for states (B, nx)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        B = X.shape[0]
        F = len(self.frame_names)
        T = np.empty((B, F, 4, 4))
        c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
        T[:, 0] = np.eye(4)
        T[:, 0, 0, 0] = c
        T[:, 0, 0, 1] = -s
        T[:, 0, 1, 0] = s
        T[:, 0, 1, 1] = c
        T[:, 0, 0, 3] = X[:, 0]
        T[:, 0, 1, 3] = X[:, 1]
        T[:, 0, 2, 3] = self.base_height
        O, OK, OK2 = self._fk_tables()
        for f in range(1, F):
            j = self.frame_joint[f]
            if j < 0:
                local = self.frame_origin[f]
            else:
                q = X[:, 3 + j]
                local = np.empty((B, 4, 4))
                local[:] = self.frame_origin[f]
                if self.joint_revolute[j]:
                    s_, c_ = np.sin(q)[:, None, None], np.cos(q)[:, None, None]
                    local[:, :3, :3] = O[f] + s_ * OK[f] + (1.0 - c_) * OK2[f]
                else:
                    local[:, :3, 3] += (O[f] @ self.joint_axis[j]) * q[:, None]
            T[:, f] = T[:, self.frame_parent[f]] @ local
        return T

    def _fk_tables(self):
        # origin rotation times the joint's skew terms, per frame
        tab = self.__dict__.get("_fk_cache")
        if tab is None:
            F = len(self.frame_names)
            O = np.array([self.frame_origin[f][:3, :3] for f in range(F)])
            OK = np.zeros((F, 3, 3))
            OK2 = np.zeros((F, 3, 3))
            for f in range(1, F):
                j = self.frame_joint[f]
                if j >= 0:
                    K = skew(self.joint_axis[j])
                    OK[f] = O[f] @ K
                    OK2[f] = O[f] @ K @ K
            tab = (O, OK, OK2)
            self.__dict__["_fk_cache"] = tab
        return tab

    def points(self, T, frames, offsets):
        """World positions of points fixed in frames; T from :meth:`fk_all`."""
        Tf = T[:, frames]
        return np.einsum("bpij,pj->bpi", Tf[..., :3, :3], offsets) + Tf[..., :3, 3]

    def point_jacobians(self, X, T, frames, offsets):
        """Positions (B,P,3) and state Jacobians (B,P,3,nx) of attached points."""
        X = np.atleast_2d(X)
        B = X.shape[0]
        P = len(frames)
        p = self.points(T, frames, offsets)
        J = np.zeros((B, P, 3, self.nx))
        J[:, :, 0, 0] = 1.0
        J[:, :, 1, 1] = 1.0
        # yaw about the vertical through the base origin
        J[:, :, 0, 2] = -(p[..., 1] - X[:, None, 1])
        J[:, :, 1, 2] = p[..., 0] - X[:, None, 0]
        for j in range(self.n_joints):
            mask = self.ancestors[frames, j]
            if not mask.any():
                continue
            fj = self.joint_frame[j]
            a = T[:, fj, :3, :3] @ self.joint_axis[j]
            if self.joint_revolute[j]:
                col = np.cross(a[:, None, :], p - T[:, None, fj, :3, 3])
            else:
                col = np.broadcast_to(a[:, None, :], (B, P, 3))
            J[:, :, :, 3 + j] = col * mask[None, :, None]
        return p, J

    def angular_jacobian(self, T, frame):
        """Angular velocity Jacobian (B,3,nx) of a frame w.r.t. the state rates."""
        B = T.shape[0]
        J = np.zeros((B, 3, self.nx))
        J[:, 2, 2] = 1.0
        for j in range(self.n_joints):
            if self.ancestors[frame, j] and self.joint_revolute[j]:
                J[:, :, 3 + j] = T[:, self.joint_frame[j], :3, :3] @ self.joint_axis[j]
        return J

    def input_map(self, X):
        """G(x) with xdot = G(x) u, shape (B, nx, nu)."""
        X = np.atleast_2d(X)
        B = X.shape[0]
        G = np.zeros((B, self.nx, self.nu))
        G[:, 0, 0] = np.cos(X[:, 2])
        G[:, 1, 0] = np.sin(X[:, 2])
        G[:, 2, 1] = 1.0
        n = self.n_joints
        G[:, 3:, 2:] = np.eye(n)
        return G

    def sphere_centers(self, X):
        T = self.fk_all(X)
        return self.points(T, self.sphere_frame, self.sphere_offset)


# ---------------------------------------------------------------- parsing
def _as_vec(value, n, what, line):
    try:
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise ModelError(f"{what} must be a list of {n} numbers", line) from None
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ModelError(f"{what} must be a list of {n} finite numbers", line)
    return arr


def _origin(body, line):
    T = np.eye(4)
    T[:3, 3] = _as_vec(body.get("origin_xyz", [0, 0, 0]), 3, "origin_xyz", line)
    T[:3, :3] = rpy_matrix(_as_vec(body.get("origin_rpy", [0, 0, 0]), 3, "origin_rpy", line))
    return T


def _blocks(text):
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line[0].isspace():
            if not blocks:
                raise ModelError("continuation line without a block", lineno)
            blocks[-1][1] += " " + line.strip()
            continue
        blocks.append([lineno, line])
    for lineno, line in blocks:
        key, _, rest = line.partition(" ")
        key = key.rstrip(":")
        if ":" in key:
            key, _, extra = key.partition(":")
            rest = extra + " " + rest
        if key not in KEYWORDS:
            raise ModelError(f"unknown keyword {key!r}", lineno)
        try:
            value = yaml.safe_load(rest) if rest.strip() else None
        except yaml.YAMLError as exc:
            raise ModelError(f"cannot parse {key} body: {exc.problem}", lineno) from None
        yield lineno, key, value


def load_robot_model(text):
    """Parse and validate a model document (see module docstring)."""
    base = None
    joints = []
    fixed = {}
    fixed_lines = {}
    spheres = []
    pairs = None
    ee = None
    names = {"base": 0}
    ee_line = pairs_line = None
    for lineno, key, body in _blocks(text):
        if key in ("base", "joint", "frame", "sphere") and not isinstance(body, dict):
            raise ModelError(f"{key} expects a mapping", lineno)
        if key == "base":
            if base is not None:
                raise ModelError("duplicate base block", lineno)
            if body.get("type", "diff_drive") != "diff_drive":
                raise ModelError(f"unsupported base type {body.get('type')!r}", lineno)
            base = body
            for k in ("v_max", "omega_max"):
                if float(body.get(k, 1.0)) <= 0:
                    raise ModelError(f"{k} must be positive", lineno)
        elif key == "joint":
            for k in ("name", "type", "axis", "parent", "limits_pos", "limit_vel"):
                if k not in body:
                    raise ModelError(f"joint missing {k!r}", lineno)
            name = str(body["name"])
            if name in names:
                raise ModelError(f"duplicate frame name {name!r}", lineno)
            names[name] = lineno
            jtype = body["type"]
            if jtype not in ("revolute", "prismatic"):
                raise ModelError(f"joint type must be revolute or prismatic, got {jtype!r}", lineno)
            axis = _as_vec(body["axis"], 3, "axis", lineno)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ModelError(f"joint {name!r} axis is not unit norm", lineno)
            lo, hi = _as_vec(body["limits_pos"], 2, "limits_pos", lineno)
            if not lo < hi:
                raise ModelError(f"joint {name!r} needs lower < upper limit", lineno)
            vel = float(body["limit_vel"])
            if vel <= 0:
                raise ModelError(f"joint {name!r} velocity limit must be positive", lineno)
            joints.append(Joint(name, jtype, str(body["parent"]), axis, _origin(body, lineno), lo, hi, vel))
        elif key == "frame":
            for k in ("name", "parent"):
                if k not in body:
                    raise ModelError(f"frame missing {k!r}", lineno)
            name = str(body["name"])
            if name in names:
                raise ModelError(f"duplicate frame name {name!r}", lineno)
            names[name] = lineno
            fixed[name] = (str(body["parent"]), _origin(body, lineno))
            fixed_lines[name] = lineno
        elif key == "sphere":
            for k in ("frame", "offset_xyz", "radius"):
                if k not in body:
                    raise ModelError(f"sphere missing {k!r}", lineno)
            r = float(body["radius"])
            if not r > 0:
                raise ModelError("sphere radius must be positive", lineno)
            spheres.append((lineno, Sphere(str(body["frame"]), _as_vec(body["offset_xyz"], 3, "offset_xyz", lineno), r)))
        elif key == "self_collision_pairs":
            if pairs is not None:
                raise ModelError("duplicate self_collision_pairs block", lineno)
            pairs = body if body is not None else []
            pairs_line = lineno
        elif key == "end_effector":
            if ee is not None:
                raise ModelError("duplicate end_effector", lineno)
            ee = str(body)
            ee_line = lineno
    if base is None:
        raise ModelError("document has no base block")
    if not joints:
        raise ModelError("document defines no joints")
    if ee is None:
        raise ModelError("document has no end_effector")
    if ee not in names:
        raise ModelError(f"end_effector frame {ee!r} is not defined", ee_line)
    for lineno, s in spheres:
        if s.frame not in names:
            raise ModelError(f"sphere attached to unknown frame {s.frame!r}", lineno)
    pairs = pairs or []
    if not isinstance(pairs, list) or not all(isinstance(p, list) and len(p) == 2 for p in pairs):
        raise ModelError("self_collision_pairs must be a list of [i, j]", pairs_line)
    model = RobotModel(
        joints=joints,
        spheres=[s for _, s in spheres],
        self_collision_pairs=[(int(a), int(b)) for a, b in pairs],
        end_effector=ee,
        base_height=float(base.get("height", 0.0)),
        v_max=float(base.get("v_max", 1.0)),
        omega_max=float(base.get("omega_max", 1.0)),
        fixed_frames=fixed,
    )
    _check_pairs(model, pairs_line)
    return model


def _link_of(model, f):
    """Index of the rigid body a frame belongs to (the nearest joint frame or base)."""
    while f > 0 and model.frame_joint[f] < 0:
        f = model.frame_parent[f]
    return f


def _check_pairs(model, line):
    S = len(model.spheres)
    for a, b in model.pairs:
        if not (0 <= a < S and 0 <= b < S) or a == b:
            raise ModelError(f"collision pair ({a}, {b}) does not reference two spheres", line)
        la = _link_of(model, model.sphere_frame[a])
        lb = _link_of(model, model.sphere_frame[b])
        pa = _link_of(model, model.frame_parent[la]) if la > 0 else -1
        pb = _link_of(model, model.frame_parent[lb]) if lb > 0 else -1
        if la == lb or pa == lb or pb == la:
            raise ModelError(f"collision pair ({a}, {b}) joins the same or adjacent links", line)


def load_robot_model_file(path):
    with open(path) as fh:
        return load_robot_model(fh.read())


def default_model_path():
    from importlib import resources

    return str(resources.files("articmpc") / "data" / "default_robot.model")


@functools.lru_cache(maxsize=1)
def default_model():
    return load_robot_model_file(default_model_path())


# ------------------------------------------------------- functional API
def _check_state(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.nx:
        raise ValueError(f"state has dimension {x.shape[-1]}, model expects {model.nx}")
    return x


def _check_input(model, u):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != model.nu:
        raise ValueError(f"input has dimension {u.shape[-1]}, model expects {model.nu}")
    return u


def forward_kinematics(model, x, frame=None):
    """Pose of ``frame`` (name or index; default end effector) in the world."""
    x = _check_state(model, x)
    f = model.ee_index if frame is None else model.frame_id(frame)
    T = model.fk_all(x.reshape(1, -1))[0, f]
    return Pose.from_matrix(T)


def system_flow(model, x, u):
    """State derivative; broadcasts over leading batch dimensions."""
    x = _check_state(model, x)
    u = _check_input(model, u)
    dx = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (model.nx,)))
    th = x[..., 2]
    dx[..., 0] = u[..., 0] * np.cos(th)
    dx[..., 1] = u[..., 0] * np.sin(th)
    dx[..., 2] = u[..., 1]
    dx[..., 3:] = u[..., 2:]
    return dx


def integrate_state(model, x, u, dt):
    """One RK4 step with the input held constant; batched over leading dims."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = _check_state(model, x)
    u = _check_input(model, u)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    k1 = system_flow(model, x, u)
    k2 = system_flow(model, x + 0.5 * dt * k1, u)
    k3 = system_flow(model, x + 0.5 * dt * k2, u)
    k4 = system_flow(model, x + dt * k3, u)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def frame_jacobian(model, x, frame=None):
    """Geometric Jacobian (6 x nu) of a frame w.r.t. the input vector.

    Rows are linear then angular velocity in the world frame.
    """
    x = _check_state(model, x).reshape(1, -1)
    f = model.ee_index if frame is None else model.frame_id(frame)
    T = model.fk_all(x)
    _, Jp = model.point_jacobians(x, T, np.array([f]), np.zeros((1, 3)))
    Jw = model.angular_jacobian(T, f)
    Js = np.concatenate([Jp[0, 0], Jw[0]], axis=0)
    return Js @ model.input_map(x)[0]
