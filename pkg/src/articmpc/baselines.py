"""Comparison planners: RRT* base navigation, differential-IK whole-body
control, and the fixed-base (arm-only) OCP variant."""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .geometry import box_minus, quat_from_matrix, wrap_angle
from .model import frame_jacobian


class PlanningError(RuntimeError):
    pass


class GoalInCollision(PlanningError):
    pass


class StartInCollision(PlanningError):
    pass


class NoPathFound(PlanningError):
    pass


@dataclass
class BasePath:
    waypoints: np.ndarray  # (M, 3) x, y, theta

    @property
    def length(self):
        if len(self.waypoints) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints[:, :2], axis=0), axis=1)))


class FootprintChecker:
    """Disc footprint test on a 2D occupancy slice.

    A position is free when the distance from its cell centre to the nearest
    occupied cell centre is at least ``radius + res*sqrt(2)``, which bounds
    the distance to any point of an occupied cell. Cells outside the map are
    treated as occupied.
    """

    def __init__(self, occ2d, origin, resolution, radius):
        occ = np.asarray(occ2d, dtype=bool)
        self.origin = np.asarray(origin, dtype=np.float64)[:2]
        self.res = float(resolution)
        self.radius = float(radius)
        padded = np.pad(occ, 1, constant_values=True)
        d2 = kernels.squared_edt(np.ascontiguousarray(padded[:, :, None].astype(np.uint8)))[:, :, 0]
        self.clearance = np.sqrt(d2)[1:-1, 1:-1] * self.res
        self.shape = occ.shape
        self.margin = self.radius + self.res * math.sqrt(2.0)

    @property
    def bounds(self):
        lo = self.origin
        hi = self.origin + np.array(self.shape) * self.res
        return lo, hi

    def free(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))[:, :2]
        idx = np.floor((p - self.origin) / self.res).astype(int)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        out = np.zeros(len(p), dtype=bool)
        ii = idx[inside]
        out[inside] = self.clearance[ii[:, 0], ii[:, 1]] >= self.margin
        return out

    def segments_free(self, a, B):
        """Batched segment test from one point ``a`` to each row of ``B``."""
        a = np.asarray(a, dtype=np.float64)[:2]
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))[:, :2]
        if len(B) == 0:
            return np.zeros(0, dtype=bool)
        L = np.linalg.norm(B - a, axis=1).max()
        n = max(2, int(math.ceil(L / (0.5 * self.res))) + 1)
        s = np.linspace(0.0, 1.0, n)
        pts = a + s[None, :, None] * (B - a)[:, None, :]
        return self.free(pts.reshape(-1, 2)).reshape(len(B), n).all(axis=1)

    def segment_free(self, a, b):
        a = np.asarray(a, dtype=np.float64)[:2]
        b = np.asarray(b, dtype=np.float64)[:2]
        L = np.linalg.norm(b - a)
        n = max(2, int(math.ceil(L / (0.5 * self.res))) + 1)
        s = np.linspace(0.0, 1.0, n)
        return bool(self.free(a + s[:, None] * (b - a)).all())


def rrt_star_plan(checker, start, goal, budget=5000, seed=0, step=0.2, gamma=2.0, goal_bias=0.05,
                  radius_cap=1.0, goal_tol=1e-9, checkpoints=None):
    """RRT* over (x, y) with disc-footprint checks.

    Returns a :class:`BasePath`. With ``checkpoints`` (iteration counts), also
    returns the best path cost observed at each checkpoint.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if not checker.free(goal)[0]:
        raise GoalInCollision("goal position is in collision")
    if not checker.free(start)[0]:
        raise StartInCollision("start position is in collision")
    if np.linalg.norm(goal[:2] - start[:2]) <= goal_tol:
        path = BasePath(np.array([[start[0], start[1], goal[2]]]))
        return (path, {c: 0.0 for c in checkpoints}) if checkpoints else path
    rng = np.random.default_rng(seed)
    lo, hi = checker.bounds
    area = float(np.prod(hi - lo))
    cap = budget + 2
    nodes = np.empty((cap, 2))
    parent = np.full(cap, -1, dtype=int)
    cost = np.zeros(cap)
    children = [[] for _ in range(cap)]
    nodes[0] = start[:2]
    n = 1
    goal_parent = -1
    goal_cost = np.inf
    record = {}
    checkpoints = sorted(checkpoints or [])

    def propagate(i, delta):
        stack = list(children[i])
        while stack:
            j = stack.pop()
            cost[j] -= delta
            stack.extend(children[j])

    def try_goal(i):
        nonlocal goal_parent, goal_cost
        d = np.linalg.norm(goal[:2] - nodes[i])
        if d <= step and cost[i] + d < goal_cost and checker.segment_free(nodes[i], goal[:2]):
            goal_cost = cost[i] + d
            goal_parent = i

    def refresh_goal():
        # costs only decrease under rewiring, so re-evaluating the current parent suffices
        nonlocal goal_cost
        if goal_parent >= 0:
            goal_cost = min(goal_cost, cost[goal_parent] + np.linalg.norm(goal[:2] - nodes[goal_parent]))

    try_goal(0)
    for it in range(1, budget + 1):
        if rng.random() < goal_bias:
            s = goal[:2].copy()
        else:
            s = rng.uniform(lo, hi)
        d = np.linalg.norm(nodes[:n] - s, axis=1)
        near_i = int(np.argmin(d))
        dist = d[near_i]
        if dist < 1e-12:
            pass
        else:
            new = nodes[near_i] + (s - nodes[near_i]) * min(1.0, step / dist)
            if checker.free(new)[0] and checker.segment_free(nodes[near_i], new):
                r = min(radius_cap, max(step, gamma * math.sqrt(area / math.pi) * math.sqrt(math.log(n + 1) / (n + 1))))
                dn = np.linalg.norm(nodes[:n] - new, axis=1)
                near = np.flatnonzero(dn <= r)
                if near_i not in near:
                    near = np.append(near, near_i)
                ok = checker.segments_free(new, nodes[near])
                cand = cost[near] + dn[near]
                cand[~ok] = np.inf
                pick = int(np.argmin(cand))
                best, best_c = int(near[pick]), float(cand[pick])
                k = n
                nodes[k] = new
                parent[k] = best
                cost[k] = best_c
                children[best].append(k)
                n += 1
                for j, okj in zip(near, ok):
                    if j == best or not okj:
                        continue
                    c = best_c + dn[j]
                    if c < cost[j] - 1e-12:
                        children[parent[j]].remove(j)
                        parent[j] = k
                        children[k].append(j)
                        delta = cost[j] - c
                        cost[j] = c
                        propagate(j, delta)
                refresh_goal()
                try_goal(k)
        if checkpoints and it in checkpoints:
            record[it] = goal_cost
    if goal_parent < 0:
        raise NoPathFound(f"no path within {budget} iterations")
    chain = [goal[:2]]
    i = goal_parent
    while i >= 0:
        chain.append(nodes[i].copy())
        i = parent[i]
    pts = np.array(chain[::-1])
    # drop a duplicated goal node
    if len(pts) > 1 and np.linalg.norm(pts[-1] - pts[-2]) < 1e-12:
        pts = np.delete(pts, -2, axis=0)
    heading = np.arctan2(np.diff(pts[:, 1]), np.diff(pts[:, 0]))
    theta = np.concatenate([heading, [goal[2]]])
    path = BasePath(np.column_stack([pts, theta]))
    if checkpoints:
        return path, record
    return path


@dataclass
class PurePursuit:
    """Tracks a BasePath with (v, omega); rotates in place at the end."""

    path: BasePath
    lookahead: float = 0.4
    v_max: float = 0.6
    omega_max: float = 1.0
    pos_tol: float = 0.05
    yaw_tol: float = 0.03
    _seg: int = field(default=0, init=False)

    def command(self, x):
        P = self.path.waypoints
        p = np.asarray(x[:2])
        th = x[2]
        goal = P[-1]
        dg = np.linalg.norm(goal[:2] - p)
        if dg < self.pos_tol or len(P) == 1:
            err = wrap_angle(goal[2] - th)
            if abs(err) < self.yaw_tol:
                return 0.0, 0.0, True
            return 0.0, float(np.clip(2.0 * err, -self.omega_max, self.omega_max)), False
        # advance along the path to the first point beyond the lookahead circle
        target = goal[:2]
        for i in range(self._seg, len(P) - 1):
            a, b = P[i, :2], P[i + 1, :2]
            if np.linalg.norm(b - p) >= self.lookahead:
                self._seg = i
                d = b - a
                L = np.linalg.norm(d)
                target = b
                if L > 1e-12:
                    # circle-segment intersection, farthest along the segment
                    f = a - p
                    A = d @ d
                    B = 2 * f @ d
                    C = f @ f - self.lookahead**2
                    disc = B * B - 4 * A * C
                    if disc >= 0:
                        t = (-B + math.sqrt(disc)) / (2 * A)
                        if 0 <= t <= 1:
                            target = a + t * d
                break
        dx = target - p
        alpha = wrap_angle(math.atan2(dx[1], dx[0]) - th)
        if abs(alpha) > 0.8:
            return 0.0, float(np.clip(2.0 * alpha, -self.omega_max, self.omega_max)), False
        Ld = max(np.linalg.norm(dx), 1e-6)
        v = min(self.v_max, 1.5 * dg) * max(math.cos(alpha), 0.0)
        w = float(np.clip(2.0 * v * math.sin(alpha) / Ld, -self.omega_max, self.omega_max))
        return float(v), w, False


@dataclass
class IkGains:
    damping: float = 0.05
    kp: float = 2.0
    kr: float = 0.5
    activation: float = 0.3
    max_lin: float = 0.5
    max_ang: float = 1.0
    # spheres on the gripper frame must reach the handle, so they do not repel
    exempt_gripper: bool = True


def ik_wbc_step(model, x, target, esdf=None, gains=None):
    """Damped-least-squares velocity IK with sphere repulsion, clamped to limits."""
    g = gains or IkGains()
    x = np.asarray(x, dtype=np.float64)
    if not (np.all(np.isfinite(target.position)) and np.all(np.isfinite(target.orientation))):
        raise ValueError("target pose is not finite")
    X = x.reshape(1, -1)
    T = model.fk_all(X)
    Tee = T[0, model.ee_index]
    ep = target.position - Tee[:3, 3]
    e = box_minus(target.orientation, quat_from_matrix(Tee[:3, :3]))
    eo = -(target.rotation @ e)
    v = g.kp * np.concatenate([ep, eo])
    nl = np.linalg.norm(v[:3])
    if nl > g.max_lin:
        v[:3] *= g.max_lin / nl
    na = np.linalg.norm(v[3:])
    if na > g.max_ang:
        v[3:] *= g.max_ang / na
    J = frame_jacobian(model, x)
    u = J.T @ np.linalg.solve(J @ J.T + g.damping**2 * np.eye(6), v)
    if esdf is not None and len(model.spheres):
        c, Jc = model.point_jacobians(X, T, model.sphere_frame, model.sphere_offset)
        d, grad, _ = esdf.sample(c[0])
        h = d - model.sphere_radius
        G = model.input_map(X)[0]
        active = h < g.activation
        if g.exempt_gripper:
            active &= model.sphere_frame != model.ee_index
        for j in np.flatnonzero(active):
            u += g.kr * (Jc[0, j] @ G).T @ grad[j]
    return np.clip(u, model.u_lower, model.u_upper)


def make_arm_only_ocp(ocp):
    """Copy of ``ocp`` with the base inputs bounded to zero."""
    lo = np.array(ocp.u_lower, dtype=np.float64)
    hi = np.array(ocp.u_upper, dtype=np.float64)
    lo[:2] = 0.0
    hi[:2] = 0.0
    return replace(ocp, u_lower=lo, u_upper=hi)


def pregrasp_base_goal(handle_point, face_normal, distance=0.8):
    """Base pose ``distance`` in front of the handle along the face normal, facing it."""
    n = np.asarray(face_normal, dtype=np.float64)[:2]
    n = n / np.linalg.norm(n)
    p = np.asarray(handle_point, dtype=np.float64)[:2] + distance * n
    return np.array([p[0], p[1], math.atan2(-n[1], -n[0])])
