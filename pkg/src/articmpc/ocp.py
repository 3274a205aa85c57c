"""Optimal control problem: end-effector tracking with soft constraints.

Stage cost

    l(x, u, t) = 1/2 u'R u + e_p'Q_p e_p + e_o'Q_o e_o
                 + sum RBF(joint and input margins) + sum RBF(self-collision h)
                 + sum hinge(environment h)

and terminal cost ``phi(x) = e_p'Q_p e_p + e_o'Q_o e_o`` at the final node.
All constraints are soft. The integral is a left Riemann sum on a uniform grid.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    box_minus,
    canonical_quat,
    matrix_from_quat,
    quat_from_matrix,
    right_jacobian_inverse,
)


# ----------------------------------------------------------- penalties
def rbf_penalty(z, mu, delta):
    """Relaxed log barrier: -mu ln z above delta, quadratic extension below."""
    z = np.asarray(z, dtype=np.float64)
    safe = np.maximum(z, delta)
    out = np.where(
        z >= delta,
        -mu * np.log(safe),
        mu * (0.5 * (((z - 2.0 * delta) / delta) ** 2 - 1.0) - np.log(delta)),
    )
    return out if out.ndim else float(out)


def rbf_derivatives(z, mu, delta):
    """First and second derivative of :func:`rbf_penalty`."""
    z = np.asarray(z, dtype=np.float64)
    safe = np.maximum(z, delta)
    d1 = np.where(z >= delta, -mu / safe, mu * (z - 2.0 * delta) / delta**2)
    d2 = np.where(z >= delta, mu / safe**2, mu / delta**2)
    return d1, d2


def hinge_penalty(z, mu, delta):
    """Squared hinge mu/2 min(0, z - delta)^2."""
    z = np.asarray(z, dtype=np.float64)
    out = 0.5 * mu * np.minimum(0.0, z - delta) ** 2
    return out if out.ndim else float(out)


def hinge_derivatives(z, mu, delta):
    z = np.asarray(z, dtype=np.float64)
    m = np.minimum(0.0, z - delta)
    return mu * m, np.where(z < delta, float(mu), 0.0)


# -------------------------------------------------------------- types
class ReferenceTrajectory:
    """Timed end-effector poses; linear in position, slerp in orientation.

    Queries before the first or after the last knot hold the end pose.
    """

    def __init__(self, times, positions, orientations):
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        q = canonical_quat(np.asarray(orientations, dtype=np.float64).reshape(-1, 4))
        # keep consecutive knots on the same hemisphere for interpolation
        for k in range(1, len(q)):
            if np.dot(q[k - 1], q[k]) < 0:
                q[k] = -q[k]
        self.orientations = q
        if len(self.times) < 1:
            raise ValueError("reference needs at least one knot")
        if len(self.times) != len(self.positions) or len(self.times) != len(self.orientations):
            raise ValueError("reference arrays have different lengths")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("reference times must be strictly increasing")

    @classmethod
    def from_poses(cls, times, poses):
        return cls(times, [p.position for p in poses], [p.orientation for p in poses])

    @classmethod
    def constant(cls, pose, t=0.0):
        return cls([t], [pose.position], [pose.orientation])

    def at(self, t):
        """Positions (M,3) and unit quaternions (M,4) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if len(self.times) == 1:
            return (np.repeat(self.positions, len(t), axis=0), np.repeat(self.orientations, len(t), axis=0))
        tc = np.clip(t, self.times[0], self.times[-1])
        k = np.clip(np.searchsorted(self.times, tc, side="right") - 1, 0, len(self.times) - 2)
        s = (tc - self.times[k]) / (self.times[k + 1] - self.times[k])
        p = self.positions[k] * (1 - s)[:, None] + self.positions[k + 1] * s[:, None]
        q0, q1 = self.orientations[k], self.orientations[k + 1]
        d = np.clip(np.sum(q0 * q1, axis=1), -1.0, 1.0)
        om = np.arccos(d)
        so = np.sin(om)
        lin = so < 1e-9
        safe = np.where(lin, 1.0, so)
        w0 = np.where(lin, 1 - s, np.sin((1 - s) * om) / safe)
        w1 = np.where(lin, s, np.sin(s * om) / safe)
        q = canonical_quat(q0 * w0[:, None] + q1 * w1[:, None])
        return p, q


def _check_psd(M, name, strict=False):
    M = np.asarray(M, dtype=np.float64)
    if not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    ev = np.linalg.eigvalsh(M)
    if (strict and ev.min() <= 0) or ev.min() < -1e-12:
        raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return M


@dataclass(frozen=True)
class CostWeights:
    Q_p: np.ndarray
    Q_o: np.ndarray
    R_u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q_p", _check_psd(self.Q_p, "Q_p"))
        object.__setattr__(self, "Q_o", _check_psd(self.Q_o, "Q_o"))
        object.__setattr__(self, "R_u", _check_psd(self.R_u, "R_u", strict=True))

    @classmethod
    def diagonal(cls, pos, ori, inputs):
        return cls(np.eye(3) * pos, np.eye(3) * ori, np.diag(np.asarray(inputs, dtype=np.float64)))


@dataclass(frozen=True)
class PenaltyConfig:
    rbf_mu: float = 0.1
    joint_delta: float = 0.01
    input_delta: float = 0.01
    self_delta: float = 0.001
    hinge_mu: float = 10.0
    hinge_delta: float = 0.05

    def __post_init__(self):
        for k in ("joint_delta", "input_delta", "self_delta", "hinge_delta"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.rbf_mu < 0 or self.hinge_mu < 0:
            raise ValueError("penalty weights must be non-negative")

    def off(self):
        return replace(self, rbf_mu=0.0, hinge_mu=0.0)


@dataclass(frozen=True)
class OptimalControlProblem:
    t_start: float
    t_final: float
    n_nodes: int
    reference: ReferenceTrajectory
    weights: CostWeights
    penalties: PenaltyConfig
    q_lower: np.ndarray
    q_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    self_pairs: np.ndarray
    self_eps: np.ndarray
    env_spheres: np.ndarray
    equality: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.t_final > self.t_start:
            raise ValueError("horizon end must be after its start")
        if self.n_nodes < 2:
            raise ValueError("need at least two nodes")
        if np.any(np.asarray(self.self_eps) < 0):
            raise ValueError("self-collision thresholds must be non-negative")
        if np.any(np.asarray(self.u_lower) > np.asarray(self.u_upper)):
            raise ValueError("input lower bound above upper bound")

    @property
    def dt(self):
        return (self.t_final - self.t_start) / self.n_nodes

    @property
    def times(self):
        """Node times t_0 .. t_N (N = n_nodes intervals)."""
        return self.t_start + self.dt * np.arange(self.n_nodes + 1)

    @property
    def frozen(self):
        return np.asarray(self.u_lower) == np.asarray(self.u_upper)

    def shifted(self, t_start):
        h = self.t_final - self.t_start
        return replace(self, t_start=float(t_start), t_final=float(t_start) + h)

    def with_reference(self, reference):
        return replace(self, reference=reference)


def default_weights(model, pos=100.0, ori=10.0, base=0.2, arm=0.05):
    r = np.concatenate([[base, base], np.full(model.n_joints, arm)])
    return CostWeights.diagonal(pos, ori, r)


def build_ocp(model, reference, t_start=0.0, horizon=4.0, n_nodes=40, weights=None,
              penalties=None, self_eps=0.05, env_spheres=None):
    P = model.pairs
    eps = np.full(len(P), float(self_eps)) if np.ndim(self_eps) == 0 else np.asarray(self_eps, dtype=np.float64)
    if env_spheres is None:
        env_spheres = np.arange(len(model.spheres))
    return OptimalControlProblem(
        t_start=float(t_start),
        t_final=float(t_start) + float(horizon),
        n_nodes=int(n_nodes),
        reference=reference,
        weights=weights if weights is not None else default_weights(model),
        penalties=penalties if penalties is not None else PenaltyConfig(),
        q_lower=model.q_lower,
        q_upper=model.q_upper,
        u_lower=model.u_lower,
        u_upper=model.u_upper,
        self_pairs=P,
        self_eps=eps,
        env_spheres=np.asarray(env_spheres, dtype=int),
    )


# ------------------------------------------------------- constraints
def self_collision_constraints(model, x, eps=0.05, pairs=None):
    """Margins ||c_a - c_b|| - r_a - r_b - eps for each configured pair."""
    P = model.pairs if pairs is None else np.asarray(pairs, dtype=int).reshape(-1, 2)
    c = model.sphere_centers(np.asarray(x, dtype=np.float64))[0]
    r = model.sphere_radius
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (len(P),))
    dist = np.linalg.norm(c[P[:, 0]] - c[P[:, 1]], axis=1)
    return dist - r[P[:, 0]] - r[P[:, 1]] - eps


def env_collision_constraints(model, x, esdf, spheres=None):
    """Margins SDF(c_j) - r_j for every (or the selected) collision sphere."""
    idx = np.arange(len(model.spheres)) if spheres is None else np.asarray(spheres, dtype=int)
    c = model.sphere_centers(np.asarray(x, dtype=np.float64))[0][idx]
    d, _, _ = esdf.sample(c)
    return d - model.sphere_radius[idx]


# ------------------------------------------------------------- costs
@dataclass
class CostTerms:
    """Per-node cost components and (optionally) Gauss-Newton derivatives."""

    tracking: np.ndarray
    input: np.ndarray
    embodiment: np.ndarray
    environment: np.ndarray
    lx: np.ndarray = None
    lu: np.ndarray = None
    lxx: np.ndarray = None
    luu: np.ndarray = None
    min_env: np.ndarray = None

    @property
    def total(self):
        return self.tracking + self.input + self.embodiment + self.environment


def evaluate_terms(model, ocp, X, U, t, esdf=None, derivatives=False, include_input=True):
    """Batched cost evaluation at states X (M,nx), inputs U (M,nu), times t (M,).

    With ``include_input=False`` only the state terms of the tracking cost
    are evaluated (terminal cost).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    M = X.shape[0]
    nx, nu = model.nx, model.nu
    W = ocp.weights
    pen = ocp.penalties
    T = model.fk_all(X)
    ee = model.ee_index
    p_ref, q_ref = ocp.reference.at(t)

    # tracking
    p = T[:, ee, :3, 3]
    ep = p - p_ref
    R_m = T[:, ee, :3, :3]
    q_m = quat_from_matrix(R_m)
    eo = box_minus(q_ref, q_m)
    tracking = np.einsum("mi,ij,mj->m", ep, W.Q_p, ep) + np.einsum("mi,ij,mj->m", eo, W.Q_o, eo)
    zeros = np.zeros(M)
    inp = zeros.copy()
    emb = zeros.copy()
    env = zeros.copy()
    min_env = np.full(M, np.inf)

    if derivatives:
        lx = np.zeros((M, nx))
        lxx = np.zeros((M, nx, nx))
        _, Jp = model.point_jacobians(X, T, np.array([ee]), np.zeros((1, 3)))
        Jp = Jp[:, 0]
        Jw = model.angular_jacobian(T, ee)
        Jo = right_jacobian_inverse(eo) @ np.swapaxes(R_m, 1, 2) @ Jw
        QJp = W.Q_p @ Jp
        QJo = W.Q_o @ Jo
        lx += 2.0 * np.einsum("mi,mij->mj", ep, QJp) + 2.0 * np.einsum("mi,mij->mj", eo, QJo)
        lxx += 2.0 * (np.swapaxes(Jp, 1, 2) @ QJp + np.swapaxes(Jo, 1, 2) @ QJo)

    mu_b = pen.rbf_mu
    # joint limits
    if mu_b > 0:
        q = X[:, 3:]
        zl = q - ocp.q_lower
        zu = ocp.q_upper - q
        emb += rbf_penalty(zl, mu_b, pen.joint_delta).sum(axis=1)
        emb += rbf_penalty(zu, mu_b, pen.joint_delta).sum(axis=1)
        if derivatives:
            d1l, d2l = rbf_derivatives(zl, mu_b, pen.joint_delta)
            d1u, d2u = rbf_derivatives(zu, mu_b, pen.joint_delta)
            lx[:, 3:] += d1l - d1u
            ix = np.arange(3, nx)
            lxx[:, ix, ix] += d2l + d2u

    if include_input:
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        inp = 0.5 * np.einsum("mi,ij,mj->m", U, W.R_u, U)
        live = ~ocp.frozen
        if derivatives:
            lu = np.einsum("ij,mj->mi", W.R_u, U)
            luu = np.broadcast_to(W.R_u, (M, nu, nu)).copy()
        if mu_b > 0 and live.any():
            zl = (U - ocp.u_lower)[:, live]
            zu = (ocp.u_upper - U)[:, live]
            emb += rbf_penalty(zl, mu_b, pen.input_delta).sum(axis=1)
            emb += rbf_penalty(zu, mu_b, pen.input_delta).sum(axis=1)
            if derivatives:
                d1l, d2l = rbf_derivatives(zl, mu_b, pen.input_delta)
                d1u, d2u = rbf_derivatives(zu, mu_b, pen.input_delta)
                iu = np.flatnonzero(live)
                lu[:, iu] += d1l - d1u
                luu[:, iu, iu] += d2l + d2u
    else:
        lu = luu = None

    S = len(model.spheres)
    need_spheres = (mu_b > 0 and len(ocp.self_pairs)) or (esdf is not None and pen.hinge_mu > 0 and len(ocp.env_spheres))
    if need_spheres and S:
        if derivatives:
            c, Jc = model.point_jacobians(X, T, model.sphere_frame, model.sphere_offset)
        else:
            c = model.points(T, model.sphere_frame, model.sphere_offset)
        r = model.sphere_radius

        if mu_b > 0 and len(ocp.self_pairs):
            a, b = ocp.self_pairs[:, 0], ocp.self_pairs[:, 1]
            diff = c[:, a] - c[:, b]
            dist = np.linalg.norm(diff, axis=2)
            h = dist - r[a] - r[b] - ocp.self_eps
            emb += rbf_penalty(h, mu_b, pen.self_delta).sum(axis=1)
            if derivatives:
                n = diff / np.maximum(dist, 1e-12)[..., None]
                gh = np.einsum("mpi,mpij->mpj", n, Jc[:, a] - Jc[:, b])
                d1, d2 = rbf_derivatives(h, mu_b, pen.self_delta)
                lx += np.einsum("mp,mpj->mj", d1, gh)
                lxx += np.einsum("mp,mpi,mpj->mij", d2, gh, gh)

        if esdf is not None and len(ocp.env_spheres):
            js = ocp.env_spheres
            pts = c[:, js].reshape(-1, 3)
            d, g, _ = esdf.sample(pts)
            h = d.reshape(M, len(js)) - r[js]
            min_env = h.min(axis=1)
            if pen.hinge_mu > 0:
                env += hinge_penalty(h, pen.hinge_mu, pen.hinge_delta).sum(axis=1)
                if derivatives:
                    d1, d2 = hinge_derivatives(h, pen.hinge_mu, pen.hinge_delta)
                    active = d2 > 0
                    if active.any():
                        gh = np.einsum("mpi,mpij->mpj", g.reshape(M, len(js), 3), Jc[:, js])
                        lx += np.einsum("mp,mpj->mj", d1, gh)
                        lxx += np.einsum("mp,mpi,mpj->mij", d2, gh, gh)

    out = CostTerms(tracking, inp, emb, env, min_env=min_env)
    if derivatives:
        out.lx, out.lxx, out.lu, out.luu = lx, lxx, lu, luu
    return out


def ee_tracking_cost(x, u, t, ocp, model):
    terms = evaluate_terms(model, ocp, np.atleast_2d(x), np.atleast_2d(u), [t])
    return float(terms.tracking[0] + terms.input[0])


def stage_cost(x, u, t, ocp, model, esdf=None):
    terms = evaluate_terms(model, ocp, np.atleast_2d(x), np.atleast_2d(u), [t], esdf=esdf)
    return float(terms.total[0])


def stage_cost_gradient(x, u, t, ocp, model, esdf=None):
    """Analytic gradient of :func:`stage_cost` w.r.t. (x, u)."""
    terms = evaluate_terms(model, ocp, np.atleast_2d(x), np.atleast_2d(u), [t], esdf=esdf, derivatives=True)
    return terms.lx[0].copy(), terms.lu[0].copy()


def terminal_cost(x, ocp, model):
    terms = evaluate_terms(model, ocp, np.atleast_2d(x), None, [ocp.t_final], include_input=False,
                           esdf=None)
    return float(terms.tracking[0])


def trajectory_terms(model, ocp, X, U, esdf=None, derivatives=False):
    """Stage terms at nodes 0..N-1 and terminal terms at node N."""
    t = ocp.times
    stage = evaluate_terms(model, ocp, X[:-1], U, t[:-1], esdf=esdf, derivatives=derivatives)
    term_ocp = replace(ocp, penalties=ocp.penalties.off())
    final = evaluate_terms(model, term_ocp, X[-1:], None, t[-1:], esdf=None,
                           derivatives=derivatives, include_input=False)
    return stage, final


def merit(ocp, model, trajectory, esdf=None):
    """Total penalized objective with a task/embodiment/environment breakdown."""
    X, U = trajectory
    stage, final = trajectory_terms(model, ocp, np.asarray(X), np.asarray(U), esdf=esdf)
    dt = ocp.dt
    breakdown = {
        "tracking": float(dt * stage.tracking.sum() + final.tracking[0]),
        "input": float(dt * stage.input.sum()),
        "embodiment": float(dt * stage.embodiment.sum()),
        "environment": float(dt * stage.environment.sum()),
    }
    total = breakdown["tracking"] + breakdown["input"] + breakdown["embodiment"] + breakdown["environment"]
    return total, breakdown


def ee_pose_matrix(model, x):
    return model.fk_all(np.atleast_2d(x))[0, model.ee_index]


def pose_error(model, x, pose):
    """Position error (m) and orientation error angle (rad) of the end effector."""
    T = ee_pose_matrix(model, x)
    ep = np.linalg.norm(T[:3, 3] - pose.position)
    eo = np.linalg.norm(box_minus(pose.orientation, quat_from_matrix(T[:3, :3])))
    return float(ep), float(eo)


__all__ = [
    "CostTerms",
    "CostWeights",
    "OptimalControlProblem",
    "PenaltyConfig",
    "ReferenceTrajectory",
    "box_minus",
    "build_ocp",
    "default_weights",
    "ee_tracking_cost",
    "env_collision_constraints",
    "evaluate_terms",
    "hinge_penalty",
    "matrix_from_quat",
    "merit",
    "rbf_penalty",
    "self_collision_constraints",
    "stage_cost",
    "terminal_cost",
    "trajectory_terms",
]
