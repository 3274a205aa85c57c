"""Discrete-time SLQ solver and a real-time-iteration MPC wrapper.

The solver works on any object following the small ``problem`` protocol used
by :class:`WholeBodyProblem` and :class:`LinearQuadraticProblem`:

- ``nx``, ``nu``, ``N``, ``dt``, ``lower``, ``upper``, ``frozen``
- ``rollout(x0, u_ff, K, x_nom) -> (X, U, ok)``
- ``dynamics_derivatives(X, U) -> (A, B)``
- ``cost_derivatives(X, U) -> (qx, qu, Qxx, Quu, Qux)`` (terminal row at N)
- ``merit(X, U) -> (total, breakdown)``
"""
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .geometry import wrap_angle
from .model import integrate_state
from .ocp import merit as ocp_merit
from .ocp import trajectory_terms


@dataclass
class SolverSettings:
    horizon: float = 4.0
    n_nodes: int = 40
    max_iterations: int = 15
    tolerance: float = 1e-6
    backtrack: float = 0.5
    alpha_floor: float = 1.0 / 64.0
    reg_init: float = 1e-6
    reg_factor: float = 10.0
    reg_max: float = 1e6
    min_input_eig: float = 1e-6

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be at least 2")
        for k in ("horizon", "max_iterations", "tolerance", "backtrack", "alpha_floor", "reg_init", "reg_factor",
                  "reg_max", "min_input_eig"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if not self.backtrack < 1:
            raise ValueError("backtrack factor must be below 1")

    @property
    def dt(self):
        return self.horizon / self.n_nodes

    def alphas(self):
        a = 1.0
        out = []
        while a >= self.alpha_floor - 1e-15:
            out.append(a)
            a *= self.backtrack
        return out


@dataclass
class AffinePolicy:
    """u(t) = u_ff(t) + K(t) (x - x_nom(t)), linear in t between nodes."""

    times: np.ndarray
    x_nom: np.ndarray
    u_ff: np.ndarray
    K: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    angle_index: int = 2

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.x_nom) == len(self.u_ff) == len(self.K) == n):
            raise ValueError("policy arrays must have equal length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("policy times must be strictly increasing")

    def _interp(self, t):
        n = len(self.times)
        if n == 1 or t <= self.times[0]:
            return 0, 0, 0.0
        if t >= self.times[-1]:
            return n - 1, n - 1, 0.0
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        k = min(k, n - 2)
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, k + 1, s

    def at(self, t):
        """Interpolated (x_nom, u_ff, K) at time t, clamped to the time range."""
        a, b, s = self._interp(float(t))
        if s == 0.0:
            return self.x_nom[a].copy(), self.u_ff[a].copy(), self.K[a].copy()
        xa, xb = self.x_nom[a], self.x_nom[b]
        dx = xb - xa
        if self.angle_index is not None:
            dx[self.angle_index] = wrap_angle(dx[self.angle_index])
        x = xa + s * dx
        if self.angle_index is not None:
            x[self.angle_index] = wrap_angle(x[self.angle_index])
        u = (1 - s) * self.u_ff[a] + s * self.u_ff[b]
        K = (1 - s) * self.K[a] + s * self.K[b]
        return x, u, K

    def __call__(self, x, t):
        return evaluate_policy(self, x, t)


def evaluate_policy(policy, x_meas, t):
    """Affine feedback law at time t, clamped to the input limits."""
    x, u, K = policy.at(t)
    dx = np.asarray(x_meas, dtype=np.float64) - x
    if policy.angle_index is not None:
        dx[policy.angle_index] = wrap_angle(dx[policy.angle_index])
    return np.clip(u + K @ dx, policy.lower, policy.upper)


def braking_policy(x, t, nx, nu, lower, upper, dt=0.1, n=2):
    times = t + dt * np.arange(n)
    return AffinePolicy(times, np.tile(x, (n, 1)), np.zeros((n, nu)), np.zeros((n, nu, nx)),
                        np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64))


@dataclass
class LqApproximation:
    A: np.ndarray
    B: np.ndarray
    qx: np.ndarray
    qu: np.ndarray
    Qxx: np.ndarray
    Quu: np.ndarray
    Qux: np.ndarray


# ------------------------------------------------------------- problems
class WholeBodyProblem:
    """Mobile-manipulator OCP discretized on the node grid of ``ocp``."""

    def __init__(self, model, ocp, esdf=None):
        self.model = model
        self.ocp = ocp
        self.esdf = esdf
        self.nx = model.nx
        self.nu = model.nu
        self.N = ocp.n_nodes
        self.dt = ocp.dt
        self.lower = np.ascontiguousarray(ocp.u_lower, dtype=np.float64)
        self.upper = np.ascontiguousarray(ocp.u_upper, dtype=np.float64)
        self.frozen = ocp.frozen
        self.angle_index = 2

    def state_diff(self, a, b):
        d = np.asarray(a) - np.asarray(b)
        d[..., 2] = wrap_angle(d[..., 2])
        return d

    def rollout(self, x0, u_ff, K, x_nom):
        X = np.empty((self.N + 1, self.nx))
        U = np.empty((self.N, self.nu))
        ok = kernels.rollout_diffdrive(
            np.ascontiguousarray(x0, dtype=np.float64),
            np.ascontiguousarray(u_ff, dtype=np.float64),
            np.ascontiguousarray(K, dtype=np.float64),
            np.ascontiguousarray(x_nom, dtype=np.float64),
            self.lower, self.upper, float(self.dt), X, U,
        )
        return X, U, bool(ok)

    def dynamics_derivatives(self, X, U):
        return fd_dynamics(lambda x, u: integrate_state(self.model, x, u, self.dt), X[:-1], U, angle_index=2)

    def cost_derivatives(self, X, U):
        stage, final = trajectory_terms(self.model, self.ocp, X, U, esdf=self.esdf, derivatives=True)
        dt = self.dt
        N, nx, nu = self.N, self.nx, self.nu
        qx = np.empty((N + 1, nx))
        Qxx = np.empty((N + 1, nx, nx))
        qx[:N] = dt * stage.lx
        Qxx[:N] = dt * stage.lxx
        qx[N] = final.lx[0]
        Qxx[N] = final.lxx[0]
        qu = dt * stage.lu
        Quu = dt * stage.luu
        Qux = np.zeros((N, nu, nx))
        return qx, qu, Qxx, Quu, Qux

    def merit(self, X, U):
        return ocp_merit(self.ocp, self.model, (X, U), self.esdf)


class LinearQuadraticProblem:
    """x+ = A x + B u with cost sum 1/2(x'Qx + u'Ru) + 1/2 x_N' Qf x_N.

    Optional input bounds add relaxed-barrier penalties (weight ``mu``) and
    are enforced by clamping in the rollout.
    """

    def __init__(self, A, B, Q, R, Qf, N, lower=None, upper=None, mu=0.0, delta=0.01, dt=1.0):
        self.Ad = np.asarray(A, dtype=np.float64)
        self.Bd = np.asarray(B, dtype=np.float64)
        self.Q = np.asarray(Q, dtype=np.float64)
        self.R = np.asarray(R, dtype=np.float64)
        self.Qf = np.asarray(Qf, dtype=np.float64)
        self.nx, self.nu = self.Bd.shape
        self.N = int(N)
        self.dt = dt
        self.lower = np.full(self.nu, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
        self.upper = np.full(self.nu, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
        self.frozen = self.lower == self.upper
        self.mu = mu
        self.delta = delta
        self.angle_index = None

    def state_diff(self, a, b):
        return np.asarray(a) - np.asarray(b)

    def rollout(self, x0, u_ff, K, x_nom):
        X = np.empty((self.N + 1, self.nx))
        U = np.empty((self.N, self.nu))
        X[0] = x0
        for k in range(self.N):
            U[k] = np.clip(u_ff[k] + K[k] @ (X[k] - x_nom[k]), self.lower, self.upper)
            X[k + 1] = self.Ad @ X[k] + self.Bd @ U[k]
        return X, U, bool(np.all(np.isfinite(X)))

    def dynamics_derivatives(self, X, U):
        N = self.N
        return np.broadcast_to(self.Ad, (N, self.nx, self.nx)).copy(), np.broadcast_to(self.Bd, (N, self.nx, self.nu)).copy()

    def _barrier(self, U):
        from .ocp import rbf_derivatives, rbf_penalty

        if self.mu <= 0:
            z = np.zeros_like(U)
            return 0.0, z, z
        val = 0.0
        g = np.zeros_like(U)
        h = np.zeros_like(U)
        for side, z in ((1.0, U - self.lower), (-1.0, self.upper - U)):
            fin = np.isfinite(z)
            zz = np.where(fin, z, 1.0)
            val += float(np.sum(np.where(fin, rbf_penalty(zz, self.mu, self.delta), 0.0)))
            d1, d2 = rbf_derivatives(zz, self.mu, self.delta)
            g += np.where(fin, side * d1, 0.0)
            h += np.where(fin, d2, 0.0)
        return val, g, h

    def cost_derivatives(self, X, U):
        N = self.N
        qx = np.empty((N + 1, self.nx))
        Qxx = np.empty((N + 1, self.nx, self.nx))
        qx[:N] = X[:N] @ self.Q
        Qxx[:N] = self.Q
        qx[N] = self.Qf @ X[N]
        Qxx[N] = self.Qf
        _, g, h = self._barrier(U)
        qu = U @ self.R + g
        Quu = np.broadcast_to(self.R, (N, self.nu, self.nu)).copy()
        idx = np.arange(self.nu)
        Quu[:, idx, idx] += h
        return qx, qu, Qxx, Quu, np.zeros((N, self.nu, self.nx))

    def merit(self, X, U):
        track = 0.5 * float(np.einsum("ki,ij,kj->", X[:-1], self.Q, X[:-1]) + X[-1] @ self.Qf @ X[-1])
        inp = 0.5 * float(np.einsum("ki,ij,kj->", U, self.R, U))
        bar, _, _ = self._barrier(U)
        return track + inp + bar, {"tracking": track, "input": inp, "embodiment": bar, "environment": 0.0}


def fd_dynamics(step, X, U, angle_index=None):
    """Central finite-difference Jacobians of ``step(x, u)`` at each node.

    Step size per coordinate is 1e-5 (1 + |z|). Angle differences in the
    output are wrapped.
    """
    N, nx = X.shape
    nu = U.shape[1]
    hx = 1e-5 * (1.0 + np.abs(X))
    hu = 1e-5 * (1.0 + np.abs(U))
    m = 2 * (nx + nu)
    Xb = np.repeat(X[:, None, :], m, axis=1)
    Ub = np.repeat(U[:, None, :], m, axis=1)
    ix = np.arange(nx)
    iu = np.arange(nu)
    Xb[:, ix, ix] += hx
    Xb[:, nx + ix, ix] -= hx
    Ub[:, 2 * nx + iu, iu] += hu
    Ub[:, 2 * nx + nu + iu, iu] -= hu
    out = step(Xb.reshape(-1, nx), Ub.reshape(-1, nu)).reshape(N, m, nx)
    dA = out[:, :nx] - out[:, nx:2 * nx]
    dB = out[:, 2 * nx:2 * nx + nu] - out[:, 2 * nx + nu:]
    if angle_index is not None:
        dA[..., angle_index] = wrap_angle(dA[..., angle_index])
        dB[..., angle_index] = wrap_angle(dB[..., angle_index])
    A = np.swapaxes(dA / (2.0 * hx[:, :, None]), 1, 2)
    B = np.swapaxes(dB / (2.0 * hu[:, :, None]), 1, 2)
    return A, B


# --------------------------------------------------------------- solver
def rollout(problem, x0, inputs=None, policy=None):
    """Forward simulation with an input sequence (N, nu) or an affine policy."""
    N, nx, nu = problem.N, problem.nx, problem.nu
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state is not finite")
    if policy is not None:
        x_nom, u_ff, K = policy
    else:
        u_ff = np.zeros((N, nu)) if inputs is None else np.asarray(inputs, dtype=np.float64)
        K = np.zeros((N, nu, nx))
        x_nom = np.zeros((N + 1, nx))
    return problem.rollout(x0, u_ff, K, x_nom)


def lq_approximation(problem, X, U, settings=None):
    settings = settings or SolverSettings()
    A, B = problem.dynamics_derivatives(X, U)
    qx, qu, Qxx, Quu, Qux = problem.cost_derivatives(X, U)
    fr = np.asarray(problem.frozen, dtype=bool)
    if fr.any():
        B[:, :, fr] = 0.0
        qu[:, fr] = 0.0
        Qux[:, fr, :] = 0.0
        keep = Quu[:, fr][:, :, fr].copy()
        Quu[:, fr, :] = 0.0
        Quu[:, :, fr] = 0.0
        Quu[:, np.flatnonzero(fr)[:, None], np.flatnonzero(fr)[None, :]] = keep
    Quu = 0.5 * (Quu + np.swapaxes(Quu, 1, 2))
    ev = np.linalg.eigvalsh(Quu).min(axis=1)
    shift = np.maximum(settings.min_input_eig - ev, 0.0)
    Quu = Quu + shift[:, None, None] * np.eye(problem.nu)
    for arr in (A, B, qx, qu, Qxx, Quu):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite derivatives in LQ approximation")
    return LqApproximation(A, B, qx, qu, Qxx, Quu, Qux)


class SolverFailure(RuntimeError):
    pass


def backward_pass(lq, settings=None):
    """Riccati sweep; returns (K, kff, regularization used)."""
    settings = settings or SolverSettings()
    N, nx, nu = lq.B.shape
    K = np.zeros((N, nu, nx))
    kff = np.zeros((N, nu))
    c = np.ascontiguousarray
    ok, reg = kernels.riccati_backward(
        c(lq.A), c(lq.B), c(lq.qx), c(lq.qu), c(lq.Qxx), c(lq.Quu), c(lq.Qux),
        settings.reg_init, settings.reg_factor, settings.reg_max, K, kff,
    )
    if not ok:
        raise SolverFailure("input Hessian indefinite after maximum regularization")
    return K, kff, reg


def _policy_from(problem, t0, X, U, K):
    N = problem.N
    times = t0 + problem.dt * np.arange(N + 1)
    u_ff = np.vstack([U, U[-1:]])
    KK = np.concatenate([K, K[-1:]], axis=0)
    return AffinePolicy(times, X.copy(), u_ff, KK, problem.lower.copy(), problem.upper.copy(),
                        angle_index=problem.angle_index)


@dataclass
class SolveResult:
    policy: AffinePolicy
    X: np.ndarray
    U: np.ndarray
    merit_history: list
    breakdown: dict
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    alphas: list = field(default_factory=list)
    regularization: list = field(default_factory=list)


def iterate(problem, x0, X, U, J, settings):
    """One SLQ iteration around (X, U). Returns (X, U, J, K, alpha, reg) or alpha=0 if no decrease."""
    lq = lq_approximation(problem, X, U, settings)
    K, kff, reg = backward_pass(lq, settings)
    for a in settings.alphas():
        Xn, Un, ok = problem.rollout(x0, U + a * kff, K, X)
        if not ok:
            continue
        Jn, _ = problem.merit(Xn, Un)
        if Jn < J:
            return Xn, Un, Jn, K, a, reg
    return X, U, J, K, 0.0, reg


def solve(problem, x0, warm_start=None, settings=None, t0=0.0):
    """SLQ iterations until merit decrease drops below tolerance.

    ``warm_start`` may be an :class:`AffinePolicy` (its node values are used
    directly) or an input sequence (N, nu).
    """
    settings = settings or SolverSettings()
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state is not finite")
    N, nx, nu = problem.N, problem.nx, problem.nu
    if isinstance(warm_start, AffinePolicy):
        X, U, ok = problem.rollout(x0, warm_start.u_ff[:N], warm_start.K[:N], warm_start.x_nom[:N + 1])
        Klast = warm_start.K[:N].copy()
    else:
        u0 = np.zeros((N, nu)) if warm_start is None else np.asarray(warm_start, dtype=np.float64)
        X, U, ok = problem.rollout(x0, u0, np.zeros((N, nu, nx)), np.zeros((N + 1, nx)))
        Klast = np.zeros((N, nu, nx))
    if not ok:
        raise SolverFailure("initial rollout diverged")
    J, bd = problem.merit(X, U)
    history = [J]
    res = SolveResult(None, X, U, history, bd)
    for it in range(settings.max_iterations):
        Xn, Un, Jn, K, a, reg = iterate(problem, x0, X, U, J, settings)
        res.iterations = it + 1
        res.alphas.append(a)
        res.regularization.append(reg)
        Klast = K
        if a == 0.0:
            res.stalled = True
            break
        decrease = J - Jn
        X, U, J = Xn, Un, Jn
        history.append(J)
        if decrease < settings.tolerance * max(1.0, abs(J)):
            res.converged = True
            break
    res.X, res.U = X, U
    res.merit_history = history
    res.policy = _policy_from(problem, t0, X, U, Klast)
    res.breakdown = problem.merit(X, U)[1]
    return res


# ------------------------------------------------------------------ MPC
@dataclass
class StepInfo:
    t: float
    merit: float
    alpha: float
    regularization: float
    iteration_time: float
    diverged: bool = False


class MpcController:
    """Real-time iteration: one SLQ iteration per call, warm-started by time shift."""

    def __init__(self, model, ocp_template, settings=None, audit_hook=None):
        self.model = model
        self.template = ocp_template
        self.settings = settings or SolverSettings(horizon=ocp_template.t_final - ocp_template.t_start,
                                                   n_nodes=ocp_template.n_nodes)
        self.policy = None
        self.audit_hook = audit_hook
        self.log = []
        self.diverged = False

    def reset(self):
        self.policy = None
        self.log = []
        self.diverged = False

    def _shifted(self, times):
        """Previous policy sampled on the new node grid; the tail holds the last input."""
        nx, nu = self.model.nx, self.model.nu
        N = len(times) - 1
        u_ff = np.empty((N, nu))
        K = np.empty((N, nu, nx))
        x_nom = np.empty((N + 1, nx))
        last_u_time = self.policy.times[-2] if len(self.policy.times) > 1 else self.policy.times[-1]
        for k, t in enumerate(times):
            x, u, Kk = self.policy.at(t)
            x_nom[k] = x
            if k < N:
                if t > last_u_time + 1e-12:
                    u_ff[k] = self.policy.u_ff[-1]
                    K[k] = 0.0
                else:
                    u_ff[k] = u
                    K[k] = Kk
        return u_ff, K, x_nom

    def step(self, x_meas, t_now, esdf=None, reference=None):
        tic = time.perf_counter()
        ocp = self.template.shifted(t_now)
        if reference is not None:
            ocp = replace(ocp, reference=reference)
        problem = WholeBodyProblem(self.model, ocp, esdf)
        N, nx, nu = problem.N, problem.nx, problem.nu
        x_meas = np.asarray(x_meas, dtype=np.float64)
        times = ocp.times
        if self.policy is None:
            u_ff, K, x_nom = np.zeros((N, nu)), np.zeros((N, nu, nx)), np.zeros((N + 1, nx))
        else:
            u_ff, K, x_nom = self._shifted(times)
        X, U, ok = problem.rollout(x_meas, u_ff, K, x_nom)
        if self.audit_hook is not None:
            self.audit_hook(times.copy(), X.copy(), U.copy())
        alpha = 0.0
        reg = 0.0
        J = np.nan
        if ok:
            try:
                J, _ = problem.merit(X, U)
                X, U, J, Kn, alpha, reg = iterate(problem, x_meas, X, U, J, self.settings)
            except (SolverFailure, FloatingPointError):
                ok = False
        if not ok:
            self.diverged = True
            self.policy = braking_policy(x_meas, t_now, nx, nu, problem.lower, problem.upper, problem.dt)
        else:
            self.policy = _policy_from(problem, t_now, X, U, Kn)
        self.log.append(StepInfo(float(t_now), float(J), float(alpha), float(reg), time.perf_counter() - tic,
                                 diverged=not ok))
        return self.policy


def mpc_step(controller, x_meas, t_now, esdf=None, reference=None):
    return controller.step(x_meas, t_now, esdf, reference)
