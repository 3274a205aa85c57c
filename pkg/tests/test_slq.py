from dataclasses import replace

import numpy as np
import pytest

from articmpc.geometry import Pose
from articmpc.model import forward_kinematics, integrate_state
from articmpc.ocp import ReferenceTrajectory, build_ocp
from articmpc.slq import (AffinePolicy, LinearQuadraticProblem, LqApproximation, MpcController, SolverSettings,
                          WholeBodyProblem, backward_pass, evaluate_policy, fd_dynamics, lq_approximation,
                          mpc_step, rollout, solve)

from oracles import lqr_riccati

HOME = np.array([0.0, -1.0, 2.2, 0.0, -1.2, 0.0])


def home_state(model, base=(0.0, 0.0, 0.0)):
    x = np.zeros(model.nx)
    x[:3] = base
    x[3:] = HOME
    return x


def double_integrator(N=30, dt=0.1, seed=0, bounded=False):
    rng = np.random.default_rng(seed)
    A = np.array([[1.0, dt, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, dt], [0, 0, 0, 1.0]])
    B = np.array([[0.5 * dt**2, 0], [dt, 0], [0, 0.5 * dt**2], [0, dt]])
    M = rng.normal(size=(4, 4))
    Q = M @ M.T * 0.1 + np.eye(4)
    R = np.diag(rng.uniform(0.05, 0.5, 2))
    Qf = 10 * np.eye(4)
    kw = {}
    if bounded:
        kw = dict(lower=-np.full(2, 1.5), upper=np.full(2, 1.5), mu=0.01, delta=0.05)
    return LinearQuadraticProblem(A, B, Q, R, Qf, N, **kw), (A, B, Q, R, Qf)


# ------------------------------------------------------------- rollout
def test_rollout_at_rest(model):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])))
    prob = WholeBodyProblem(model, ocp)
    x0 = home_state(model, (0.3, -0.2, 0.4))
    X, U, ok = rollout(prob, x0)
    assert ok and np.all(X == x0)


def test_rollout_straight_drive(model):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])), horizon=4.0, n_nodes=40)
    prob = WholeBodyProblem(model, ocp)
    u = np.zeros((40, model.nu))
    u[:, 0] = 0.5
    X, _, ok = rollout(prob, home_state(model), inputs=u)
    assert ok and X[-1, 0] == pytest.approx(2.0, abs=1e-12) and abs(X[-1, 1]) < 1e-15


def test_zero_gain_policy_matches_open_loop(model, rng):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])), horizon=2.0, n_nodes=20)
    prob = WholeBodyProblem(model, ocp)
    u = rng.uniform(-0.5, 0.5, (20, model.nu))
    x0 = home_state(model)
    a, _, _ = rollout(prob, x0, inputs=u)
    b, _, _ = rollout(prob, x0, policy=(rng.normal(size=(21, model.nx)), u, np.zeros((20, model.nu, model.nx))))
    assert np.array_equal(a, b)


def test_rollout_clamps_inputs(model):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])), horizon=1.0, n_nodes=10)
    prob = WholeBodyProblem(model, ocp)
    _, U, _ = rollout(prob, home_state(model), inputs=np.full((10, model.nu), 5.0))
    assert np.all(U <= model.u_upper) and np.any(U == model.u_upper)


def test_rollout_rejects_nonfinite_start(model):
    prob = WholeBodyProblem(model, build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1]))))
    with pytest.raises(ValueError):
        rollout(prob, np.full(model.nx, np.nan))


# ------------------------------------------------------- linearization
def test_fd_dynamics_exact_on_linear_system(rng):
    prob, (A, B, *_) = double_integrator()
    step = lambda X, U: X @ A.T + U @ B.T  # noqa: E731
    for _ in range(3):
        X = rng.normal(size=(5, 4)) * 10
        U = rng.normal(size=(5, 2)) * 10
        Ad, Bd = fd_dynamics(step, X, U)
        assert np.allclose(Ad, A, atol=1e-9) and np.allclose(Bd, B, atol=1e-9)


def _rk4_jacobians(x, u, dt):
    """Exact derivatives of one RK4 step of the unicycle-plus-joints flow."""
    nx, nu = len(x), len(u)

    def f(x):
        d = np.zeros(nx)
        d[0], d[1], d[2] = u[0] * np.cos(x[2]), u[0] * np.sin(x[2]), u[1]
        d[3:] = u[2:]
        return d

    def fx(x):
        J = np.zeros((nx, nx))
        J[0, 2], J[1, 2] = -u[0] * np.sin(x[2]), u[0] * np.cos(x[2])
        return J

    def fu(x):
        J = np.zeros((nx, nu))
        J[0, 0], J[1, 0], J[2, 1] = np.cos(x[2]), np.sin(x[2]), 1.0
        J[3:, 2:] = np.eye(nu - 2)
        return J

    I = np.eye(nx)
    k1 = f(x)
    x2 = x + 0.5 * dt * k1
    k2 = f(x2)
    x3 = x + 0.5 * dt * k2
    k3 = f(x3)
    x4 = x + dt * k3
    dk1x, dk1u = fx(x), fu(x)
    dk2x = fx(x2) @ (I + 0.5 * dt * dk1x)
    dk2u = fx(x2) @ (0.5 * dt * dk1u) + fu(x2)
    dk3x = fx(x3) @ (I + 0.5 * dt * dk2x)
    dk3u = fx(x3) @ (0.5 * dt * dk2u) + fu(x3)
    dk4x = fx(x4) @ (I + dt * dk3x)
    dk4u = fx(x4) @ (dt * dk3u) + fu(x4)
    A = I + dt / 6 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    B = dt / 6 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return A, B


def test_whole_body_jacobians_match_analytic(model, rng):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])), horizon=1.0, n_nodes=10)
    prob = WholeBodyProblem(model, ocp)
    X = np.array([home_state(model, (rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-3, 3)))
                  for _ in range(11)])
    U = rng.uniform(-1, 1, (10, model.nu))
    A, B = prob.dynamics_derivatives(X, U)
    for k in range(10):
        Ao, Bo = _rk4_jacobians(X[k], U[k], prob.dt)
        assert np.linalg.norm(A[k] - Ao) <= 1e-6 * np.linalg.norm(Ao)
        assert np.linalg.norm(B[k] - Bo) <= 1e-6 * np.linalg.norm(Bo)


def test_quadratized_input_hessians_are_pd(model, rng):
    from articmpc.mapping import OccupancyGrid, compute_esdf

    g = OccupancyGrid((60, 60, 25), 0.1, origin=(-3, -3, 0))
    m = np.zeros(g.shape, dtype=bool)
    m[35:40, 20:40, :12] = True
    g.set_occupied(m)
    esdf = compute_esdf(g, [0, 0, 1.25], [3, 3, 1.25])
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1.0, 0.2, 0.8])), horizon=2.0, n_nodes=20)
    prob = WholeBodyProblem(model, ocp, esdf)
    for _ in range(5):
        X, U, _ = rollout(prob, home_state(model, (rng.uniform(-1, 0.3), rng.uniform(-1, 1), rng.uniform(-3, 3))),
                          inputs=rng.uniform(-0.5, 0.5, (20, model.nu)))
        lq = lq_approximation(prob, X, U)
        assert np.linalg.eigvalsh(lq.Quu).min() >= 1e-6 * (1 - 1e-9)
        assert np.linalg.eigvalsh(0.5 * (lq.Qxx + np.swapaxes(lq.Qxx, 1, 2))).min() >= -1e-9


# ------------------------------------------------------- backward pass
def test_zero_gradients_give_zero_feedforward():
    prob, _ = double_integrator(N=10)
    X = np.zeros((11, 4))
    U = np.zeros((10, 2))
    K, kff, _ = backward_pass(lq_approximation(prob, X, U))
    assert np.all(kff == 0.0) and np.all(np.isfinite(K))


def test_indefinite_input_hessian_is_regularized():
    N, nx, nu = 5, 2, 2
    lq = LqApproximation(A=np.tile(np.eye(nx), (N, 1, 1)), B=np.tile(np.eye(nx, nu), (N, 1, 1)),
                         qx=np.ones((N + 1, nx)), qu=np.ones((N, nu)), Qxx=np.zeros((N + 1, nx, nx)),
                         Quu=np.tile(-np.eye(nu), (N, 1, 1)), Qux=np.zeros((N, nu, nx)))
    K, kff, reg = backward_pass(lq)
    assert reg > 1.0
    assert np.all(np.isfinite(K)) and np.all(np.isfinite(kff))


# ---------------------------------------------------------------- solve
def test_lq_solution_matches_riccati_oracle():
    for seed in range(3):
        prob, (A, B, Q, R, Qf) = double_integrator(seed=seed)
        x0 = np.array([1.0, -0.5, -2.0, 0.3])
        res = solve(prob, x0, settings=SolverSettings(max_iterations=5, tolerance=1e-12))
        assert res.iterations <= 5 and res.alphas[0] == 1.0
        Ks = lqr_riccati(A, B, Q, R, Qf, prob.N)
        x = x0.copy()
        for k in range(prob.N):
            u = Ks[k] @ x
            assert np.allclose(res.U[k], u, atol=1e-6, rtol=0)
            assert np.allclose(res.policy.K[k], Ks[k], atol=1e-6, rtol=0)
            x = A @ x + B @ u


def test_lq_exact_in_one_iteration():
    prob, (A, B, Q, R, Qf) = double_integrator(seed=4)
    res = solve(prob, np.array([0.5, 0.1, -1.0, 0.0]), settings=SolverSettings(max_iterations=1))
    Ks = lqr_riccati(A, B, Q, R, Qf, prob.N)
    assert np.allclose(res.U[0], Ks[0] @ np.array([0.5, 0.1, -1.0, 0.0]), atol=1e-9)


def test_merit_history_non_increasing_on_constrained_instances():
    for seed in range(50):
        prob, _ = double_integrator(N=20, seed=seed, bounded=True)
        rng = np.random.default_rng(100 + seed)
        x0 = rng.normal(size=4) * 3
        res = solve(prob, x0, warm_start=rng.uniform(-1, 1, (20, 2)), settings=SolverSettings(max_iterations=8))
        h = np.array(res.merit_history)
        assert np.all(np.diff(h) <= 0)
        assert np.all(np.abs(res.U) <= 1.5)


def test_merit_non_increasing_whole_body(model):
    from articmpc.mapping import OccupancyGrid, compute_esdf

    g = OccupancyGrid((60, 60, 25), 0.1, origin=(-3, -3, 0))
    m = np.zeros(g.shape, dtype=bool)
    m[28:32, 25:35, :10] = True
    g.set_occupied(m)
    esdf = compute_esdf(g, [0, 0, 1.25], [3, 3, 1.25])
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1.2, 0.4, 0.7], [0.7071, 0, 0.7071, 0])))
    res = solve(WholeBodyProblem(model, ocp, esdf), home_state(model), settings=SolverSettings(max_iterations=8))
    assert np.all(np.diff(res.merit_history) <= 0)
    assert res.merit_history[-1] < res.merit_history[0]


def stationary_ocp(model):
    """On-reference start where every barrier gradient cancels.

    Joints at the centre of symmetric limits, zero inputs between symmetric
    bounds, and no self-collision pairs (their barrier always has a slope).
    """
    x0 = model.neutral_state()
    ocp = build_ocp(model, ReferenceTrajectory.constant(forward_kinematics(model, x0)))
    return x0, replace(ocp, self_pairs=np.zeros((0, 2), dtype=int), self_eps=np.zeros(0))


def test_solve_from_optimum_is_quiet(model):
    x0, ocp = stationary_ocp(model)
    res = solve(WholeBodyProblem(model, ocp), x0)
    assert res.iterations <= 2
    assert np.abs(res.U).max() < 1e-3


def test_point_to_point_reach(model):
    x0 = home_state(model)
    p = forward_kinematics(model, x0)
    target = Pose(p.position + [0.3, 0.2, -0.1], p.orientation)
    ocp = build_ocp(model, ReferenceTrajectory.constant(target), horizon=4.0, n_nodes=40)
    res = solve(WholeBodyProblem(model, ocp), x0, settings=SolverSettings(max_iterations=30))
    end = forward_kinematics(model, res.X[-1]).position
    assert np.linalg.norm(end - target.position) < 0.01


def test_solve_is_deterministic(model):
    x0 = home_state(model)
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1.0, -0.3, 0.9])), horizon=2.0, n_nodes=20)
    a = solve(WholeBodyProblem(model, ocp), x0, settings=SolverSettings(max_iterations=4))
    b = solve(WholeBodyProblem(model, ocp), x0, settings=SolverSettings(max_iterations=4))
    assert np.array_equal(a.policy.K, b.policy.K) and np.array_equal(a.policy.u_ff, b.policy.u_ff)


def test_warm_start_from_converged_solution(model):
    x0 = home_state(model)
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1.0, 0.3, 0.9])), horizon=2.0, n_nodes=20)
    s = SolverSettings(max_iterations=40, tolerance=1e-9)
    prob = WholeBodyProblem(model, ocp)
    a = solve(prob, x0, settings=s)
    b = solve(prob, x0, warm_start=a.policy, settings=s)
    assert abs(b.merit_history[-1] - a.merit_history[-1]) <= 1e-6 * max(1.0, a.merit_history[-1])


# ------------------------------------------------------------ policies
def _toy_policy():
    t = np.array([0.0, 1.0, 2.0])
    x = np.array([[0, 0, 0.0], [1, 0, 0.5], [2, 1, 1.0]])
    u = np.array([[0.1, 0.2], [0.3, -0.2], [0.5, 0.0]])
    K = np.array([np.eye(2, 3), 2 * np.eye(2, 3), np.zeros((2, 3))])
    return AffinePolicy(t, x, u, K, -np.ones(2), np.ones(2))


def test_policy_on_nominal_returns_feedforward():
    p = _toy_policy()
    for t in (0.0, 0.25, 1.0, 1.7):
        x, u, _ = p.at(t)
        assert np.allclose(evaluate_policy(p, x, t), u, atol=1e-15)


def test_policy_nodes_and_midpoints():
    p = _toy_policy()
    assert np.array_equal(p.at(1.0)[1], [0.3, -0.2])
    x, u, K = p.at(0.5)
    assert np.allclose(u, [0.2, 0.0]) and np.allclose(K, 1.5 * np.eye(2, 3)) and np.allclose(x, [0.5, 0, 0.25])
    assert np.array_equal(p.at(10.0)[1], [0.5, 0.0])


def test_open_loop_policy_ignores_state():
    p = _toy_policy()
    p.K[:] = 0.0
    assert np.allclose(evaluate_policy(p, [9.0, -3.0, 2.0], 1.5), [0.4, -0.1])


def test_policy_output_is_clamped():
    p = _toy_policy()
    assert np.all(np.abs(evaluate_policy(p, [5.0, 5.0, 0.0], 0.0)) <= 1.0)


def test_policy_rejects_unsorted_times():
    with pytest.raises(ValueError):
        AffinePolicy(np.array([0.0, 0.0]), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2, 3)),
                     -np.ones(2), np.ones(2))


# ------------------------------------------------------------------ MPC
def test_mpc_static_reference_settles(model):
    x, ocp = stationary_ocp(model)
    c = MpcController(model, ocp)
    for k in range(3):
        pol = mpc_step(c, x, k / 30)
    assert np.abs(pol.u_ff).max() < 1e-2


def test_mpc_warm_start_is_shifted_by_one_node(model):
    seen = []
    x = home_state(model)
    p = forward_kinematics(model, x)
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose(p.position + [0.3, 0, 0], p.orientation)))
    c = MpcController(model, ocp, audit_hook=lambda t, X, U: seen.append((t, X, U)))
    first = c.step(x, 0.0)
    c.step(first.x_nom[1], ocp.dt)
    t2, X2, U2 = seen[1]
    assert np.allclose(t2, first.times + ocp.dt)
    assert np.allclose(X2[:-1], first.x_nom[1:], atol=1e-9)
    assert np.allclose(U2[:-1], first.u_ff[1:-1], atol=1e-12)
    assert np.array_equal(U2[-1], first.u_ff[-1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mpc_diverged_rollout_brakes(model):
    ocp = build_ocp(model, ReferenceTrajectory.constant(Pose([1, 0, 1])))
    c = MpcController(model, ocp)
    x = home_state(model)
    x[4] = 1e308
    pol = c.step(x, 0.0)
    assert c.diverged and np.all(pol.u_ff == 0)


def track_line(model, seconds=10.0, rate=30.0, speed=0.1):
    """Closed-loop MPC on a straight EE line; returns the position errors per tick."""
    x = home_state(model)
    p0 = forward_kinematics(model, x)
    T = seconds + 5.0
    ref = ReferenceTrajectory([0.0, T], [p0.position, p0.position + [speed * T, 0, 0]], [p0.orientation] * 2)
    c = MpcController(model, build_ocp(model, ref))
    dt = 1.0 / rate
    errs = []
    for k in range(int(round(seconds * rate))):
        t = k * dt
        u = evaluate_policy(c.step(x, t), x, t)
        x = integrate_state(model, x, u, dt)
        errs.append(np.linalg.norm(forward_kinematics(model, x).position - ref.at(t + dt)[0][0]))
    return np.array(errs)


def test_mpc_tracks_slow_line(model):
    errs = track_line(model, seconds=4.0)
    assert errs[30:].max() < 0.02
