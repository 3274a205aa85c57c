import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from articmpc.geometry import Pose, quat_from_rotvec, quat_mul
from articmpc.mapping import OccupancyGrid, compute_esdf
from articmpc.model import forward_kinematics, load_robot_model
from articmpc.ocp import (CostWeights, PenaltyConfig, ReferenceTrajectory, build_ocp, ee_tracking_cost,
                          env_collision_constraints, evaluate_terms, hinge_penalty, merit, rbf_penalty,
                          self_collision_constraints, stage_cost, stage_cost_gradient, terminal_cost)
from articmpc.ocp import hinge_derivatives, rbf_derivatives

from conftest import random_state
from oracles import chain_fk

PAIR_DOC = """
base {type: diff_drive, height: 0.3}
joint {name: a, type: revolute, parent: base, axis: [0, 0, 1], origin_xyz: [0.5, 0, 0],
       limits_pos: [-3, 3], limit_vel: 1.0}
joint {name: b, type: revolute, parent: a, axis: [0, 0, 1], origin_xyz: [0.5, 0, 0],
       limits_pos: [-3, 3], limit_vel: 1.0}
sphere {frame: base, offset_xyz: [0, 0, 0], radius: 0.1}
sphere {frame: b, offset_xyz: [OFFSET, 0, 0], radius: 0.1}
self_collision_pairs [[0, 1]]
end_effector: b
"""


def ee_reference(model, x, dp=(0, 0, 0), rot=None):
    p = forward_kinematics(model, x)
    q = p.orientation if rot is None else quat_mul(p.orientation, quat_from_rotvec(rot))
    return ReferenceTrajectory.constant(Pose(p.position + np.asarray(dp, float), q))


def unit_weights(model):
    return CostWeights.diagonal(1.0, 1.0, np.ones(model.nu))


def plane_esdf(wall_index=4, shape=(40, 30, 20), d_max=5.0):
    """Occupied slab x < wall_index voxels; distances are linear in x on the free side."""
    g = OccupancyGrid(shape, 0.1, origin=(-1.0, -1.5, 0.0))
    m = np.zeros(g.shape, dtype=bool)
    m[:wall_index] = True
    g.set_occupied(m)
    ext = 0.5 * np.array(shape) * 0.1
    return compute_esdf(g, g.origin + ext, ext, d_max=d_max)


# ----------------------------------------------------------- penalties
def test_rbf_examples():
    assert rbf_penalty(1.0, 1.0, 0.1) == 0.0
    mu, d = 0.7, 0.05
    lower = mu * (0.5 * (((d - 2 * d) / d) ** 2 - 1) - np.log(d))
    assert rbf_penalty(d, mu, d) == pytest.approx(-mu * np.log(d), rel=1e-15)
    assert lower == pytest.approx(-mu * np.log(d), rel=1e-15)
    assert np.isfinite(rbf_penalty(-3.0, mu, d))


def test_rbf_is_c1_at_delta():
    # second-order one-sided differences, each staying on its own branch
    mu, d, h = 0.3, 0.01, 1e-6
    f = lambda z: rbf_penalty(z, mu, d)  # noqa: E731
    right = (-3 * f(d) + 4 * f(d + h) - f(d + 2 * h)) / (2 * h)
    left = (3 * f(d) - 4 * f(d - h) + f(d - 2 * h)) / (2 * h)
    assert abs(left - right) < 1e-6


def test_hinge_examples():
    assert hinge_penalty(0.05, 10.0, 0.05) == 0.0
    assert hinge_penalty(0.04, 2.0, 0.05) == pytest.approx(1e-4, rel=1e-12)
    d1, d2 = hinge_derivatives(3.0, 10.0, 0.05)
    assert hinge_penalty(3.0, 10.0, 0.05) == 0.0 and d1 == 0.0 and d2 == 0.0


def _fd(f, z, h=1e-6):
    return (f(z + h) - f(z - h)) / (2 * h)


def test_penalty_derivatives_match_finite_differences():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        mu, d = rng.uniform(0.05, 5.0), rng.uniform(0.005, 0.2)
        z = rng.uniform(-0.5, 1.0)
        if abs(z - d) < 1e-3 or z <= 1e-3 and z > d:
            continue
        for fn, der in ((rbf_penalty, rbf_derivatives), (hinge_penalty, hinge_derivatives)):
            d1, d2 = der(z, mu, d)
            fd1 = _fd(lambda s: fn(s, mu, d), z)
            fd2 = _fd(lambda s: der(s, mu, d)[0], z)
            assert abs(d1 - fd1) <= 1e-4 * max(abs(fd1), 1e-3)
            assert abs(d2 - fd2) <= 1e-4 * max(abs(fd2), 1e-3)
        checked += 1


@given(st.floats(-1.0, 2.0), st.floats(0.0, 0.5))
def test_hinge_monotone_nonincreasing(z, step):
    assert hinge_penalty(z + step, 10.0, 0.05) <= hinge_penalty(z, 10.0, 0.05)


@given(st.floats(-1.0, 2.0), st.floats(0.0, 0.5))
def test_rbf_monotone_nonincreasing(z, step):
    assert rbf_penalty(z + step, 0.1, 0.01) <= rbf_penalty(z, 0.1, 0.01)


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(self_delta=0.0)
    with pytest.raises(ValueError):
        PenaltyConfig(hinge_mu=-1.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(np.eye(3), np.eye(3), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        CostWeights(np.array([[1, 2, 0], [0, 1, 0], [0, 0, 1.0]]), np.eye(3), np.eye(8))


def test_ocp_validation(model):
    ref = ReferenceTrajectory.constant(Pose([1, 0, 1]))
    with pytest.raises(ValueError):
        build_ocp(model, ref, horizon=0.0)
    with pytest.raises(ValueError):
        build_ocp(model, ref, self_eps=-0.1)


def test_reference_validation_and_interpolation():
    with pytest.raises(ValueError):
        ReferenceTrajectory([0.0, 0.0], [[0, 0, 0], [1, 0, 0]], [[1, 0, 0, 0]] * 2)
    ref = ReferenceTrajectory([0.0, 2.0], [[0, 0, 0], [1, 0, 0]], [[1, 0, 0, 0], quat_from_rotvec([0, 0, 1.0])])
    p, q = ref.at([1.0, 5.0])
    assert np.allclose(p, [[0.5, 0, 0], [1, 0, 0]])
    assert np.allclose(q[0], quat_from_rotvec([0, 0, 0.5]), atol=1e-12)


# ------------------------------------------------------------ tracking
def test_tracking_examples(model, rng):
    x = random_state(model, rng)
    u = np.zeros(model.nu)
    w = unit_weights(model)
    ocp = build_ocp(model, ee_reference(model, x), weights=w)
    assert ee_tracking_cost(x, u, 0.0, ocp, model) == pytest.approx(0.0, abs=1e-20)
    ocp = build_ocp(model, ee_reference(model, x, dp=(0.1, 0, 0)), weights=w)
    assert ee_tracking_cost(x, u, 0.0, ocp, model) == pytest.approx(0.01, abs=1e-12)
    ocp = build_ocp(model, ee_reference(model, x, rot=(0, 0, np.pi)), weights=w)
    assert ee_tracking_cost(x, u, 0.0, ocp, model) == pytest.approx(np.pi**2, abs=1e-9)


def test_tracking_input_term(model):
    x = model.neutral_state()
    u = np.arange(model.nu) * 0.1
    ocp = build_ocp(model, ee_reference(model, x), weights=unit_weights(model))
    assert ee_tracking_cost(x, u, 0.0, ocp, model) == pytest.approx(0.5 * u @ u, rel=1e-12)


def test_terminal_cost_has_no_input_or_penalty(model):
    x = model.neutral_state()
    ocp = build_ocp(model, ee_reference(model, x, dp=(0, 0.2, 0)), weights=unit_weights(model))
    assert terminal_cost(x, ocp, model) == pytest.approx(0.04, abs=1e-12)


# -------------------------------------------------------- constraints
@pytest.mark.parametrize("offset,h", [(-0.7, 0.05), (-0.85, -0.10)])
def test_self_collision_examples(offset, h):
    m = load_robot_model(PAIR_DOC.replace("OFFSET", str(offset)))
    assert self_collision_constraints(m, np.zeros(m.nx), eps=0.05)[0] == pytest.approx(h, abs=1e-12)


def test_self_collision_matches_brute_force(model, rng):
    names = ["base"] + [j.name for j in model.joints] + ["ee"]
    for _ in range(20):
        x = random_state(model, rng)
        c = []
        for f, off in zip(model.sphere_frame, model.sphere_offset):
            T = chain_fk(model, x, names[f])
            c.append(T[:3, :3] @ off + T[:3, 3])
        c = np.array(c)
        r = model.sphere_radius
        expect = [np.linalg.norm(c[a] - c[b]) - r[a] - r[b] - 0.05 for a, b in model.pairs]
        assert np.allclose(self_collision_constraints(model, x), expect, atol=1e-12)


def test_env_constraints_in_empty_scene(model, rng):
    esdf = compute_esdf(OccupancyGrid((60, 60, 30), 0.1, origin=(-3, -3, 0)), [0, 0, 1.5], [3, 3, 1.5])
    x = model.neutral_state()
    assert np.allclose(env_collision_constraints(model, x, esdf), 2.0 - model.sphere_radius)
    assert 2.0 - 0.15 == pytest.approx(1.85)


def test_env_constraint_at_wall_contact(model):
    esdf = plane_esdf()
    wall = -1.0 + 0.1 * 4 - 0.05  # last occupied voxel centre
    x = model.neutral_state()
    c0 = model.sphere_centers(x)[0][0]
    x[0] += wall + 0.2 - c0[0]  # sphere 0 (r = 0.2) centre at r from the wall
    h = env_collision_constraints(model, x, esdf)[0]
    assert abs(h) <= 0.05
    x[0] -= 0.3
    assert env_collision_constraints(model, x, esdf)[0] < 0


# ---------------------------------------------------------- stage cost
def test_stage_cost_mid_range_residual(model):
    x = model.neutral_state()
    x[3:] = 0.5 * (model.q_lower + model.q_upper)
    u = np.zeros(model.nu)
    ocp = build_ocp(model, ee_reference(model, x))
    esdf = compute_esdf(OccupancyGrid((60, 60, 30), 0.1, origin=(-3, -3, 0)), [0, 0, 1.5], [3, 3, 1.5])
    pen = PenaltyConfig()
    # residual recomputed from the margins directly
    margins = np.concatenate([x[3:] - model.q_lower, model.q_upper - x[3:], u - model.u_lower, model.u_upper - u])
    res = sum(rbf_penalty(z, pen.rbf_mu, pen.joint_delta) for z in margins)
    res += sum(rbf_penalty(h, pen.rbf_mu, pen.self_delta) for h in self_collision_constraints(model, x))
    c = stage_cost(x, u, 0.0, ocp, model, esdf)
    assert c == pytest.approx(res, abs=1e-12)
    assert c < 1e-2


def test_stage_cost_equals_tracking_when_penalties_off(model, rng):
    x = random_state(model, rng)
    u = rng.uniform(-0.5, 0.5, model.nu)
    ocp = build_ocp(model, ee_reference(model, x, dp=(0.1, -0.2, 0.05)), penalties=PenaltyConfig().off())
    assert stage_cost(x, u, 0.0, ocp, model, plane_esdf()) == ee_tracking_cost(x, u, 0.0, ocp, model)


def test_stage_cost_monotone_toward_obstacle(model):
    esdf = plane_esdf()
    x = model.neutral_state()
    ocp = build_ocp(model, ee_reference(model, x))
    costs = []
    for bx in np.linspace(0.5, -0.3, 17):
        y = x.copy()
        y[0] = bx
        costs.append(evaluate_terms(model, ocp, y[None], np.zeros((1, model.nu)), [0.0], esdf=esdf).environment[0])
    assert np.all(np.diff(costs) >= 0) and costs[-1] > 0


def test_stage_cost_gradient_matches_finite_differences(model):
    # planar wall: the distance field is exactly linear on the free side, so the
    # only branch points are the penalty kinks, which are avoided below
    esdf = plane_esdf()
    rng = np.random.default_rng(5)
    ocp = build_ocp(model, ee_reference(model, model.neutral_state(), dp=(0.3, 0.1, -0.2), rot=(0.3, -0.2, 0.5)))
    pen = ocp.penalties
    wall_free = -1.0 + 0.1 * 4 + 0.05 + 0.03  # first free centre plus stencil
    checked = 0
    while checked < 100:
        x = random_state(model, rng, spread=0.6)
        x[0] = rng.uniform(-0.2, 0.4)
        u = rng.uniform(0.8 * model.u_lower, 0.8 * model.u_upper)
        c = model.sphere_centers(x)[0]
        if np.any(c[:, 0] < wall_free):
            continue
        h_env = env_collision_constraints(model, x, esdf)
        h_self = self_collision_constraints(model, x)
        jm = np.concatenate([x[3:] - model.q_lower, model.q_upper - x[3:]])
        if (np.any(np.abs(h_env - pen.hinge_delta) < 1e-3) or np.any(h_self < pen.self_delta + 1e-3)
                or np.any(jm < pen.joint_delta + 1e-3)):
            continue
        gx, gu = stage_cost_gradient(x, u, 0.0, ocp, model, esdf)
        g = np.concatenate([gx, gu])
        fd = np.zeros_like(g)
        eps = 1e-6
        for i in range(model.nx + model.nu):
            dz = np.zeros(model.nx + model.nu)
            dz[i] = eps
            fp = stage_cost(x + dz[:model.nx], u + dz[model.nx:], 0.0, ocp, model, esdf)
            fm = stage_cost(x - dz[:model.nx], u - dz[model.nx:], 0.0, ocp, model, esdf)
            fd[i] = (fp - fm) / (2 * eps)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-6)
        checked += 1


def test_gauss_newton_hessian_is_psd(model, rng):
    ocp = build_ocp(model, ee_reference(model, model.neutral_state(), dp=(0.4, 0, 0)))
    X = np.array([random_state(model, rng) for _ in range(20)])
    terms = evaluate_terms(model, ocp, X, np.zeros((20, model.nu)), np.zeros(20), esdf=plane_esdf(),
                           derivatives=True)
    for H in terms.lxx:
        assert np.linalg.eigvalsh(0.5 * (H + H.T)).min() >= -1e-9


# --------------------------------------------------------------- merit
def test_merit_zero_for_perfect_tracking(model):
    x = model.neutral_state()
    ocp = build_ocp(model, ee_reference(model, x), penalties=PenaltyConfig().off(), horizon=2.0, n_nodes=20)
    X = np.repeat(x[None], 21, axis=0)
    U = np.zeros((20, model.nu))
    total, parts = merit(ocp, model, (X, U))
    assert total == 0.0 and all(v == 0.0 for v in parts.values())


def test_merit_breakdown_partitions_total(model, rng):
    x = random_state(model, rng)
    ocp = build_ocp(model, ee_reference(model, x, dp=(0.5, 0, 0)), horizon=2.0, n_nodes=20)
    X = np.array([x + 0.01 * k for k in range(21)])
    U = rng.uniform(-0.3, 0.3, (20, model.nu))
    total, parts = merit(ocp, model, (X, U), esdf=plane_esdf())
    assert set(parts) == {"tracking", "input", "embodiment", "environment"}
    assert abs(sum(parts.values()) - total) <= 1e-12 * max(1.0, abs(total))


def test_merit_left_riemann_sum(model, rng):
    x = random_state(model, rng)
    ocp = build_ocp(model, ee_reference(model, x, dp=(0.2, 0, 0)), horizon=1.0, n_nodes=4)
    X = np.repeat(x[None], 5, axis=0)
    U = rng.uniform(-0.3, 0.3, (4, model.nu))
    total, _ = merit(ocp, model, (X, U))
    expect = sum(0.25 * stage_cost(X[k], U[k], 0.25 * k, ocp, model) for k in range(4))
    expect += terminal_cost(X[4], ocp, model)
    assert total == pytest.approx(expect, rel=1e-12)


def test_merit_converges_under_refinement(model):
    x0 = model.neutral_state()
    ocp = build_ocp(model, ee_reference(model, x0, dp=(0.3, 0, 0)), horizon=2.0, n_nodes=40)

    def traj(n):
        t = np.linspace(0, 2.0, n + 1)
        X = np.repeat(x0[None], n + 1, axis=0)
        X[:, 0] += 0.2 * np.sin(t)
        X[:, 5] += 0.3 * t
        U = np.zeros((n, model.nu))
        U[:, 0] = 0.2 * np.cos(t[:-1])
        U[:, 4] = 0.3
        return X, U

    a, _ = merit(ocp, model, traj(40))
    b, _ = merit(build_ocp(model, ocp.reference, horizon=2.0, n_nodes=80), model, traj(80))
    assert abs(a - b) < 0.01 * abs(b)
