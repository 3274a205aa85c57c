import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from articmpc.model import (ModelError, forward_kinematics, frame_jacobian, integrate_state, load_robot_model,
                            system_flow)

from conftest import random_state
from oracles import chain_fk

ONE_JOINT = """
base {type: diff_drive, height: 0.0}
joint {name: j1, type: revolute, parent: base, axis: [0, 0, 1], origin_xyz: [0, 0, 0],
       limits_pos: [-3, 3], limit_vel: 1.0}
frame {name: tip, parent: j1, origin_xyz: [1.0, 0, 0]}
end_effector: tip
"""

TWO_LINKS = """
base {type: diff_drive, height: 0.3}
joint {name: a, type: revolute, parent: base, axis: [0, 0, 1], origin_xyz: [0.5, 0, 0],
       limits_pos: [-3, 3], limit_vel: 1.0}
joint {name: b, type: revolute, parent: a, axis: [0, 0, 1], origin_xyz: [0.5, 0, 0],
       limits_pos: [-3, 3], limit_vel: 1.0}
end_effector: b
"""

UPRIGHT = """
base {type: diff_drive, height: 0.0}
joint {name: lift, type: prismatic, parent: base, axis: [0, 0, 1], origin_xyz: [0, 0, 0.5],
       limits_pos: [0, 1], limit_vel: 0.5}
frame {name: top, parent: lift, origin_xyz: [0, 0, 0.4]}
end_effector: top
"""


def test_minimal_document():
    m = load_robot_model(ONE_JOINT)
    assert (m.n_joints, m.nx, m.nu) == (1, 4, 3)


def test_default_model_dimensions(model):
    assert (model.nx, model.nu, model.n_joints) == (9, 8, 6)


def test_duplicate_joint_name_rejected():
    text = ONE_JOINT.replace("frame {name: tip, parent: j1", "joint {name: j1, type: revolute, parent: base, "
                             "axis: [0,0,1], limits_pos: [-1,1], limit_vel: 1}\nframe {name: tip, parent: j1")
    with pytest.raises(ModelError, match="duplicate"):
        load_robot_model(text)


def test_non_unit_axis_rejected_with_line():
    with pytest.raises(ModelError, match=r"line 3: .*unit"):
        load_robot_model(ONE_JOINT.replace("axis: [0, 0, 1]", "axis: [0, 0, 2]"))


def test_cycle_rejected():
    text = """
base {type: diff_drive}
joint {name: a, type: revolute, parent: b, axis: [0,0,1], limits_pos: [-1,1], limit_vel: 1}
joint {name: b, type: revolute, parent: a, axis: [0,0,1], limits_pos: [-1,1], limit_vel: 1}
end_effector: a
"""
    with pytest.raises(ModelError, match="cycle"):
        load_robot_model(text)


def test_parse_error_reports_line():
    with pytest.raises(ModelError, match="line 2"):
        load_robot_model("base {type: diff_drive}\njoint {name: [unclosed\n")


def test_adjacent_self_collision_pair_rejected():
    text = TWO_LINKS + "sphere {frame: a, offset_xyz: [0,0,0], radius: 0.1}\n" \
                       "sphere {frame: b, offset_xyz: [0,0,0], radius: 0.1}\nself_collision_pairs [[0, 1]]\n"
    with pytest.raises(ModelError, match="adjacent"):
        load_robot_model(text)


def test_two_link_chain_at_zero():
    m = load_robot_model(TWO_LINKS)
    p = forward_kinematics(m, np.zeros(m.nx))
    assert np.allclose(p.position, [1.0, 0.0, 0.3])
    assert np.allclose(p.orientation, [1, 0, 0, 0])


def test_unknown_frame():
    m = load_robot_model(TWO_LINKS)
    with pytest.raises(KeyError):
        forward_kinematics(m, np.zeros(m.nx), "nope")


def test_fk_frozen_value(model):
    # oracle: scipy-composed homogeneous chain (tests/oracles.py)
    x = np.array([0.3, -0.2, 0.7, 0.4, -0.8, 1.9, 0.3, -1.1, 0.5])
    p = forward_kinematics(model, x)
    assert np.allclose(p.position, [0.8423773802806557, 0.5603944970910084, 0.5176142457658903], atol=1e-10)
    assert np.allclose(p.orientation, [0.8698969045080277, 0.28176327344151314, 0.13410138056797363,
                                       0.38197598484281436], atol=1e-10)


def test_fk_matches_matrix_chain(model, rng):
    for _ in range(50):
        x = random_state(model, rng)
        for frame in ("j3", "j6", "ee"):
            T = chain_fk(model, x, frame)
            p = forward_kinematics(model, x, frame)
            assert np.allclose(p.position, T[:3, 3], atol=1e-10)
            assert np.allclose(p.rotation, T[:3, :3], atol=1e-10)
            assert abs(np.linalg.norm(p.orientation) - 1.0) < 1e-9


def test_fk_child_equals_parent_times_local(model, rng):
    x = random_state(model, rng)
    T = model.fk_all(x)[0]
    f = model.ee_index
    assert np.allclose(T[f], T[model.frame_parent[f]] @ model.frame_origin[f], atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_base_translation_shifts_ee(dx, dy):
    from articmpc.model import default_model

    m = default_model()
    x = np.array([0.1, 0.2, 0.5, 0.3, -0.7, 1.5, 0.2, -0.9, 0.1])
    y = x.copy()
    y[:2] += [dx, dy]
    a, b = forward_kinematics(m, x), forward_kinematics(m, y)
    assert np.allclose(b.position - a.position, [dx, dy, 0.0], atol=1e-12)
    assert np.allclose(a.orientation, b.orientation, atol=1e-15)


def test_system_flow_examples(model):
    x = np.zeros(model.nx)
    assert np.all(system_flow(model, x, np.zeros(model.nu)) == 0)
    u = np.zeros(model.nu)
    u[0] = 1.0
    assert np.allclose(system_flow(model, x, u)[:2], [1, 0])
    x[2] = np.pi / 2
    assert np.allclose(system_flow(model, x, u)[:2], [0, 1], atol=1e-15)


def test_system_flow_dimension_mismatch(model):
    with pytest.raises(ValueError):
        system_flow(model, np.zeros(4), np.zeros(model.nu))


@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.lists(st.floats(-2, 2), min_size=8, max_size=8))
def test_no_lateral_base_velocity(x, u):
    from articmpc.model import default_model

    m = default_model()
    d = system_flow(m, np.array(x), np.array(u))
    th = x[2]
    assert -d[0] * np.sin(th) + d[1] * np.cos(th) == pytest.approx(0.0, abs=1e-15)


def test_integrate_rest_and_straight_segment(model):
    x = np.zeros(model.nx)
    assert np.array_equal(integrate_state(model, x, np.zeros(model.nu), 0.1), x)
    u = np.zeros(model.nu)
    u[0] = 0.5
    assert integrate_state(model, x, u, 0.1)[0] == 0.05


def test_integrate_rejects_nonfinite(model):
    u = np.zeros(model.nu)
    u[0] = np.nan
    with pytest.raises(ValueError):
        integrate_state(model, np.zeros(model.nx), u, 0.1)


def test_integrate_matches_fine_euler(model):
    # smooth input u(t) held piecewise constant over 0.01 s steps; oracle uses 1000 Euler substeps per step
    x = np.array([0.0, 0.0, 0.3, 0.1, -0.5, 1.0, 0.0, -0.5, 0.0])
    xo = x.copy()
    for k in range(100):
        t = 0.01 * k
        u = np.array([0.4 * np.cos(t), 0.6 * np.sin(2 * t), 0.2, -0.1, 0.3 * t, 0.0, 0.1, -0.2])
        x = integrate_state(model, x, u, 0.01)
        for _ in range(1000):
            xo = xo + 1e-5 * system_flow(model, xo, u)
    xo[2] = np.arctan2(np.sin(xo[2]), np.cos(xo[2]))
    assert np.max(np.abs(x - xo)) < 1e-6


def test_integrate_wraps_heading(model):
    x = np.zeros(model.nx)
    x[2] = 3.1
    u = np.zeros(model.nu)
    u[1] = 1.0
    assert -np.pi < integrate_state(model, x, u, 0.1)[2] < 0


def test_single_joint_jacobian_column():
    m = load_robot_model(ONE_JOINT)
    J = frame_jacobian(m, np.zeros(m.nx))
    assert np.allclose(J[:, 2], [0, 1, 0, 0, 0, 1])


def test_base_yaw_column_above_axis():
    m = load_robot_model(UPRIGHT)
    J = frame_jacobian(m, np.array([0.4, -0.3, 1.0, 0.2]))
    assert np.allclose(J[:, 1], [0, 0, 0, 0, 0, 1], atol=1e-15)
    assert np.allclose(J[:, 2], [0, 0, 1, 0, 0, 0])


def test_jacobian_matches_finite_differences(model, rng):
    h = 1e-6
    for _ in range(20):
        x = random_state(model, rng)
        J = frame_jacobian(model, x)
        for i in range(model.nu):
            u = np.zeros(model.nu)
            u[i] = 1.0
            xp = x + h * system_flow(model, x, u)
            xm = x - h * system_flow(model, x, u)
            pp, pm = forward_kinematics(model, xp), forward_kinematics(model, xm)
            lin = (pp.position - pm.position) / (2 * h)
            Rd = (pp.rotation - pm.rotation) / (2 * h)
            W = Rd @ forward_kinematics(model, x).rotation.T
            ang = np.array([W[2, 1], W[0, 2], W[1, 0]])
            fd = np.concatenate([lin, ang])
            assert np.linalg.norm(J[:, i] - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_jacobian_consistent_with_rollout(model, rng):
    for _ in range(10):
        x = random_state(model, rng)
        u = rng.uniform(-1, 1, model.nu)
        dt = 1e-6
        a = forward_kinematics(model, x).position
        b = forward_kinematics(model, integrate_state(model, x, u, dt)).position
        assert np.linalg.norm(frame_jacobian(model, x)[:3] @ u - (b - a) / dt) < 1e-5
