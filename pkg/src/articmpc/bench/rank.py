"""Ranking grasp options on a handle by the merit of a long-horizon solve."""
from dataclasses import dataclass, replace

import numpy as np

from ..geometry import Pose
from ..mapping import compute_esdf
from ..model import default_model
from ..object_centric import generate_keyframes
from ..ocp import ReferenceTrajectory, build_ocp
from ..simulator import SUCCESS_FRACTION
from ..slq import SolverFailure, SolverSettings, WholeBodyProblem, solve


@dataclass
class RankEntry:
    index: int
    parameter: float
    total: float
    breakdown: dict
    iterations: int
    stalled: bool


def grasp_candidates(n):
    """``n`` grasp parameters spread uniformly along the handle, ends included."""
    if n < 1:
        raise ValueError("need at least one candidate")
    return [0.5] if n == 1 else list(np.linspace(0.0, 1.0, n))


def scene_esdf(scene, oid, center, half_extents=(2.0, 2.0, 1.0), d_max=2.0):
    """ESDF of the static scene geometry with the target's moving link removed."""
    grid = scene.voxelize(exclude_links=(oid,), include_dynamic=False)
    return compute_esdf(grid, center, half_extents, d_max)


def rank_options(scene, candidates, ocp_template=None, t_h=10.0, x0=None, model=None, object_id=None,
                 iterations=10, n_nodes=100, duration=7.0, approach=3.0, n_keyframes=20, goal_margin=0.15,
                 home_joints=(0.0, -1.0, 2.2, 0.0, -1.2, 0.0), esdf=None, solver=None):
    """Solve the task once per grasp candidate and sort by merit.

    Each candidate reference moves the EE from its start pose to the grasp in
    ``approach`` seconds, then sweeps the articulation in ``duration``
    seconds. Ties in merit keep candidate order.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate")
    model = model or default_model()
    oid = object_id or next(iter(scene.objects))
    obj = scene.object(oid)
    art = obj.articulation
    if x0 is None:
        x0 = np.concatenate([scene.spawn[0], home_joints])
    x0 = np.asarray(x0, dtype=np.float64)
    if esdf is None:
        esdf = scene_esdf(scene, oid, [x0[0], x0[1], 1.0])
    T0 = model.fk_all(x0.reshape(1, -1))[0, model.ee_index]
    start = Pose.from_matrix(T0)
    frac = SUCCESS_FRACTION.get(obj.category, 0.6)
    q_goal = min(art.q_max, (frac + goal_margin) * art.q_max)
    settings = solver or SolverSettings()
    settings = replace(settings, horizon=float(t_h), n_nodes=int(n_nodes), max_iterations=int(iterations))
    out = []
    for i, s in enumerate(candidates):
        grasp = obj.grasp_pose(art.q, float(s))
        plan = generate_keyframes(art, grasp, art.q, q_goal, n_keyframes, duration)
        ref = ReferenceTrajectory.from_poses(np.concatenate([[0.0], plan.times + approach]), [start] + plan.poses)
        if ocp_template is None:
            ocp = build_ocp(model, ref, 0.0, t_h, n_nodes)
        else:
            ocp = replace(ocp_template, t_start=0.0, t_final=float(t_h), n_nodes=int(n_nodes), reference=ref)
        problem = WholeBodyProblem(model, ocp, esdf)
        try:
            res = solve(problem, x0, None, settings)
            total, bd = res.merit_history[-1], dict(res.breakdown)
            its, stalled = res.iterations, res.stalled
        except SolverFailure:
            total, bd, its, stalled = np.inf, {}, 0, True
        bd["stalled"] = bool(stalled)
        out.append(RankEntry(i, float(s), float(total), bd, its, bool(stalled)))
    out.sort(key=lambda e: (e.total, e.index))
    return out
