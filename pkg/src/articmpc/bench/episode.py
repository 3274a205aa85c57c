"""One seeded episode: spawn, sense, plan, approach, grasp, open, evaluate."""
import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..baselines import (FootprintChecker, IkGains, PlanningError, PurePursuit, ik_wbc_step, make_arm_only_ocp,
                         pregrasp_base_goal, rrt_star_plan)
from ..geometry import Pose, quat_from_matrix
from ..mapping import compute_esdf, integrate_pointcloud
from ..model import default_model, load_robot_model_file
from ..object_centric import EstimationError, estimate_articulation, generate_keyframes, synthetic_face_cloud
from ..ocp import CostWeights, PenaltyConfig, ReferenceTrajectory, build_ocp, env_collision_constraints
from ..simulator import (GRASPING, SLIPPED, SUCCESS_FRACTION, SimConfig, attempt_grasp, check_success,
                         geometric_clearance, initial_state, load_scene, render_pointcloud, sample_start_pose,
                         sensor_pose, step_world)
from ..slq import MpcController, SolverSettings, evaluate_policy
from .config import ConfigError, PLANNERS

FAILURE_MODES = ("none", "slippage", "timeout", "solver_stall", "estimation_error")


@dataclass
class EpisodeResult:
    planner: str
    scene: str
    category: str
    seed: int
    success: bool
    failure_mode: str
    time_s: float
    ee_path_m: float
    ee_path_total_m: float
    min_clearance_m: float
    manipulation_onset_s: float
    min_true_clearance_m: float
    log_path: str = ""

    def __post_init__(self):
        if self.failure_mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.failure_mode!r}")
        if self.success != (self.failure_mode == "none"):
            raise ValueError("success must coincide with failure mode 'none'")


RESULT_FIELDS = [f.name for f in fields(EpisodeResult)]

DUMP_HEADER = (["t", "phase", "x_b", "y_b", "theta"] + [f"q{i}" for i in range(1, 7)]
               + ["ee_x", "ee_y", "ee_z", "ee_qw", "ee_qx", "ee_qy", "ee_qz", "obj_q", "min_clearance",
                  "true_clearance", "grasp"])


def sim_config(cfg):
    return SimConfig(**cfg["sim"])


def robot_model(cfg):
    return default_model() if cfg["robot"] is None else load_robot_model_file(cfg["robot"])


def ocp_template(cfg, model, reference):
    o = cfg["ocp"]
    r = np.concatenate([[o["r_base"]] * 2, [o["r_arm"]] * model.n_joints])
    pen = PenaltyConfig(o["rbf_mu"], o["joint_delta"], o["input_delta"], o["self_delta"], o["hinge_mu"],
                        o["hinge_delta"])
    return build_ocp(model, reference, 0.0, o["horizon"], o["n_nodes"], CostWeights.diagonal(o["q_pos"], o["q_ori"], r),
                     pen, o["self_eps"])


def solver_settings(cfg, horizon=None, n_nodes=None, max_iterations=None):
    s = dict(cfg["solver"])
    if max_iterations is not None:
        s["max_iterations"] = max_iterations
    return SolverSettings(horizon=horizon or cfg["ocp"]["horizon"], n_nodes=n_nodes or cfg["ocp"]["n_nodes"], **s)


def pick_object(scene, category):
    for oid, o in scene.objects.items():
        if o.category == category:
            return oid
    raise ConfigError(f"scene {scene.name!r} has no {category} object")


def episode_scene(cfg, seed):
    return cfg["scenes"][seed % len(cfg["scenes"])]


def _path_length(P):
    if len(P) < 2:
        return 0.0
    return float(np.sum(np.sqrt(np.sum(np.diff(P, axis=0) ** 2, axis=1))))


def ee_path_lengths(rows_t, rows_p, onset):
    """(manipulation-phase, total) EE path lengths from logged samples."""
    P = np.asarray(rows_p, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(rows_t, dtype=np.float64)
    total = _path_length(P)
    if onset is None or not math.isfinite(onset):
        return 0.0, total
    return _path_length(P[t >= onset]), total


class EpisodeRunner:
    """Mutable per-episode state; not shared between episodes."""

    def __init__(self, cfg, planner, scene_path, category, seed, model=None):
        if planner not in PLANNERS:
            raise ConfigError(f"unknown planner {planner!r}")
        self.cfg = cfg
        self.planner = planner
        self.scene_path = str(scene_path)
        self.scene = load_scene(scene_path)
        self.category = category
        self.oid = pick_object(self.scene, category)
        self.obj = self.scene.object(self.oid)
        self.seed = int(seed)
        self.model = model or robot_model(cfg)
        self.sim = sim_config(cfg)
        self.ep = cfg["episode"]
        self.rows = []
        self.diag = []
        self.min_clear = math.inf
        self.min_true = math.inf
        self.onset = math.nan

    # ----------------------------------------------------------- sensing
    def sense(self):
        cloud = render_pointcloud(self.scene, self.world, sensor_pose(self.world, self.sim), self.sim,
                                  exclude_links=(self.oid,))
        integrate_pointcloud(self.grid, cloud)
        x = self.world.x
        m = self.cfg["mapping"]
        self.esdf = compute_esdf(self.grid, [x[0], x[1], 1.0], m["window_half_extents"], m["d_max"])
        self.next_sense = self.world.t + self.sim.sensor_period - 1e-9

    def log_row(self, phase):
        w = self.world
        x = w.x
        T = self.model.fk_all(x.reshape(1, -1))[0, self.model.ee_index]
        q = quat_from_matrix(T[:3, :3])
        h = env_collision_constraints(self.model, x, self.esdf)
        clear = float(np.min(h))
        boxes = self.scene.static_boxes(w, exclude_links=(self.oid,))
        true = geometric_clearance(self.model, x, boxes)
        self.min_clear = min(self.min_clear, clear)
        self.min_true = min(self.min_true, true)
        self.rows.append([w.t, phase, *x, *T[:3, 3], *q, w.obj_q[self.oid], clear, true, w.grasp])

    # ---------------------------------------------------------- planning
    def articulation(self):
        gt = self.obj.articulation
        if self.cfg["articulation"] == "ground_truth":
            return gt
        e = self.cfg["estimation"]
        face = self.obj.face
        if face is None:
            raise EstimationError("object has no face description")
        sensor = sensor_pose(self.world, self.sim).position
        cloud = synthetic_face_cloud(face[0], self.obj.normal, face[1], face[2], sensor, e["n_points"], e["noise"],
                                     e["outlier_frac"], seed=self.seed)
        hints = {"q_limits": gt.q_limits}
        if self.obj.hinge_side:
            hints["hinge_side"] = self.obj.hinge_side
        return estimate_articulation(cloud, self.category, hints, seed=self.seed, iterations=e["iterations"],
                                     threshold=e["threshold"])

    def make_plan(self, art):
        frac = SUCCESS_FRACTION.get(self.category, 0.6)
        q_goal = min(art.q_max, (frac + self.ep["goal_margin"]) * art.q_max)
        grasp = self.obj.grasp_pose(0.0)
        return generate_keyframes(art, grasp, 0.0, q_goal, self.ep["n_keyframes"])

    def approach_reference(self, t0):
        x = self.world.x
        T = self.model.fk_all(x.reshape(1, -1))[0, self.model.ee_index]
        start = Pose.from_matrix(T)
        grasp = self.obj.grasp_pose(self.world.obj_q[self.oid])
        pre = Pose(grasp.position + self.ep["approach_offset"] * self.obj.normal, grasp.orientation)
        d = np.linalg.norm(pre.position - start.position)
        t1 = max(1.0, d / self.ep["approach_speed"])
        times = [t0, t0 + t1, t0 + t1 + self.ep["approach_dwell"]]
        return ReferenceTrajectory.from_poses(times, [start, pre, grasp])

    def manipulation_reference(self, t0):
        return ReferenceTrajectory.from_poses(self.plan.times + t0, self.plan.poses)

    # ------------------------------------------------------- controllers
    def make_mpc(self, arm_only=False):
        tmpl = ocp_template(self.cfg, self.model, ReferenceTrajectory.constant(Pose(np.zeros(3))))
        if arm_only:
            tmpl = make_arm_only_ocp(tmpl)
        return MpcController(self.model, tmpl, solver_settings(self.cfg))

    def control(self, phase, reference):
        """Input law for the next control period: callable (x, t) -> u."""
        x, t = self.world.x, self.world.t
        if phase == "navigate":
            v, w, done = self.pursuit.command(x)
            self.nav_done = done
            u = np.zeros(self.model.nu)
            u[0], u[1] = v, w
            return lambda xx, tt: u
        if self.planner == "rrt_ik_wbc":
            target = reference.at(t)
            g = IkGains(**self.cfg["ik"])
            u = ik_wbc_step(self.model, x, Pose(target[0][0], target[1][0]), self.esdf, g)
            return lambda xx, tt: u
        policy = self.mpc.step(x, t, self.esdf, reference)
        info = self.mpc.log[-1]
        self.diag.append({"t": info.t, "phase": phase, "merit": info.merit, "alpha": info.alpha,
                          "regularization": info.regularization, "diverged": info.diverged})
        self.fallbacks = self.fallbacks + 1 if info.diverged else 0
        return lambda xx, tt: evaluate_policy(policy, xx, tt)

    # ----------------------------------------------------------- running
    def advance(self, law):
        n_sub = int(round(self.sim.control_period / self.sim.dt))
        for _ in range(n_sub):
            u = law(self.world.x, self.world.t)
            self.world = step_world(self.scene, self.world, u, self.sim, self.model)
            if self.world.grasp == SLIPPED:
                break
        if self.world.t >= self.next_sense:
            self.sense()

    def run(self):
        ep = self.ep
        pose = sample_start_pose(self.scene, self.seed, self.model)
        x0 = np.concatenate([pose, self.cfg["home_joints"]])
        self.world = initial_state(self.scene, x0, self.seed)
        m = self.cfg["mapping"]
        self.grid = self.scene.make_grid(cap=m["cap"])
        self.sense()
        self.fallbacks = 0
        self.mpc = None
        self.log_row("start")
        try:
            art = self.articulation()
        except EstimationError:
            return self.finish("estimation_error")
        self.plan = self.make_plan(art)

        if self.planner.startswith("rrt_"):
            phase = "navigate"
            r = self.cfg["rrt"]
            occ = self.grid.occupancy_slice(0.02, 1.2)
            checker = FootprintChecker(occ, self.grid.origin[:2], self.grid.resolution,
                                       self.model.base_radius + r["margin"])
            goal = pregrasp_base_goal(self.obj.grasp_pose(0.0).position, self.obj.normal, r["pregrasp_distance"])
            try:
                path = rrt_star_plan(checker, self.world.x[:3], goal, r["budget"], self.seed, r["step"], r["gamma"],
                                     r["goal_bias"], r["radius_cap"])
            except PlanningError:
                return self.finish("solver_stall")
            p = self.cfg["pursuit"]
            self.pursuit = PurePursuit(path, p["lookahead"], p["v_max"], self.model.omega_max, p["pos_tol"],
                                       p["yaw_tol"])
            self.nav_done = False
            t_phase = 0.0
        else:
            phase = "approach"
            self.reference = self.approach_reference(self.world.t)
            t_phase = self.world.t
        if self.planner != "rrt_ik_wbc":
            self.mpc = self.make_mpc(arm_only=self.planner == "rrt_slq_arm")

        while True:
            t = self.world.t
            if t >= ep["timeout"] - 1e-9:
                return self.finish("timeout")
            if phase == "navigate" and t - t_phase > ep["navigation_timeout"]:
                return self.finish("timeout")
            if phase == "approach" and t - t_phase > ep["approach_timeout"]:
                return self.finish("timeout")
            if phase == "manipulate" and t - self.onset > self.plan.duration + ep["manipulation_grace"]:
                return self.finish("timeout")
            law = self.control(phase, None if phase == "navigate" else self.reference)
            if self.fallbacks >= ep["stall_steps"]:
                return self.finish("solver_stall")
            self.advance(law)
            if phase == "approach":
                self.world = attempt_grasp(self.world, self.scene, self.oid, self.model, self.sim)
            self.log_row(phase)
            if self.world.grasp == SLIPPED:
                return self.finish("slippage")
            if phase == "navigate" and self.nav_done:
                phase = "approach"
                t_phase = self.world.t
                self.reference = self.approach_reference(t_phase)
            elif phase == "approach" and self.world.grasp == GRASPING:
                phase = "manipulate"
                self.onset = self.world.t
                self.reference = self.manipulation_reference(self.onset)
            elif phase == "manipulate" and check_success(self.world, self.scene, self.oid):
                return self.finish("none")

    def finish(self, mode):
        onset = self.onset if math.isfinite(self.onset) else None
        t = [r[0] for r in self.rows]
        P = [r[11:14] for r in self.rows]
        manip, total = ee_path_lengths(t, P, onset)
        return EpisodeResult(self.planner, Path(self.scene_path).stem, self.category, self.seed, mode == "none", mode,
                             float(self.world.t), manip, total, float(self.min_clear), float(self.onset),
                             float(self.min_true))

    # ------------------------------------------------------------- dumps
    def dump_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DUMP_HEADER)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def episode_stem(planner, scene, category, seed):
    return f"{planner}__{Path(scene).stem}__{category}__{int(seed):03d}"


def run_episode(cfg, planner, scene, category, seed, out_dir=None, model=None):
    """Run one episode. With ``out_dir`` the trajectory dump (CSV) and the
    diagnostics log (JSON) are written under ``out_dir/logs``."""
    return run_episode_detailed(cfg, planner, scene, category, seed, out_dir, model)[0]


def run_episode_detailed(cfg, planner, scene, category, seed, out_dir=None, model=None):
    """Like run_episode but also returns the finished EpisodeRunner."""
    runner = EpisodeRunner(cfg, planner, scene, category, seed, model)
    result = runner.run()
    if out_dir is not None and cfg.get("dump_trajectories", True):
        stem = episode_stem(planner, scene, category, seed)
        logs = Path(out_dir) / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        text = runner.dump_text()
        (logs / f"{stem}.csv").write_text(text)
        result.log_path = f"logs/{stem}.json"
        doc = {
            "planner": planner,
            "scene": str(scene),
            "category": category,
            "seed": int(seed),
            "config": cfg,
            "result": asdict(result),
            "trajectory": f"{stem}.csv",
            "trajectory_sha256": hashlib.sha256(text.encode()).hexdigest(),
            "steps": runner.diag,
        }
        (logs / f"{stem}.json").write_text(json.dumps(doc, indent=1, default=_json_default) + "\n")
    return result, runner


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
