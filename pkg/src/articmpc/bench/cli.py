"""Command line entry point: ``bench run | rank | replay``."""
import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import yaml

from ..geometry import Pose
from ..ocp import ReferenceTrajectory
from ..simulator import SceneError, load_scene
from .benchmark import run_benchmark
from .config import PLANNERS, ConfigError, load_config, parse_seeds, resolve_scene
from .episode import EpisodeResult, ocp_template, robot_model, run_episode_detailed, solver_settings
from .rank import grasp_candidates, rank_options
from .report import format_table

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _fail(msg):
    print(f"bench: error: {msg}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------- run
def cmd_run(args):
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds)
    if args.planner is not None:
        planners = [p.strip() for p in args.planner.split(",") if p.strip()]
        bad = [p for p in planners if p not in PLANNERS]
        if bad or not planners:
            raise ConfigError(f"unknown planner {','.join(bad) or args.planner!r}; expected one of {', '.join(PLANNERS)}")
        overrides["planners"] = planners
    cfg = load_config(args.config, overrides)
    out = Path(args.out)
    n = len(cfg["planners"]) * len(cfg["categories"]) * len(cfg["seeds"])
    done = [0]

    def progress(r):
        done[0] += 1
        if not args.quiet:
            status = "ok" if r.success else r.failure_mode
            print(f"[{done[0]:>4}/{n}] {r.planner:<12} {r.category:<16} seed {r.seed:<4} {status:<16} "
                  f"t={r.time_s:6.2f}s", flush=True)

    try:
        report, _ = run_benchmark(cfg, out, serial=args.serial, workers=args.workers, progress=progress)
    except OSError as e:
        raise UsageError(f"cannot write results to {out}: {e}") from None
    print(format_table(report))
    print(f"config hash {report.config_hash}")
    print(f"reports written to {out}")
    return EXIT_OK


# --------------------------------------------------------------- rank
def cmd_rank(args):
    cfg = load_config(args.config)
    if args.candidates < 1:
        raise ConfigError("--candidates must be at least 1")
    scene = load_scene(resolve_scene(args.scene, Path.cwd()))
    model = robot_model(cfg)
    r = cfg["rank"]
    tmpl = ocp_template(cfg, model, ReferenceTrajectory.constant(Pose([0.0, 0.0, 0.0])))
    solver = solver_settings(cfg, r["horizon"], r["n_nodes"], r["iterations"])
    entries = rank_options(scene, grasp_candidates(args.candidates), tmpl, t_h=r["horizon"], model=model,
                           object_id=args.object, iterations=r["iterations"], n_nodes=r["n_nodes"],
                           duration=r["duration"], approach=r["approach"], home_joints=cfg["home_joints"],
                           solver=solver)
    keys = ["tracking", "input", "embodiment", "environment"]
    print(f"{'rank':>4} {'cand':>4} {'s':>6} {'merit':>12} " + " ".join(f"{k:>12}" for k in keys))
    for rank, e in enumerate(entries, 1):
        parts = " ".join(f"{e.breakdown.get(k, math.nan):12.5f}" for k in keys)
        flag = "  stalled" if e.stalled else ""
        print(f"{rank:>4} {e.index:>4} {e.parameter:6.3f} {e.total:12.5f} {parts}{flag}")
    if args.out:
        doc = [{"rank": i, "index": e.index, "parameter": e.parameter, "total": e.total,
                "breakdown": e.breakdown, "iterations": e.iterations, "stalled": e.stalled}
               for i, e in enumerate(entries, 1)]
        try:
            Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
        except OSError as e:
            raise UsageError(f"cannot write {args.out}: {e}") from None
    return EXIT_OK


# ------------------------------------------------------------- replay
def cmd_replay(args):
    path = Path(args.log)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise UsageError(f"cannot read log {path}: {e}") from None
    except ValueError as e:
        raise UsageError(f"log {path} is not valid JSON: {e}") from None
    try:
        cfg, planner, scene = doc["config"], doc["planner"], doc["scene"]
        category, seed, stored = doc["category"], int(doc["seed"]), doc["result"]
        digest = doc["trajectory_sha256"]
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"log {path} lacks field {e}") from None
    if not Path(scene).is_file():
        raise UsageError(f"scene {scene} from the log is missing")
    result, runner = run_episode_detailed(cfg, planner, scene, category, seed)
    text = runner.dump_text()
    again = hashlib.sha256(text.encode()).hexdigest()
    stored = EpisodeResult(**{**stored, "log_path": ""})
    fresh = {**result.__dict__, "log_path": ""}
    same_result = all(_same(fresh[k], v) for k, v in stored.__dict__.items())
    print(f"episode  {planner} {Path(scene).stem} {category} seed {seed}")
    print(f"result   success={result.success} failure={result.failure_mode} t={result.time_s:.3f}s")
    print(f"trajectory {'match' if again == digest else 'MISMATCH'} ({again[:16]})")
    print(f"metrics    {'match' if same_result else 'MISMATCH'}")
    if args.dump:
        Path(args.dump).write_text(text)
    return EXIT_OK if (again == digest and same_result) else EXIT_MISMATCH


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


# ------------------------------------------------------------ parsing
def build_parser():
    p = argparse.ArgumentParser(prog="bench", description="Seeded articulated-object manipulation benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run episodes and export reports")
    r.add_argument("--config", help="YAML config merged over the packaged defaults")
    r.add_argument("--serial", action="store_true", help="run episodes one after another in canonical order")
    r.add_argument("--seeds", help="inclusive seed range a..b")
    r.add_argument("--planner", help="planner id (comma separated for several)")
    r.add_argument("--out", default="bench_out", help="output directory (default: bench_out)")
    r.add_argument("--workers", type=int, help="worker processes for parallel runs")
    r.add_argument("-q", "--quiet", action="store_true", help="no per-episode progress lines")
    r.set_defaults(func=cmd_run)

    k = sub.add_parser("rank", help="rank grasp candidates on a handle by merit")
    k.add_argument("--scene", required=True, help="scene YAML (path or packaged scene name)")
    k.add_argument("--candidates", type=int, default=7)
    k.add_argument("--config", help="YAML config for weights and solver budget")
    k.add_argument("--object", help="object id (default: first object of the scene)")
    k.add_argument("--out", help="write the ranking as JSON")
    k.set_defaults(func=cmd_rank)

    y = sub.add_parser("replay", help="re-run a logged episode and compare it with the log")
    y.add_argument("--log", required=True, help="episode JSON log written by 'bench run'")
    y.add_argument("--dump", help="write the replayed trajectory CSV here")
    y.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneError, UsageError, yaml.YAMLError) as e:
        return _fail(e)
    except OSError as e:
        return _fail(f"{e.filename or ''}: {e.strerror or e}")


if __name__ == "__main__":
    sys.exit(main())
