"""Benchmark driver: enumerate episodes, run them, aggregate, export."""
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from .config import config_hash, dump_resolved
from .episode import episode_scene, run_episode
from .report import aggregate, export_report


def episode_jobs(cfg):
    """(planner, scene, category, seed) in canonical order."""
    return [(p, episode_scene(cfg, s), c, s) for p in cfg["planners"] for c in cfg["categories"] for s in cfg["seeds"]]


def _run_job(cfg, job, out_dir):
    planner, scene, category, seed = job
    return run_episode(cfg, planner, scene, category, seed, out_dir)


def run_benchmark(cfg, out_dir=None, serial=False, workers=None, progress=None):
    """Run every configured episode. Returns (report, results).

    Serial execution yields results in canonical job order; parallel
    execution yields them in completion order. Each episode is seeded on its
    own, so the per-episode rows do not depend on the order.
    """
    text = dump_resolved(cfg)
    digest = config_hash(text)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_resolved.json").write_text(text)
    jobs = episode_jobs(cfg)
    results = []
    n = workers if workers is not None else (cfg.get("workers") or os.cpu_count() or 1)
    if serial or n <= 1 or len(jobs) <= 1:
        for job in jobs:
            r = _run_job(cfg, job, out_dir)
            results.append(r)
            if progress:
                progress(r)
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            futs = [pool.submit(_run_job, cfg, job, out_dir) for job in jobs]
            for f in as_completed(futs):
                r = f.result()
                results.append(r)
                if progress:
                    progress(r)
    report = aggregate(results, digest, cfg["seeds"], cfg["planners"], cfg["categories"])
    if out_dir is not None:
        export_report(report, results, out_dir)
    return report, results
