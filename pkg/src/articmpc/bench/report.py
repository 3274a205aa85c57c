"""Aggregation of episode results and CSV/JSON export."""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episode import RESULT_FIELDS, EpisodeResult

SUMMARY_FIELDS = ["planner", "category", "episodes", "successes", "success_rate_pct", "time_mean_s", "time_std_s",
                  "path_mean_m", "path_std_m", "path_total_mean_m", "path_total_std_m"]


@dataclass
class GroupStats:
    planner: str
    category: str
    episodes: int
    successes: int
    success_rate_pct: float
    time_mean_s: float
    time_std_s: float
    path_mean_m: float
    path_std_m: float
    path_total_mean_m: float
    path_total_std_m: float


@dataclass
class BenchmarkReport:
    groups: list
    config_hash: str = ""
    seeds: list = field(default_factory=list)
    planners: list = field(default_factory=list)
    categories: list = field(default_factory=list)

    def group(self, planner, category="overall"):
        for g in self.groups:
            if g.planner == planner and g.category == category:
                return g
        raise KeyError((planner, category))


def mean_std(values):
    """Mean and sample standard deviation; nan where undefined."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    m = float(v.mean())
    s = float(v.std(ddof=1)) if v.size > 1 else math.nan
    return m, s


def _stats(planner, category, rs):
    ok = [r for r in rs if r.success]
    t = mean_std([r.time_s for r in ok])
    p = mean_std([r.ee_path_m for r in ok])
    pt = mean_std([r.ee_path_total_m for r in ok])
    rate = 100.0 * len(ok) / len(rs) if rs else math.nan
    return GroupStats(planner, category, len(rs), len(ok), rate, *t, *p, *pt)


def aggregate(results, config_hash="", seeds=(), planners=None, categories=None):
    """Per (planner, category) and per-planner overall statistics.

    Time and path statistics use successful runs only.
    """
    planners = list(planners) if planners is not None else sorted({r.planner for r in results})
    categories = list(categories) if categories is not None else sorted({r.category for r in results})
    groups = []
    for p in planners:
        mine = [r for r in results if r.planner == p]
        if not mine:
            continue
        for c in categories:
            rs = [r for r in mine if r.category == c]
            if rs:
                groups.append(_stats(p, c, rs))
        groups.append(_stats(p, "overall", mine))
    return BenchmarkReport(groups, config_hash, list(seeds), planners, categories)


# ------------------------------------------------------------- formats
def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in results:
        d = asdict(r)
        w.writerow([_cell(d[k]) for k in RESULT_FIELDS])
    return buf.getvalue()


def summary_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for g in report.groups:
        d = asdict(g)
        w.writerow([_cell(d[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


_TYPES = {f: t for f, t in EpisodeResult.__annotations__.items()}


def _parse(name, text):
    t = _TYPES[name]
    if t is bool or t == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"bad boolean {text!r} in column {name}")
        return text == "true"
    if t is int or t == "int":
        return int(text)
    if t is float or t == "float":
        return float(text)
    return text


def parse_results_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty results file")
    header = rows[0]
    if header != RESULT_FIELDS:
        raise ValueError(f"unexpected results header {header}")
    return [EpisodeResult(**{k: _parse(k, v) for k, v in zip(header, row)}) for row in rows[1:]]


def read_results_csv(path):
    return parse_results_csv(Path(path).read_text())


def report_json(report, results):
    doc = {
        "metadata": {
            "config_hash": report.config_hash,
            "seeds": list(report.seeds),
            "planners": list(report.planners),
            "categories": list(report.categories),
            "episodes": len(results),
        },
        "summary": [asdict(g) for g in report.groups],
        "episodes": [asdict(r) for r in results],
    }
    # nan is not valid JSON; null marks undefined statistics
    return json.dumps(_nan_to_none(doc), indent=1) + "\n"


def _nan_to_none(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None if math.isnan(o) else ("inf" if o > 0 else "-inf")
    if isinstance(o, dict):
        return {k: _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_nan_to_none(v) for v in o]
    return o


def export_report(report, results, out_dir, formats=("csv", "json")):
    """Write results.csv / summary.csv and report.json; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            (out / "results.csv").write_text(results_csv(results))
            (out / "summary.csv").write_text(summary_csv(report))
            written += [out / "results.csv", out / "summary.csv"]
        elif fmt == "json":
            (out / "report.json").write_text(report_json(report, results))
            written.append(out / "report.json")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written


def format_table(report):
    """Human-readable summary in the layout of a comparison table."""
    lines = [f"{'planner':<13}{'category':<17}{'success %':>10}{'time s':>16}{'path m':>16}"]
    for g in report.groups:
        t = "-" if math.isnan(g.time_mean_s) else f"{g.time_mean_s:.1f}±{0.0 if math.isnan(g.time_std_s) else g.time_std_s:.1f}"
        p = "-" if math.isnan(g.path_mean_m) else f"{g.path_mean_m:.2f}±{0.0 if math.isnan(g.path_std_m) else g.path_std_m:.2f}"
        lines.append(f"{g.planner:<13}{g.category:<17}{g.success_rate_pct:>10.1f}{t:>16}{p:>16}")
    return "\n".join(lines)
