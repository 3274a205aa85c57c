"""Benchmark configuration: packaged defaults merged with a user file."""
import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

from ..object_centric import CATEGORIES

PLANNERS = ("slq_wbc", "rrt_slq_wbc", "rrt_ik_wbc", "rrt_slq_arm")


class ConfigError(ValueError):
    pass


def default_config_path():
    return resources.files("articmpc") / "data" / "default_config.yaml"


def scene_dir():
    return resources.files("articmpc") / "data" / "scenes"


def default_config():
    with default_config_path().open() as fh:
        return yaml.safe_load(fh)


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_seeds(value):
    """``[a, b]`` / ``"a..b"`` (inclusive) or an explicit list."""
    if isinstance(value, str):
        if ".." not in value:
            raise ConfigError(f"seed range {value!r} must look like a..b")
        a, b = value.split("..", 1)
        try:
            a, b = int(a), int(b)
        except ValueError:
            raise ConfigError(f"bad seed range {value!r}") from None
        if b < a:
            raise ConfigError(f"empty seed range {value!r}")
        return list(range(a, b + 1))
    if isinstance(value, int):
        return [value]
    value = list(value)
    if len(value) == 2 and all(isinstance(s, int) for s in value) and value[1] >= value[0]:
        return list(range(value[0], value[1] + 1))
    return [int(s) for s in value]


def resolve_scene(name, base_dir=None):
    p = Path(name)
    cands = [p] if p.is_absolute() else ([Path(base_dir) / p] if base_dir else []) + [Path(str(scene_dir())) / p]
    for c in cands:
        if c.is_file():
            return c.resolve()
    raise ConfigError(f"scene file {name!r} not found")


def validate(cfg):
    for p in cfg["planners"]:
        if p not in PLANNERS:
            raise ConfigError(f"unknown planner {p!r}; expected one of {', '.join(PLANNERS)}")
    for c in cfg["categories"]:
        if c not in CATEGORIES:
            raise ConfigError(f"unknown category {c!r}")
    if cfg["articulation"] not in ("ground_truth", "estimated"):
        raise ConfigError("articulation must be ground_truth or estimated")
    if not cfg["scenes"]:
        raise ConfigError("config lists no scenes")
    if cfg["sim"]["dt"] >= cfg["sim"]["control_period"]:
        raise ConfigError("sim.dt must be below sim.control_period")
    for k in ("timeout", "approach_timeout", "navigation_timeout"):
        if not cfg["episode"][k] > 0:
            raise ConfigError(f"episode.{k} must be positive")
    if cfg["ocp"]["n_nodes"] < 2 or cfg["ocp"]["horizon"] <= 0:
        raise ConfigError("ocp horizon and n_nodes must be positive")
    if len(cfg["home_joints"]) != 6:
        raise ConfigError("home_joints needs one value per arm joint")
    return cfg


def load_config(path=None, overrides=None):
    """Resolved config dict. Scene paths become absolute, seeds a list."""
    cfg = default_config()
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, user)
        base_dir = path.parent
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg["seeds"] = parse_seeds(cfg["seeds"])
    cfg["scenes"] = [str(resolve_scene(s, base_dir)) for s in cfg["scenes"]]
    if cfg["robot"] is not None:
        r = Path(cfg["robot"])
        if not r.is_absolute() and base_dir is not None:
            r = base_dir / r
        if not r.is_file():
            raise ConfigError(f"robot model {cfg['robot']!r} not found")
        cfg["robot"] = str(r.resolve())
    return validate(cfg)


def dump_resolved(cfg):
    """Canonical text of a resolved config (the hashed artifact)."""
    return json.dumps(cfg, sort_keys=True, indent=1) + "\n"


def config_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()
