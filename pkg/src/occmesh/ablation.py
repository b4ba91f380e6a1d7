"""Configuration sweeps: expand a sweep spec into runs, train and evaluate each, tabulate."""

import csv
import itertools
import json
import logging
from pathlib import Path
import time

import yaml

from .errors import ConfigError
from .training import Trainer, evaluate

log = logging.getLogger(__name__)

TABLE_FIELDS = (
    "run", "config_hash", "overrides", "fusion_mode", "conorm_insertions", "latent_dim", "context",
    "mpjpe", "pmpjpe", "pve", "AP", "seconds",
)


def _as_group_list(spec):
    if isinstance(spec, dict) and "groups" in spec:
        groups = spec["groups"]
    elif isinstance(spec, dict):
        groups = [spec]
    elif isinstance(spec, list):
        groups = spec
    else:
        raise ConfigError("sweep spec must be a mapping or a list of mappings")
    if not groups:
        raise ConfigError("sweep spec has no groups")
    for g in groups:
        if not isinstance(g, dict) or not g:
            raise ConfigError("each sweep group must be a non-empty mapping of key -> list of values")
        for k, v in g.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep values for {k!r} must be a non-empty list")
    return groups


def expand_sweep(spec):
    """List of override lists: cross product of values within a group, groups concatenated."""
    runs = []
    for group in _as_group_list(spec):
        keys = list(group)
        for combo in itertools.product(*(group[k] for k in keys)):
            runs.append([f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)])
    return runs


def load_sweep(path):
    try:
        return yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e


def run_ablation(base_cfg, sweep_spec, scenes, out_dir=None):
    """Train and evaluate every sweep configuration; identical configurations are run once.

    The last ``train.holdout_scenes`` scenes are used for evaluation (all scenes
    when no holdout is configured). Returns the table rows.
    """
    overrides = expand_sweep(sweep_spec)
    configs = [base_cfg.override(o) for o in overrides]  # validate everything before any work
    holdout = base_cfg.train.holdout_scenes
    eval_scenes = scenes[-holdout:] if holdout else scenes
    cache = {}
    rows = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for k, (ov, cfg) in enumerate(zip(overrides, configs)):
        h = cfg.hash()
        if h not in cache:
            t0 = time.perf_counter()
            trainer = Trainer(cfg, scenes)
            trainer.fit(out / f"run_{k:02d}" if out else None)
            report = evaluate(trainer.model, eval_scenes)
            cache[h] = (report["overall"], time.perf_counter() - t0)
            log.info("run %d (%s) pmpjpe %.2f", k, " ".join(ov), report["overall"]["pmpjpe"])
        overall, seconds = cache[h]
        rows.append({
            "run": k,
            "config_hash": h,
            "overrides": " ".join(ov),
            "fusion_mode": cfg.model.fusion_mode,
            "conorm_insertions": "-".join(str(d) for d in cfg.model.conorm_insertions),
            "latent_dim": cfg.model.latent_dim,
            "context": cfg.model.context,
            "mpjpe": overall.get("mpjpe"),
            "pmpjpe": overall.get("pmpjpe"),
            "pve": overall.get("pve"),
            "AP": overall.get("AP"),
            "seconds": round(seconds, 2),
        })
    if out:
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return rows


def paper_axes_sweep():
    """The four ablation axes: insertion depth, latent size, fusion mode and context kind."""
    return {
        "groups": [
            {"model.fusion_mode": ["conorm"], "model.conorm_insertions": [[1], [2], [3], [4], [1, 2, 3, 4]]},
            {"model.fusion_mode": ["conorm"], "model.latent_dim": [16, 64, 128]},
            {"model.fusion_mode": ["early", "late", "conorm"]},
            {"model.fusion_mode": ["conorm"], "model.context": ["local", "local+global", "keypoints"]},
        ]
    }
