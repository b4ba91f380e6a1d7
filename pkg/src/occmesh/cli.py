"""``occmesh`` command-line entry point.

Subcommands: gen-data, train, eval, ablate, infer, visualize. Exit codes: 0
success, 2 configuration error, 3 data error, 4 numerical failure. Set
``OCCMESH_VERBOSITY`` to 0 (warnings), 1 (info) or 2 (debug).
"""

import argparse
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np
from PIL import Image

from . import ablation
from .body_model import SchemaError
from .config import load_config, substream_seed
from .context import estimate_context, extract_local_centermaps, render_centermap
from .errors import ConfigError
from .synthdata import DatasetError, GenerationError, Scene, SceneConfig, generate_scene, read_dataset, write_dataset
from .training import (
    NumericalError,
    Trainer,
    evaluate,
    instance_context,
    load_estimator,
    load_regressor,
    predict_instances,
    save_checkpoint,
    train_context_estimator,
)
from .viz import write_overlays

log = logging.getLogger("occmesh")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _setup_logging():
    level = {0: logging.WARNING, 1: logging.INFO}.get(_verbosity(), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _verbosity():
    raw = os.environ.get("OCCMESH_VERBOSITY", "1")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"OCCMESH_VERBOSITY must be an integer, got {raw!r}") from None


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


def _config(args):
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def scene_seed(data_seed, preset, index):
    return substream_seed(data_seed, f"scene/{preset}/{index}")


def generate_scenes(cfg):
    d = cfg.data
    scenes = []
    for preset in d.presets:
        for k in range(d.scenes_per_preset):
            sc = SceneConfig.from_preset(
                preset, n_persons=d.n_persons, pose_noise=d.pose_noise,
                image_size=d.image_size, seed=scene_seed(d.seed, preset, k),
            )
            scenes.append(generate_scene(sc))
    return scenes


def cmd_gen_data(args):
    cfg = _config(args)
    scenes = generate_scenes(cfg)
    manifest = write_dataset(scenes, args.out, extra={"config_hash": cfg.hash(), "data_config": cfg.to_dict()["data"]})
    print(f"wrote {manifest['count']} scenes to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    scenes = read_dataset(args.data)
    out = Path(args.out)
    trainer = Trainer(cfg, scenes)
    if args.resume:
        trainer.resume(args.resume)
    _write_json(out / "config.json", {"config": cfg.to_dict(), "config_hash": cfg.hash()})
    remaining = max(cfg.train.steps - trainer.step, 0)
    rows = trainer.fit(out, remaining)
    if cfg.train.context_steps:
        est, losses = train_context_estimator(trainer.scenes, cfg.train.context_steps, cfg.train.seed)
        save_checkpoint(out / "context_estimator.npz", est, {
            "kind": "context_estimator", "config_hash": cfg.hash(), "final_loss": losses[-1],
        })
    last = rows[-1]["total"] if rows else float("nan")
    print(f"trained {trainer.step} steps, final loss {last:.5f}, checkpoints in {out}")


def _split(scenes, cfg, split):
    h = cfg.train.holdout_scenes
    if split == "all" or not h:
        return scenes
    return scenes[-h:] if split == "holdout" else scenes[:-h]


def cmd_eval(args):
    model, cfg, meta = load_regressor(args.checkpoint)
    scenes = _split(read_dataset(args.data), cfg, args.split)
    report = {"checkpoint": str(args.checkpoint), "config_hash": meta["config_hash"], "split": args.split}
    report["ground_truth_context"] = evaluate(model, scenes)
    if args.estimator:
        report["estimated_context"] = evaluate(model, scenes, estimator=load_estimator(args.estimator))
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report["ground_truth_context"]["overall"], indent=1))


def cmd_ablate(args):
    cfg = _config(args)
    sweep = ablation.load_sweep(args.sweep) if args.sweep else ablation.paper_axes_sweep()
    scenes = read_dataset(args.data)
    rows = ablation.run_ablation(cfg, sweep, scenes, args.out)
    for r in rows:
        print(f"{r['run']:3d} {r['config_hash']} pmpjpe={r['pmpjpe']:.2f} {r['overrides']}")


def _load_image(path):
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img


def _parse_centers(text):
    try:
        return [np.array([float(v) for v in c.split(",")]) for c in text.split(";") if c.strip()]
    except ValueError:
        raise ConfigError("--centers must look like 'x1,y1;x2,y2'") from None


def cmd_infer(args):
    model, cfg, meta = load_regressor(args.checkpoint)
    image = _load_image(args.image)
    size = cfg.model.input_size
    if image.shape[:2] != (size, size):
        raise DatasetError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    if args.centers:
        centers = _parse_centers(args.centers)
        gmap = render_centermap(centers, size, size)
        scores = [1.0] * len(centers)
    elif args.estimator:
        gmap = estimate_context(load_estimator(args.estimator), image)
        dets = extract_local_centermaps(gmap)
        centers = [c for c, _, _ in dets]
        scores = [float(p) for _, _, p in dets]
    else:
        raise ConfigError("infer needs --centers or --estimator")
    scene = Scene(image=image, persons=[], config=SceneConfig(), global_centermap=gmap)
    contexts = [instance_context(scene, None, cfg.model.context, global_map=gmap, center=c) for c in centers]
    preds = predict_instances(model, scene, contexts)
    out = {
        "config_hash": meta["config_hash"],
        "instances": [
            {"center": np.asarray(c).tolist(), "score": s, "theta": p.to_vector().tolist()}
            for c, s, p in zip(centers, scores, preds)
        ],
    }
    if args.out:
        _write_json(args.out, out)
    print(f"{len(preds)} instances")


def cmd_visualize(args):
    model, cfg, meta = load_regressor(args.checkpoint)
    scenes = read_dataset(args.data)
    if not 0 <= args.scene < len(scenes):
        raise DatasetError(f"scene index {args.scene} out of range (dataset has {len(scenes)})")
    scene = scenes[args.scene]
    contexts = [instance_context(scene, i, cfg.model.context) for i in range(len(scene.persons))]
    preds = predict_instances(model, scene, contexts)
    paths = write_overlays(scene, preds, scene.global_centermap, args.out)
    _write_json(Path(args.out) / "overlays.json", {
        "config_hash": meta["config_hash"], "scene": args.scene, "files": {k: str(v) for k, v in paths.items()},
    })
    print(f"wrote {len(paths)} images to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="occmesh", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")

    sp = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the regressor on a dataset")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--estimator", help="context estimator checkpoint for estimated-context evaluation")
    sp.add_argument("--split", choices=("holdout", "train", "all"), default="holdout")
    sp.add_argument("--out", help="report JSON path")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run a configuration sweep")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sweep", help="sweep spec YAML (default: the four ablation axes)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("infer", help="predict body parameters for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--centers", help="'x1,y1;x2,y2' body centers in pixels")
    sp.add_argument("--estimator", help="context estimator checkpoint to find centers")
    sp.add_argument("--out", help="output JSON path")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("visualize", help="write overlay images for one dataset scene")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SchemaError, GenerationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
