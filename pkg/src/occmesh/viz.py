"""Overlay images for qualitative inspection of predictions."""

from pathlib import Path

import numpy as np
from PIL import Image
import torch

from .body_model import body_forward
from .fields import hard_rasterize
from .synthdata import screen_vertices, toy_spec

PALETTE = np.array([
    [0.90, 0.25, 0.20], [0.20, 0.55, 0.90], [0.25, 0.80, 0.35], [0.95, 0.75, 0.15],
    [0.65, 0.35, 0.85], [0.10, 0.80, 0.80],
])


def _to_png(rgb, path):
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def instance_overlay(image, inst, alpha=0.6):
    out = np.array(image, dtype=np.float64)
    on = inst >= 0
    out[on] = (1 - alpha) * out[on] + alpha * PALETTE[inst[on] % len(PALETTE)]
    return out


def heatmap_overlay(image, heat, alpha=0.7):
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)[..., None]
    color = np.array([1.0, 0.1, 0.0])
    return (1 - alpha * heat) * np.asarray(image, dtype=np.float64) + alpha * heat * color


def predicted_instance_map(preds, size, spec=None):
    """Hard z-buffer of predicted meshes in image space; (instance map, depth map)."""
    spec = spec or toy_spec()
    meshes = []
    with torch.no_grad():
        for p in preds:
            verts, _ = body_forward(spec, p.pose.double(), p.shape.double())
            meshes.append((screen_vertices(verts, p.camera.double()).numpy(), spec.faces))
    inst, _, depth = hard_rasterize(meshes, np.array([1.0, 0.0, 0.0]), size, size)
    return inst, depth


def write_overlays(scene, preds, global_map, out_dir, spec=None):
    """Write input, predicted silhouettes, centermap overlay and depth-order map as PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = scene.image.shape[0]
    inst, depth = predicted_instance_map(preds, size, spec)
    paths = {
        "input": out / "input.png",
        "silhouettes": out / "silhouettes.png",
        "centermap": out / "centermap.png",
        "depth_order": out / "depth_order.png",
    }
    _to_png(scene.image, paths["input"])
    _to_png(instance_overlay(scene.image, inst), paths["silhouettes"])
    _to_png(heatmap_overlay(scene.image, global_map), paths["centermap"])
    # depth-order map: front instance color, brightness falls off with depth
    order = np.zeros_like(scene.image)
    on = inst >= 0
    if on.any():
        d = depth[on]
        shade = 1.0 - 0.6 * (d - d.min()) / max(float(d.max() - d.min()), 1e-9)
        order[on] = PALETTE[inst[on] % len(PALETTE)] * shade[:, None]
    _to_png(order, paths["depth_order"])
    return paths
