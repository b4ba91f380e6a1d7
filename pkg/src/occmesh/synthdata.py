"""Deterministic multi-person occlusion scenes built from the toy body.

Each person gets a weak-perspective camera ``[s, t_x, t_y]`` relative to the
full image. With a fixed focal constant ``f`` the person's model origin sits
at ``(t_x / s, t_y / s, f / s)`` in a shared metric frame, so meshes of
different people can be compared in 3D (interpenetration) and in depth
(ordering). Screen coordinates of a vertex are ``(s*x + t_x, s*y + t_y)`` with
depth ``z + f / s``.
"""

import colorsys
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image
import torch

from .body_model import COCO17_FROM_SMPL24, NUM_BETAS, NUM_JOINTS, body_forward, make_toy_model
from .context import compute_body_center, render_centermap, save_centermap_png
from .fields import hard_rasterize
from .geometry import axis_angle_to_matrix, matrix_to_rot6d, normalized_to_pixel

log = logging.getLogger(__name__)

FOCAL = 5.0
VISIBILITY_WINDOW = 2
MIN_VISIBLE = 5
RESAMPLE_EVERY = 50
BACKGROUND = np.array([0.5, 0.5, 0.5])

# preset: (overlap target, tolerance)
PRESETS = {
    "clear": (0.05, 0.05),
    "occluded": (0.45, 0.15),
    "severe": (0.75, 0.10),
}

# relative pose noise per joint: large at hips, knees, shoulders, elbows
_JOINT_NOISE = np.full(NUM_JOINTS, 0.3)
_JOINT_NOISE[[1, 2, 4, 5, 16, 17, 18, 19]] = 1.0
_JOINT_NOISE[[10, 11, 22, 23]] = 0.0


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_persons: int = 2
    overlap_target: float = 0.45
    overlap_tolerance: float = 0.1
    pose_noise: float = 0.35
    shape_scale: float = 1.0
    image_size: int = 224
    seed: int = 0
    preset: str = ""
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.n_persons <= 4:
            raise ValueError("n_persons must be in 1..4")
        if not 0 <= self.overlap_target <= 1:
            raise ValueError("overlap_target must be in [0, 1]")
        if self.pose_noise < 0 or self.shape_scale < 0 or self.image_size < 16:
            raise ValueError("invalid noise, shape scale or image size")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_preset(cls, name, **kw):
        target, tol = PRESETS[name]
        return cls(overlap_target=target, overlap_tolerance=tol, preset=name, **kw)


@dataclass
class Person:
    pose6d: np.ndarray  # (24, 6)
    shape: np.ndarray  # (10,)
    camera: np.ndarray  # (3,) [s, t_x, t_y]
    keypoints2d: np.ndarray  # (24, 2) pixels
    visibility: np.ndarray  # (24,) bool
    joints3d: np.ndarray  # (24, 3) model frame
    mask: np.ndarray  # (H, W) bool
    center: np.ndarray  # (2,) pixels
    bbox: np.ndarray  # (4,) x0, y0, x1, y1 in pixels, amodal and clipped
    albedo: np.ndarray  # (3,)

    @property
    def area(self):
        return float(self.mask.sum())

    @property
    def keypoints17(self):
        return self.keypoints2d[COCO17_FROM_SMPL24], self.visibility[COCO17_FROM_SMPL24]


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) in [0, 1], multiples of 1/255
    persons: list
    config: SceneConfig
    achieved_iou: float = 0.0
    global_centermap: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.global_centermap is None:
            H, W = self.image.shape[:2]
            self.global_centermap = render_centermap([p.center for p in self.persons], H, W)

    @property
    def centers(self):
        return [p.center for p in self.persons]

    def instance_map(self):
        out = np.full(self.image.shape[:2], -1)
        for i, p in enumerate(self.persons):
            out[p.mask] = i
        return out


_SPEC_CACHE = {}


def toy_spec():
    if "toy" not in _SPEC_CACHE:
        _SPEC_CACHE["toy"] = make_toy_model(1)
    return _SPEC_CACHE["toy"]


def screen_vertices(verts, camera, focal=FOCAL):
    """(u, v, depth) of model-frame vertices under a person's camera; numpy or torch."""
    s, tx, ty = camera[..., 0:1], camera[..., 1:2], camera[..., 2:3]
    if isinstance(verts, torch.Tensor):
        return torch.cat([s * verts[..., 0:1] + tx, s * verts[..., 1:2] + ty, verts[..., 2:3] + focal / s], -1)
    return np.concatenate([s * verts[..., 0:1] + tx, s * verts[..., 1:2] + ty, verts[..., 2:3] + focal / s], -1)


def world_vertices(verts, camera, focal=FOCAL):
    """Model-frame vertices placed in the shared metric frame."""
    s, tx, ty = camera[..., 0:1], camera[..., 1:2], camera[..., 2:3]
    offset = (tx / s, ty / s, focal / s)
    if isinstance(verts, torch.Tensor):
        return verts + torch.cat(offset, -1).unsqueeze(-2)
    return verts + np.concatenate(offset, -1)[..., None, :]


def keypoint_visibility(kp_pixels, instance_map, owner, window=VISIBILITY_WINDOW):
    """Visible iff in bounds and the window holds a pixel of the owner or background."""
    H, W = instance_map.shape
    vis = np.zeros(len(kp_pixels), dtype=bool)
    for k, (x, y) in enumerate(kp_pixels):
        c, r = int(round(x)), int(round(y))
        if not (0 <= c < W and 0 <= r < H):
            continue
        patch = instance_map[max(r - window, 0) : r + window + 1, max(c - window, 0) : c + window + 1]
        vis[k] = bool(((patch == owner) | (patch == -1)).any())
    return vis


def render_instances(spec, verts_list, cams, size):
    """Hard-render people; returns (instance map, face map, per-person screen vertices)."""
    screens = [screen_vertices(v, c) for v, c in zip(verts_list, cams)]
    inst, fid, _ = hard_rasterize([(s, spec.faces) for s in screens], np.array([1.0, 0.0, 0.0]), size, size)
    return inst, fid, screens


def _box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _sample_body(rng, cfg):
    rotvec = rng.normal(size=(NUM_JOINTS, 3)) * (cfg.pose_noise * _JOINT_NOISE)[:, None]
    rotvec[0] = [rng.normal(0, 0.1), rng.uniform(-0.6, 0.6), rng.normal(0, 0.1)]
    pose6d = matrix_to_rot6d(axis_angle_to_matrix(rotvec))
    shape = rng.normal(size=NUM_BETAS) * cfg.shape_scale
    return pose6d, shape


def _bbox(screen, size):
    px = normalized_to_pixel(screen[:, :2], size)
    lo = np.clip(px.min(0), 0, size - 1)
    hi = np.clip(px.max(0), 0, size - 1)
    return np.array([lo[0], lo[1], hi[0], hi[1]])


def generate_scene(cfg, spec=None):
    """Sample a scene by rejection until overlap and visibility constraints hold."""
    spec = spec or toy_spec()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_persons
    size = cfg.image_size
    hue0 = rng.uniform()
    albedo = [
        np.array(colorsys.hsv_to_rgb((hue0 + k / n) % 1.0, rng.uniform(0.55, 0.9), rng.uniform(0.7, 1.0)))
        for k in range(n)
    ]

    best_iou = None
    for attempt in range(cfg.max_attempts):
        if attempt % RESAMPLE_EVERY == 0:
            # some pose combinations cannot reach the overlap target; redraw the bodies
            bodies = [_sample_body(rng, cfg) for _ in range(n)]
            with torch.no_grad():
                out = [body_forward(spec, torch.from_numpy(p), torch.from_numpy(b)) for p, b in bodies]
            verts = [v.numpy() for v, _ in out]
            joints = [j.numpy() for _, j in out]
        depths = np.sort(rng.uniform(4.5, 6.5, size=n)) if n > 1 else np.array([rng.uniform(4.5, 5.5)])
        if n > 1 and np.diff(depths).min() < 0.4:
            continue
        depths = rng.permutation(depths)
        scales = FOCAL / depths
        cams = [np.array([scales[0], rng.uniform(-0.25, 0.25), rng.uniform(-0.15, 0.05)])]
        for k in range(1, n):
            anchor = cams[rng.integers(k)]
            width = 2 * 0.6 * scales[k]
            iou = np.clip(cfg.overlap_target + rng.uniform(-0.05, 0.05), 0.0, 0.98)
            dx = width * (1 - iou) / (1 + iou) * rng.choice([-1.0, 1.0])
            cams.append(np.array([scales[k], anchor[1] + dx, anchor[2] + rng.uniform(-0.08, 0.08)]))
        screens = [screen_vertices(v, c) for v, c in zip(verts, cams)]
        boxes = [_bbox(s, size) for s in screens]
        if n > 1:
            ious = np.array([[_box_iou(a, b) if i != j else -1.0 for j, b in enumerate(boxes)] for i, a in enumerate(boxes)])
            nearest = ious.max(1)
            err = np.abs(nearest - cfg.overlap_target).max()
            if best_iou is None or err < abs(best_iou - cfg.overlap_target):
                best_iou = float(nearest[np.argmax(np.abs(nearest - cfg.overlap_target))])
            if err > cfg.overlap_tolerance:
                continue
            achieved = float(nearest.mean())
        else:
            achieved = 0.0
        inst, fid, _ = render_instances(spec, verts, cams, size)
        persons = []
        ok = True
        for i in range(n):
            jpx = normalized_to_pixel(screen_vertices(joints[i], cams[i])[:, :2], size)
            vis = keypoint_visibility(jpx, inst, i)
            center = compute_body_center(jpx, vis)
            mask = inst == i
            if vis.sum() < MIN_VISIBLE or center is None or not mask.any():
                ok = False
                break
            if not (0 <= center[0] <= size - 1 and 0 <= center[1] <= size - 1):
                ok = False
                break
            persons.append(Person(
                pose6d=bodies[i][0], shape=bodies[i][1], camera=cams[i], keypoints2d=jpx,
                visibility=vis, joints3d=joints[i], mask=mask, center=center,
                bbox=boxes[i], albedo=albedo[i],
            ))
        if not ok:
            continue
        image = _shade(spec, verts, cams, inst, fid, albedo, size)
        return Scene(image=image, persons=persons, config=cfg, achieved_iou=achieved)
    raise GenerationError(
        f"overlap target {cfg.overlap_target} unattainable after {cfg.max_attempts} attempts "
        f"(closest achieved IoU {best_iou})"
    )


def _shade(spec, verts, cams, inst, fid, albedo, size):
    faces = spec.faces
    normals = []
    for v in verts:
        tri = v[faces]
        nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True) + 1e-12
        normals.append(nrm)
    normals = np.concatenate(normals)
    image = np.broadcast_to(BACKGROUND, (size, size, 3)).copy()
    on = fid >= 0
    shade = 0.35 + 0.65 * np.abs(normals[fid[on], 2])
    cols = np.array(albedo)[inst[on]]
    image[on] = cols * shade[:, None]
    return np.round(np.clip(image, 0, 1) * 255) / 255.0


def overlap_preset_config(preset, seed, **kw):
    return SceneConfig.from_preset(preset, seed=seed, **kw)


# ---------------------------------------------------------------------------
# dataset directory IO


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _person_json(p):
    return {
        "pose6d": p.pose6d.tolist(),
        "shape": p.shape.tolist(),
        "camera": p.camera.tolist(),
        "keypoints2d": p.keypoints2d.tolist(),
        "visibility": p.visibility.astype(int).tolist(),
        "joints3d": p.joints3d.tolist(),
        "center": p.center.tolist(),
        "bbox": p.bbox.tolist(),
        "albedo": p.albedo.tolist(),
        "area": p.area,
    }


def write_dataset(scenes, out_dir, extra=None):
    """Write scenes as PNG images/masks, JSON annotations and a checksummed manifest."""
    out = Path(out_dir)
    for sub in ("images", "masks", "annotations", "centermaps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, scene in enumerate(scenes):
        name = f"{idx:04d}"
        files = {
            f"images/{name}.png": lambda p, s=scene: Image.fromarray(
                np.round(s.image * 255).astype(np.uint8)).save(p),
            f"centermaps/{name}.png": lambda p, s=scene: save_centermap_png(s.global_centermap, p),
        }
        for i, person in enumerate(scene.persons):
            files[f"masks/{name}_{i}.png"] = lambda p, m=person.mask: Image.fromarray(
                m.astype(np.uint8) * 255).save(p)
        ann = {
            "index": idx,
            "config": asdict(scene.config),
            "image_size": int(scene.image.shape[0]),
            "achieved_iou": scene.achieved_iou,
            "persons": [_person_json(p) for p in scene.persons],
        }
        files[f"annotations/{name}.json"] = lambda p, a=ann: Path(p).write_text(json.dumps(a, indent=1))
        sums = {}
        for rel, writer in files.items():
            writer(out / rel)
            sums[rel] = _sha256(out / rel)
        entries.append({"index": idx, "seed": scene.config.seed, "preset": scene.config.preset, "files": sums})
    manifest = {"format": "occmesh-scenes/1", "count": len(entries), "scenes": entries}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_dataset(in_dir, verify=True):
    root = Path(in_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest missing")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["scenes"]
    except (ValueError, KeyError) as e:
        raise DatasetError(f"{mpath}: malformed manifest ({e})") from e
    scenes = []
    for entry in entries:
        for rel, digest in entry["files"].items():
            path = root / rel
            if not path.exists():
                raise DatasetError(f"{rel}: missing file")
            if verify and _sha256(path) != digest:
                raise DatasetError(f"{rel}: checksum mismatch")
        name = f"{entry['index']:04d}"
        try:
            ann = json.loads((root / f"annotations/{name}.json").read_text())
            cfg = SceneConfig(**ann["config"])
            image = np.asarray(Image.open(root / f"images/{name}.png").convert("RGB"), dtype=np.float64) / 255.0
            persons = []
            for i, pj in enumerate(ann["persons"]):
                mask = np.asarray(Image.open(root / f"masks/{name}_{i}.png")) > 127
                persons.append(Person(
                    pose6d=np.array(pj["pose6d"]), shape=np.array(pj["shape"]),
                    camera=np.array(pj["camera"]), keypoints2d=np.array(pj["keypoints2d"]),
                    visibility=np.array(pj["visibility"], dtype=bool), joints3d=np.array(pj["joints3d"]),
                    mask=mask, center=np.array(pj["center"]), bbox=np.array(pj["bbox"]),
                    albedo=np.array(pj["albedo"]),
                ))
        except (KeyError, TypeError, ValueError, OSError) as e:
            raise DatasetError(f"scene {name}: bad annotation ({e})") from e
        scenes.append(Scene(image=image, persons=persons, config=cfg, achieved_iou=ann["achieved_iou"]))
    return scenes
