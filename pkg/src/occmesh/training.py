"""Training, checkpointing and evaluation of the conditioned regressor."""

import csv
import json
import logging
from pathlib import Path
import time

import numpy as np
import torch

from .body_model import COCO17_FROM_SMPL24, PELVIS, BodyParams, body_forward
from .conditioning import ConditionedRegressor
from .config import RunConfig, substream, substream_seed
from .context import (
    ContextEstimator,
    estimate_context,
    extract_local_centermaps,
    loss_context,
    render_centermap,
    render_keypoint_heatmaps,
)
from .errors import ConfigError
from .geometry import normalized_to_pixel, pixel_to_normalized
from .losses import InstanceTarget, LossComponents, RenderConfig, loss_collision, loss_depth, loss_single, total_loss
from .metrics import average_precision, mpjpe, pmpjpe, pve
from .synthdata import DatasetError, screen_vertices, toy_spec, world_vertices

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "occmesh-checkpoint/1"
LOG_FIELDS = ("step", "total", "single", "collision", "depth", "seconds")
MATCH_RADIUS = 10.0  # px, estimated center to ground-truth center


class NumericalError(RuntimeError):
    pass


def set_determinism(enabled=True):
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = not enabled


# ---------------------------------------------------------------------------
# per-instance inputs and targets


def instance_context(scene, i, kind, global_map=None, center=None):
    """Context maps for person ``i`` of ``scene``; (C, H, W) float32.

    ``global_map`` and ``center`` replace the ground-truth versions when given.
    """
    H, W = scene.image.shape[:2]
    person = scene.persons[i] if i is not None else None
    center = person.center if center is None else center
    local = render_centermap([center], H, W)
    if kind == "local":
        maps = local[None]
    elif kind == "local+global":
        g = scene.global_centermap if global_map is None else global_map
        maps = np.stack([g, local])
    elif kind == "keypoints":
        if person is None:
            raise ConfigError("keypoint context needs ground-truth keypoints")
        kp, vis = person.keypoints17
        maps = render_keypoint_heatmaps(kp, vis, H, W)
    else:
        raise ConfigError(f"unknown context kind {kind!r}")
    return maps.astype(np.float32)


def image_tensor(scene):
    return torch.from_numpy(scene.image.astype(np.float32)).permute(2, 0, 1)


def instance_target(scene, i):
    p = scene.persons[i]
    size = scene.image.shape[0]
    f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
    return InstanceTarget(
        keypoints2d=f32(pixel_to_normalized(p.keypoints2d, size)),
        visibility=torch.as_tensor(p.visibility),
        params=BodyParams(f32(p.pose6d), f32(p.shape), f32(p.camera)),
        joints3d=f32(p.joints3d),
        mask=p.mask,
    )


def downsample_mask(mask, size):
    """Nearest sample of a full-resolution mask at the pixel centers of a ``size`` grid."""
    H, W = mask.shape
    centers = (np.arange(size) + 0.5) / size
    rows = np.clip(np.floor(centers * H), 0, H - 1).astype(int)
    cols = np.clip(np.floor(centers * W), 0, W - 1).astype(int)
    return mask[np.ix_(rows, cols)]


def check_scenes(scenes, cfg):
    """Pre-flight schema check of a dataset against the run configuration."""
    if not scenes:
        raise DatasetError("dataset is empty")
    for k, s in enumerate(scenes):
        if s.image.shape != (cfg.model.input_size, cfg.model.input_size, 3):
            raise DatasetError(f"scene {k}: image {s.image.shape}, model expects {cfg.model.input_size}x{cfg.model.input_size}x3")
        if not s.persons:
            raise DatasetError(f"scene {k}: no persons")
        for p in s.persons:
            if p.keypoints2d.shape != (24, 2) or p.pose6d.shape != (24, 6) or p.mask.shape != s.image.shape[:2]:
                raise DatasetError(f"scene {k}: malformed person annotation")


# ---------------------------------------------------------------------------
# losses on a batch of scenes


def scene_losses(model, scenes, cfg, spec=None, grid_rng=None):
    """Loss components for all persons of ``scenes``; collision and depth on the first few scenes."""
    spec = spec or toy_spec()
    kind = cfg.model.context
    images, contexts, targets, owner = [], [], [], []
    for si, scene in enumerate(scenes):
        img = image_tensor(scene)
        for i in range(len(scene.persons)):
            images.append(img)
            contexts.append(torch.from_numpy(instance_context(scene, i, kind)))
            targets.append(instance_target(scene, i))
            owner.append(si)
    x = torch.stack(images)
    c = torch.stack(contexts) if cfg.model.fusion_mode != "none" else None
    pred = model(x, c)
    verts, joints = body_forward(spec, pred.pose, pred.shape)
    w = cfg.loss.weights
    preds = [pred[k] for k in range(len(targets))]
    single = loss_single(preds, targets, spec, w, joints)

    collision = single.new_zeros(())
    depth = single.new_zeros(())
    owner = np.array(owner)
    multi = [si for si in range(min(cfg.loss.multi_scenes, len(scenes))) if len(scenes[si].persons) > 1]
    rcfg = RenderConfig(size=cfg.loss.render_size, sharpness=cfg.loss.sharpness)
    for si in multi:
        idx = np.flatnonzero(owner == si)
        world = [(world_vertices(verts[k], pred.camera[k]), spec.faces) for k in idx]
        collision = collision + loss_collision(
            world, cfg.loss.sdf_resolution, rng=grid_rng, min_separation=cfg.loss.collision_min_separation
        )
        screen = [(screen_vertices(verts[k], pred.camera[k]), spec.faces) for k in idx]
        masks = np.stack([downsample_mask(p.mask, rcfg.size) for p in scenes[si].persons])
        depth = depth + loss_depth(screen, [1.0, 0.0, 0.0], masks, rcfg)
    if multi:
        collision = collision / len(multi)
        depth = depth / len(multi)
    return LossComponents(single=single, collision=collision, depth=depth)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, meta, optimizer=None):
    """Archive of named parameter arrays plus a JSON snapshot of the run metadata."""
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta, format=CHECKPOINT_FORMAT)
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, state in sd["state"].items():
            for k, v in state.items():
                arrays[f"optim/{pid}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        meta["optimizer_param_groups"] = sd["param_groups"]
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    """Return (meta dict, model state dict, optimizer state dict or None)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            model_sd = {k[6:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("model/")}
            optim = {}
            for k in z.files:
                if k.startswith("optim/"):
                    _, pid, name = k.split("/", 2)
                    optim.setdefault(int(pid), {})[name] = torch.from_numpy(z[k].copy())
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(f"{path}: unreadable checkpoint ({e})") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DatasetError(f"{path}: not a checkpoint archive")
    opt_sd = None
    if "optimizer_param_groups" in meta:
        opt_sd = {"state": optim, "param_groups": meta["optimizer_param_groups"]}
    return meta, model_sd, opt_sd


def load_regressor(path):
    meta, sd, _ = read_checkpoint(path)
    if meta.get("kind") != "regressor":
        raise ConfigError(f"{path}: not a regressor checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    model = ConditionedRegressor(cfg.model)
    model.load_state_dict(sd)
    model.eval()
    return model, cfg, meta


def load_estimator(path):
    meta, sd, _ = read_checkpoint(path)
    if meta.get("kind") != "context_estimator":
        raise ConfigError(f"{path}: not a context estimator checkpoint")
    model = ContextEstimator()
    model.load_state_dict(sd)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """Single-writer training loop. All randomness comes from ``cfg.train.seed``."""

    def __init__(self, cfg, scenes, spec=None):
        cfg.validate()
        check_scenes(scenes, cfg)
        self.cfg = cfg
        self.spec = spec or toy_spec()
        n_train = len(scenes) - cfg.train.holdout_scenes
        if n_train < 1:
            raise ConfigError("holdout_scenes leaves no training scenes")
        self.scenes = scenes[:n_train]
        set_determinism(cfg.train.deterministic)
        torch.manual_seed(substream_seed(cfg.train.seed, "init"))
        self.model = ConditionedRegressor(cfg.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.train.lr)
        self.order = substream(cfg.train.seed, "order")
        self.grid_rng = substream(cfg.train.seed, "grid")
        self.step = 0
        self.best = (float("inf"), -1)
        self.ema = None

    def sample_batch(self):
        k = min(self.cfg.train.batch_scenes, len(self.scenes))
        return [self.scenes[i] for i in self.order.choice(len(self.scenes), size=k, replace=False)]

    def train_step(self):
        self.model.train()
        t0 = time.perf_counter()
        comps = scene_losses(self.model, self.sample_batch(), self.cfg, self.spec, self.grid_rng)
        loss = total_loss(comps, self.cfg.loss.weights)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {self.step + 1}")
        self.optimizer.zero_grad()
        loss.backward()
        if self.cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.ema = value if self.ema is None else 0.9 * self.ema + 0.1 * value
        return {
            "step": self.step,
            "total": value,
            "single": float(comps.single.detach()),
            "collision": float(comps.collision.detach()),
            "depth": float(comps.depth.detach()),
            "seconds": time.perf_counter() - t0,
        }

    def meta(self):
        return {
            "kind": "regressor",
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "step": self.step,
            "order_state": self.order.bit_generator.state,
            "grid_state": self.grid_rng.bit_generator.state,
            "ema": self.ema,
            "best": list(self.best),
        }

    def save(self, path):
        save_checkpoint(path, self.model, self.meta(), self.optimizer)

    def resume(self, path):
        meta, sd, opt_sd = read_checkpoint(path)
        if meta.get("config_hash") != self.cfg.hash():
            raise ConfigError(f"{path}: checkpoint config differs from the run config")
        self.model.load_state_dict(sd)
        if opt_sd is not None:
            self.optimizer.load_state_dict(opt_sd)
        self.order.bit_generator.state = meta["order_state"]
        self.grid_rng.bit_generator.state = meta["grid_state"]
        self.step = meta["step"]
        self.ema = meta["ema"]
        self.best = tuple(meta["best"])

    def fit(self, out_dir=None, steps=None):
        steps = self.cfg.train.steps if steps is None else steps
        out = Path(out_dir) if out_dir else None
        rows = []
        writer = fh = None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            new = self.step == 0 or not (out / "train_log.csv").exists()
            fh = open(out / "train_log.csv", "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
        try:
            for _ in range(steps):
                row = self.train_step()
                rows.append(row)
                if writer and self.step % self.cfg.train.log_every == 0:
                    writer.writerow(row)
                    fh.flush()
                log.info("step %d loss %.5f (%.2fs)", row["step"], row["total"], row["seconds"])
                if self.ema < self.best[0]:
                    self.best = (self.ema, self.step)
                    if out:
                        self.save(out / "best.npz")
                every = self.cfg.train.checkpoint_every
                if out and every and self.step % every == 0:
                    self.save(out / f"step_{self.step:06d}.npz")
        finally:
            if fh:
                fh.close()
        if out:
            self.save(out / "final.npz")
        return rows


def train_context_estimator(scenes, steps, seed=0, batch=4, lr=1e-3):
    """Fit the center-heatmap estimator on ground-truth global maps."""
    torch.manual_seed(substream_seed(seed, "context-init"))
    model = ContextEstimator()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = substream(seed, "context-order")
    model.train()
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(scenes), size=min(batch, len(scenes)), replace=False)
        x = torch.stack([image_tensor(scenes[i]) for i in idx])
        gt = torch.stack([torch.from_numpy(scenes[i].global_centermap.astype(np.float32)) for i in idx])[:, None]
        loss = loss_context(model(x), gt)
        if not torch.isfinite(loss):
            raise NumericalError("non-finite context loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, losses


# ---------------------------------------------------------------------------
# evaluation


def predict_instances(model, scene, contexts):
    """Run the regressor once per instance (batch size one) in eval mode."""
    model.eval()
    img = image_tensor(scene)[None]
    out = []
    with torch.no_grad():
        for c in contexts:
            ctx = None if model.cfg.fusion_mode == "none" else torch.from_numpy(c)[None]
            out.append(model(img, ctx)[0])
    return out


def _person_metrics(pred, person, spec):
    with torch.no_grad():
        pv, pj = body_forward(spec, pred.pose.double(), pred.shape.double())
        gv, gj = body_forward(spec, torch.from_numpy(person.pose6d), torch.from_numpy(person.shape))
    pj, pv, gj, gv = pj.numpy(), pv.numpy(), gj.numpy(), gv.numpy()
    return {
        "mpjpe": mpjpe(pj, person.joints3d),
        "pmpjpe": pmpjpe(pj, person.joints3d),
        "pve": pve(pv, gv, pj[PELVIS], gj[PELVIS]),
    }, pj


def _keypoints17_px(pred_joints, camera, size):
    cam = camera.double().numpy()
    xy = cam[0] * pred_joints[:, :2] + cam[1:3]
    return normalized_to_pixel(xy, size)[COCO17_FROM_SMPL24]


def _summarize(rows):
    if not rows:
        return {"count": 0}
    out = {"count": len(rows)}
    for k in ("mpjpe", "pmpjpe", "pve"):
        out[k] = float(np.mean([r[k] for r in rows]))
    return out


def evaluate(model, scenes, spec=None, estimator=None):
    """Metrics per occlusion bucket with ground-truth context, or estimated context if ``estimator`` is given."""
    spec = spec or toy_spec()
    kind = model.cfg.context
    if estimator is not None and kind == "keypoints":
        raise ConfigError("estimated context is only available for center-map contexts")
    rows, ap_images, thetas = [], {}, []
    missed = 0
    for scene in scenes:
        size = scene.image.shape[0]
        preset = scene.config.preset or "unlabelled"
        if estimator is None:
            contexts = [instance_context(scene, i, kind) for i in range(len(scene.persons))]
            owners = list(range(len(scene.persons)))
            scores = [1.0] * len(contexts)
        else:
            gmap = estimate_context(estimator, scene.image)
            dets = extract_local_centermaps(gmap)
            contexts = [instance_context(scene, None, kind, global_map=gmap, center=c) for c, _, _ in dets]
            scores = [float(peak) for _, _, peak in dets]
            owners = _assign(dets, scene.persons)
        preds = predict_instances(model, scene, contexts)
        thetas.append([p.to_vector().numpy() for p in preds])
        ap_preds = []
        matched = set()
        for k, (pred, owner, score) in enumerate(zip(preds, owners, scores)):
            joints = body_forward(spec, pred.pose.double(), pred.shape.double())[1].numpy()
            ap_preds.append({"keypoints": _keypoints17_px(joints, pred.camera, size), "score": score})
            if owner is not None and owner not in matched:
                matched.add(owner)
                m, _ = _person_metrics(pred, scene.persons[owner], spec)
                m["preset"] = preset
                rows.append(m)
        missed += len(scene.persons) - len(matched)
        gts = []
        for p in scene.persons:
            kp, vis = p.keypoints17
            gts.append({"keypoints": kp, "visible": vis, "area": p.area})
        ap_images.setdefault(preset, []).append((ap_preds, gts))

    report = {"context_source": "estimated" if estimator is not None else "ground_truth", "buckets": {}}
    for preset in sorted(ap_images):
        summary = _summarize([r for r in rows if r["preset"] == preset])
        ap = average_precision(ap_images[preset])
        summary.update({k: ap[k] for k in ("AP", "AP50", "AP75", "AP_M", "AP_L", "AR")})
        report["buckets"][preset] = summary
    overall = _summarize(rows)
    ap = average_precision([im for ims in ap_images.values() for im in ims])
    overall.update({k: ap[k] for k in ("AP", "AP50", "AP75", "AP_M", "AP_L", "AR")})
    overall["missed_persons"] = missed
    report["overall"] = overall
    multi = [t for t in thetas if len(t) > 1]
    identical = [all(np.array_equal(t[0], u) for u in t[1:]) for t in multi]
    distinct = [
        all(not np.array_equal(t[a], t[b]) for a in range(len(t)) for b in range(a + 1, len(t))) for t in multi
    ]
    report["identical_theta_fraction"] = float(np.mean(identical)) if multi else None
    report["distinct_theta_fraction"] = float(np.mean(distinct)) if multi else None
    return report


def _assign(dets, persons):
    """Greedy nearest matching of detected centers to ground-truth persons within ``MATCH_RADIUS``."""
    pairs = []
    for k, (c, _, _) in enumerate(dets):
        for i, p in enumerate(persons):
            pairs.append((float(np.linalg.norm(np.asarray(c) - p.center)), k, i))
    owners = [None] * len(dets)
    used = set()
    for d, k, i in sorted(pairs):
        if d > MATCH_RADIUS:
            break
        if owners[k] is None and i not in used:
            owners[k] = i
            used.add(i)
    return owners
