"""Training objectives: per-instance supervision, interpenetration and depth ordering."""

from dataclasses import dataclass, field
import logging

import numpy as np
import torch
import torch.nn.functional as F

from .body_model import PELVIS, body_forward
from .fields import build_sdf, rasterize, sample_sdf
from .errors import ConfigError
from .geometry import project_weak_perspective, rot6d_to_matrix

log = logging.getLogger(__name__)

MIN_VISIBLE_KEYPOINTS = 5


@dataclass
class LossWeights:
    single: float = 1.0
    collision: float = 0.2
    depth: float = 0.4
    keypoints2d: float = 5.0
    joints3d: float = 5.0
    pose: float = 1.0
    shape: float = 0.001

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative")


@dataclass
class InstanceTarget:
    """Supervision for one person. 2D keypoints are in normalized image units, 24-joint layout."""

    keypoints2d: torch.Tensor  # (24, 2)
    visibility: torch.Tensor  # (24,) bool
    params: object = None  # BodyParams, optional
    joints3d: torch.Tensor = None  # (24, 3), optional
    mask: np.ndarray = None  # (H, W) bool, optional

    def num_visible(self):
        return int(torch.as_tensor(self.visibility).sum())


@dataclass
class LossComponents:
    single: torch.Tensor
    collision: torch.Tensor
    depth: torch.Tensor
    extras: dict = field(default_factory=dict)


def instance_components(pred, target, spec, joints=None):
    """Unweighted per-instance terms: 2D L1, 3D joint MSE, rotation MSE, shape MSE.

    ``joints`` may pass precomputed posed joints of ``pred`` to skip a forward pass.
    Terms without supervision are ``None``.
    """
    dtype = pred.pose.dtype
    if joints is None:
        _, joints = body_forward(spec, pred.pose, pred.shape)
    out = {"keypoints2d": None, "joints3d": None, "pose": None, "shape": None}
    if target.keypoints2d is not None:
        vis = torch.as_tensor(target.visibility, dtype=torch.bool)
        if vis.any():
            proj = project_weak_perspective(joints, pred.camera)
            gt = torch.as_tensor(target.keypoints2d, dtype=dtype)
            out["keypoints2d"] = (proj[vis] - gt[vis]).abs().mean()
        else:
            log.warning("instance has no visible keypoints; 2D term is zero")
            out["keypoints2d"] = joints.sum() * 0.0
    if target.joints3d is not None:
        gt = torch.as_tensor(target.joints3d, dtype=dtype)
        rel = joints - joints[PELVIS]
        gt_rel = gt - gt[PELVIS]
        out["joints3d"] = ((rel - gt_rel) ** 2).mean()
    if target.params is not None:
        R = rot6d_to_matrix(pred.pose)
        R_gt = rot6d_to_matrix(torch.as_tensor(target.params.pose, dtype=dtype))
        out["pose"] = ((R - R_gt) ** 2).mean()
        out["shape"] = ((pred.shape - torch.as_tensor(target.params.shape, dtype=dtype)) ** 2).mean()
    return out


def loss_instance(pred, target, spec, weights=None, joints=None):
    weights = weights or LossWeights()
    if target.keypoints2d is None and target.joints3d is None and target.params is None:
        raise ValueError("instance target carries no supervision")
    comps = instance_components(pred, target, spec, joints)
    total = pred.pose.new_zeros(())
    for name, value in comps.items():
        if value is not None:
            total = total + getattr(weights, name) * value
    return total


def loss_single(preds, targets, spec, weights=None, joints=None):
    """Mean instance loss over persons with at least five visible keypoints."""
    if len(preds) != len(targets) or not preds:
        raise ValueError("need equally many predictions and targets (>= 1)")
    terms = []
    for i, (p, t) in enumerate(zip(preds, targets)):
        if t.num_visible() < MIN_VISIBLE_KEYPOINTS:
            continue
        terms.append(loss_instance(p, t, spec, weights, None if joints is None else joints[i]))
    if not terms:
        return preds[0].pose.new_zeros(())
    return torch.stack(terms).mean()


def loss_collision(meshes, resolution=32, grids=None, rng=None, min_separation=0.0):
    """Sum over ordered pairs i != j of the interior-distance field of mesh i at mesh j's vertices.

    ``meshes`` are ``(vertices, faces)`` pairs in one shared 3D frame. Fields are
    built from detached vertices unless ``grids`` supplies them. With a numpy
    ``rng`` each field lattice gets a random sub-voxel offset, which turns the
    discretization bias of the interpolated field into zero-mean noise across
    training steps.

    Pairs whose vertices are on average closer than ``min_separation`` are
    treated as duplicate estimates of one body rather than two colliding
    bodies and are skipped.

    Fields built here ride along with their mesh's centroid: mesh ``i``'s field
    is sampled at ``v_j - (c_i - stop_grad(c_i))``, which leaves the value
    unchanged and lets the translation of the field itself contribute to the
    gradient.
    """
    if not meshes:
        raise ValueError("need at least one mesh")
    verts0 = torch.as_tensor(meshes[0][0])
    total = verts0.new_zeros(())
    if len(meshes) < 2:
        return total
    verts = [torch.as_tensor(v) for v, _ in meshes]
    if grids is None:
        offsets = [None if rng is None else rng.uniform(size=3) for _ in meshes]
        grids = [build_sdf(v, f, resolution, o) for (v, f), o in zip(meshes, offsets)]
        drift = [v.mean(0) - v.mean(0).detach() for v in verts]
    else:
        drift = [0.0] * len(meshes)
    for i in range(len(meshes)):
        for j in range(len(meshes)):
            if i == j:
                continue
            if min_separation > 0 and verts[i].shape == verts[j].shape:
                gap = (verts[i] - verts[j]).detach().norm(dim=-1).mean()
                if gap < min_separation:
                    continue
            total = total + sample_sdf(grids[i], verts[j] - drift[i]).sum()
    return total


@dataclass
class RenderConfig:
    size: int = 64
    sharpness: float = 50.0
    cutoff: float = 12.0


def loss_depth(meshes, cam, masks, render_cfg=None):
    """Penalize pixels where the ground-truth owner renders behind the most visible instance.

    ``masks`` are pairwise-disjoint (H, W) boolean instance masks at render resolution.
    Returns the mean of ``softplus(d_gt - d_front)`` over violating pixels.
    """
    cfg = render_cfg or RenderConfig()
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (len(meshes), cfg.size, cfg.size):
        raise ConfigError(f"masks {masks.shape} do not match {len(meshes)} meshes at {cfg.size}x{cfg.size}")
    if (masks.sum(0) > 1).any():
        raise ValueError("instance masks overlap")
    r = rasterize(meshes, cam, cfg.size, cfg.size, cfg.sharpness, cfg.cutoff)
    return depth_order_penalty(r, masks)


def depth_order_penalty(render, masks):
    N = render.depth.shape[0]
    gt = torch.from_numpy(np.where(masks.any(0), masks.argmax(0), -1))
    front = render.most_visible()
    depth = render.depth
    total = depth.new_zeros(())
    count = 0
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            sel = (gt == i) & (front == j) & torch.isfinite(depth[i]) & torch.isfinite(depth[j])
            if sel.any():
                total = total + F.softplus(depth[i][sel] - depth[j][sel]).sum()
                count += int(sel.sum())
    return total / count if count else total


def total_loss(components, weights=None):
    w = weights or LossWeights()
    return w.single * components.single + w.collision * components.collision + w.depth * components.depth
