import logging

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from occmesh.body_model import BodyParams, body_forward, neutral_params
from occmesh.errors import ConfigError
from occmesh.fields import box_mesh, build_sdf, hard_rasterize
from occmesh.geometry import project_weak_perspective, rot6d_to_matrix
from occmesh.gradcheck import relative_error
from occmesh.losses import (
    InstanceTarget,
    LossComponents,
    LossWeights,
    RenderConfig,
    instance_components,
    loss_collision,
    loss_depth,
    loss_instance,
    loss_single,
    total_loss,
)

from oracles import box_interior_distance


def test_published_weights():
    w = LossWeights()
    assert (w.single, w.collision, w.depth) == (1.0, 0.2, 0.4)


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(depth=-1)


def _random_params(rng, scale=0.3):
    p = neutral_params()
    return BodyParams(
        p.pose + torch.from_numpy(rng.normal(scale=scale, size=p.pose.shape)),
        torch.from_numpy(rng.normal(size=10)),
        torch.tensor([rng.uniform(0.7, 1.2), *rng.normal(scale=0.1, size=2)], dtype=torch.float64),
    )


def _consistent_target(spec, params, vis=None):
    _, joints = body_forward(spec, params.pose, params.shape)
    kp = project_weak_perspective(joints, params.camera)
    vis = torch.ones(24, dtype=torch.bool) if vis is None else vis
    return InstanceTarget(keypoints2d=kp.detach(), visibility=vis, params=params, joints3d=joints.detach())


def test_perfect_prediction_has_zero_loss(spec, rng):
    p = _random_params(rng)
    assert float(loss_instance(p, _consistent_target(spec, p), spec)) == pytest.approx(0.0, abs=1e-12)


def test_invisible_keypoints_give_zero_with_warning(spec, rng, caplog):
    p = _random_params(rng)
    t = InstanceTarget(keypoints2d=torch.zeros(24, 2), visibility=torch.zeros(24, dtype=torch.bool))
    with caplog.at_level(logging.WARNING):
        assert float(loss_instance(p, t, spec)) == 0.0
    assert "visible" in caplog.text


def test_no_supervision_is_contract_error(spec, rng):
    with pytest.raises(ValueError):
        loss_instance(_random_params(rng), InstanceTarget(None, torch.zeros(24, dtype=torch.bool)), spec)


def test_instance_loss_matches_hand_sum(spec, rng):
    pred, gt = _random_params(rng), _random_params(rng)
    t = _consistent_target(spec, gt, torch.from_numpy(rng.uniform(size=24) < 0.7))
    _, pj = body_forward(spec, pred.pose, pred.shape)
    _, gj = body_forward(spec, gt.pose, gt.shape)
    vis = t.visibility
    kp2d = (project_weak_perspective(pj, pred.camera)[vis] - t.keypoints2d[vis]).abs().mean()
    j3d = (((pj - pj[0]) - (gj - gj[0])) ** 2).mean()
    pose = ((rot6d_to_matrix(pred.pose) - rot6d_to_matrix(gt.pose)) ** 2).mean()
    shape = ((pred.shape - gt.shape) ** 2).mean()
    expected = 5 * kp2d + 5 * j3d + 1 * pose + 0.001 * shape
    assert float(loss_instance(pred, t, spec)) == pytest.approx(float(expected), rel=1e-12)
    comps = instance_components(pred, t, spec)
    assert float(comps["pose"]) == pytest.approx(float(pose))


def test_single_loss_examples(spec, rng):
    preds = [_random_params(rng) for _ in range(3)]
    targets = [_consistent_target(spec, _random_params(rng)) for _ in range(3)]
    a = float(loss_instance(preds[0], targets[0], spec))
    b = float(loss_instance(preds[1], targets[1], spec))
    assert float(loss_single(preds[:1], targets[:1], spec)) == pytest.approx(a)
    assert float(loss_single(preds[:2], targets[:2], spec)) == pytest.approx((a + b) / 2)
    vis = torch.zeros(24, dtype=torch.bool)
    vis[:4] = True
    targets[2] = InstanceTarget(targets[2].keypoints2d, vis, targets[2].params, targets[2].joints3d)
    assert float(loss_single(preds, targets, spec)) == pytest.approx((a + b) / 2)


def test_single_loss_length_mismatch(spec, rng):
    with pytest.raises(ValueError):
        loss_single([_random_params(rng)], [], spec)


def test_total_loss_arithmetic():
    z = torch.tensor(0.0)
    assert float(total_loss(LossComponents(z, z, z))) == 0.0
    c = LossComponents(torch.tensor(2.0), torch.tensor(5.0), torch.tensor(10.0))
    assert float(total_loss(c)) == pytest.approx(7.0)
    assert float(total_loss(c, LossWeights(1, 0, 0))) == 2.0


def _cube(x0):
    return box_mesh((x0, 0, 0), (x0 + 1, 1, 1))


def test_collision_single_mesh_is_zero():
    v, f = _cube(0)
    assert float(loss_collision([(torch.from_numpy(v), f)], 16)) == 0.0


def test_collision_disjoint_cubes_zero():
    a, b = _cube(0), _cube(3)
    meshes = [(torch.from_numpy(v), f) for v, f in (a, b)]
    assert float(loss_collision(meshes, 32)) == 0.0


def test_collision_matches_vertex_oracle():
    a, b = _cube(0), _cube(0.5)
    meshes = [(torch.from_numpy(v), f) for v, f in (a, b)]
    value = float(loss_collision(meshes, 32))
    oracle = sum(box_interior_distance(p, (0, 0, 0), (1, 1, 1)) for p in b[0])
    oracle += sum(box_interior_distance(p, (0.5, 0, 0), (1.5, 1, 1)) for p in a[0])
    assert value > 0
    assert abs(value - oracle) <= 0.1 * oracle


def test_collision_is_permutation_invariant(rng):
    meshes = [(torch.from_numpy(_cube(x)[0]), _cube(x)[1]) for x in (0.0, 0.4, 0.7)]
    a = float(loss_collision(meshes, 24))
    b = float(loss_collision(meshes[::-1], 24))
    assert a == pytest.approx(b, rel=1e-12)


def test_collision_descent_strictly_decreases():
    # Generic interpenetration: with faces coincident or centered on the other
    # cube's mid-plane the gradient vanishes by symmetry. The loss is only
    # piecewise smooth, so each step backtracks along the gradient.
    a = box_mesh((0, 0, 0), (1, 1, 1), n=4)
    b = box_mesh((0.4, 0.2, 0.1), (1.4, 1.2, 1.1), n=4)
    va, vb = torch.from_numpy(a[0]), torch.from_numpy(b[0])

    def f(shift):
        return loss_collision([(va, a[1]), (vb + shift, b[1])], 32)

    shift = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    loss, lr, values = f(shift), 1e-3, []
    for _ in range(50):
        values.append(float(loss.detach()))
        (g,) = torch.autograd.grad(loss, shift)
        lr *= 2
        while True:
            trial = (shift.detach() - lr * g).requires_grad_(True)
            trial_loss = f(trial)
            if float(trial_loss.detach()) < values[-1] or lr < 1e-10:
                break
            lr /= 2
        shift, loss = trial, trial_loss
    assert values[0] > 0
    assert all(y < x for x, y in zip(values, values[1:]))


def test_collision_gradient_frozen_fields(rng):
    a, b = _cube(0), _cube(0.5)
    grids = [build_sdf(a[0], a[1], 16), build_sdf(b[0], b[1], 16)]
    va = torch.from_numpy(a[0])
    # move vertices off the lattice so the trilinear field is smooth at every sample
    vb = torch.from_numpy(b[0] + rng.uniform(-0.01, 0.01, size=b[0].shape))
    fn = lambda x: loss_collision([(va, a[1]), (x, b[1])], grids=grids)
    assert relative_error(fn, vb) < 1e-3


def test_collision_duplicate_pairs_skipped():
    v, f = _cube(0)
    t = torch.from_numpy(v)
    assert float(loss_collision([(t, f), (t + 0.01, f)], 16, min_separation=0.1)) == 0.0
    assert float(loss_collision([(t, f), (t + 0.01, f)], 16)) > 0


def test_collision_with_jittered_lattice_close_to_oracle():
    a, b = _cube(0), _cube(0.5)
    meshes = [(torch.from_numpy(v), f) for v, f in (a, b)]
    rng = np.random.default_rng(0)
    oracle = sum(box_interior_distance(p, (0, 0, 0), (1, 1, 1)) for p in b[0]) * 2
    for _ in range(3):
        assert abs(float(loss_collision(meshes, 32, rng=rng)) - oracle) <= 0.15 * oracle


def _slab(x0, x1, z, y0=-0.6, y1=0.6):
    v, f = box_mesh((x0, y0, z), (x1, y1, z + 0.2), n=4)
    return torch.from_numpy(v), f


CAM = [1.0, 0.0, 0.0]


def _gt_masks(meshes, size):
    inst, _, _ = hard_rasterize(meshes, np.array(CAM), size, size)
    return np.stack([inst == k for k in range(len(meshes))])


def test_depth_zero_when_order_agrees():
    meshes = [_slab(-0.6, 0.2, 1.0), _slab(-0.2, 0.6, 2.0)]
    masks = _gt_masks(meshes, 32)
    assert float(loss_depth(meshes, CAM, masks, RenderConfig(size=32))) == 0.0


def test_depth_zero_without_contested_pixels():
    meshes = [_slab(-0.9, -0.3, 1.0), _slab(0.3, 0.9, 2.0)]
    masks = _gt_masks(meshes, 32)
    assert float(loss_depth(meshes, CAM, masks, RenderConfig(size=32))) == 0.0


def test_depth_swapped_order_penalized(rng):
    # slab edges sit on pixel boundaries so the soft and hard silhouettes agree
    px = 2.0 / 32
    for _ in range(20):
        xa = px * rng.integers(-11, -3)
        xb = xa + px * rng.integers(3, 7)
        za, zb = sorted(rng.uniform(0.5, 3.0, size=2))
        zb += 0.3
        front = [_slab(xa, xa + 8 * px, za), _slab(xb, xb + 8 * px, zb)]
        masks = _gt_masks(front, 32)
        swapped = [_slab(xa, xa + 8 * px, zb), _slab(xb, xb + 8 * px, za)]
        cfg = RenderConfig(size=32)
        assert float(loss_depth(front, CAM, masks, cfg)) == 0.0
        assert float(loss_depth(swapped, CAM, masks, cfg)) > 0.0


def test_depth_resolution_mismatch():
    meshes = [_slab(-0.6, 0.2, 1.0), _slab(-0.2, 0.6, 2.0)]
    with pytest.raises(ConfigError):
        loss_depth(meshes, CAM, _gt_masks(meshes, 16), RenderConfig(size=32))


def test_depth_overlapping_masks_rejected():
    meshes = [_slab(-0.6, 0.2, 1.0), _slab(-0.2, 0.6, 2.0)]
    masks = np.ones((2, 16, 16), dtype=bool)
    with pytest.raises(ValueError):
        loss_depth(meshes, CAM, masks, RenderConfig(size=16))


def test_depth_gradient_matches_finite_differences():
    front = [_slab(-0.6, 0.2, 1.0), _slab(-0.2, 0.6, 1.3)]
    masks = _gt_masks(front, 16)
    wrong = [_slab(-0.6, 0.2, 1.3), _slab(-0.2, 0.6, 1.0)]
    cfg = RenderConfig(size=16, sharpness=20.0)
    v0 = wrong[0][0]

    # Which pixels are contested is piecewise constant in the image-plane
    # coordinates, so the check runs along depth, where the penalty is smooth.
    def fn(z):
        return loss_depth([(torch.cat([v0[:, :2], z[:, None]], 1), wrong[0][1]), wrong[1]], CAM, masks, cfg)

    assert float(fn(v0[:, 2])) > 0
    assert relative_error(fn, v0[:, 2].clone()) < 1e-3


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_nonnegative(a, b, c):
    comps = LossComponents(torch.tensor(a), torch.tensor(b), torch.tensor(c))
    assert float(total_loss(comps)) >= 0
