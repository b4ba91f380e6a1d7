import json

import numpy as np
import pytest
import torch

from occmesh.body_model import body_forward
from occmesh.context import compute_body_center, render_centermap
from occmesh.synthdata import (
    DatasetError,
    GenerationError,
    SceneConfig,
    generate_scene,
    keypoint_visibility,
    read_dataset,
    render_instances,
    write_dataset,
)


def _alone(spec, person, size):
    """Occlusion oracle: render one person by itself and recompute visibility."""
    with torch.no_grad():
        verts, _ = body_forward(spec, torch.from_numpy(person.pose6d), torch.from_numpy(person.shape))
    inst, _, _ = render_instances(spec, [verts.numpy()], [person.camera], size)
    return inst == 0, keypoint_visibility(person.keypoints2d, inst, 0)


def _box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _assert_same_scene(a, b):
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.global_centermap, b.global_centermap)
    assert len(a.persons) == len(b.persons)
    for p, q in zip(a.persons, b.persons):
        for name in ("pose6d", "shape", "camera", "keypoints2d", "visibility", "joints3d", "mask", "center", "bbox"):
            assert np.array_equal(getattr(p, name), getattr(q, name)), name


def test_generation_is_deterministic():
    cfg = SceneConfig.from_preset("occluded", seed=42)
    _assert_same_scene(generate_scene(cfg), generate_scene(cfg))


def test_different_seeds_differ():
    a = generate_scene(SceneConfig(seed=1))
    b = generate_scene(SceneConfig(seed=2))
    assert not np.array_equal(a.image, b.image)


def test_single_person_nothing_occludes(spec):
    for seed in range(5):
        scene = generate_scene(SceneConfig(n_persons=1, seed=seed))
        (p,) = scene.persons
        mask, vis = _alone(spec, p, 224)
        assert np.array_equal(p.mask, mask)
        inside = ((p.keypoints2d >= -0.5) & (p.keypoints2d < 223.5)).all(1)
        assert np.array_equal(p.visibility, inside)


def test_overlap_target_and_rear_occlusion(spec):
    for seed in range(10):
        scene = generate_scene(SceneConfig(n_persons=2, overlap_target=0.7, overlap_tolerance=0.1, seed=seed))
        a, b = scene.persons
        assert 0.6 <= _box_iou(a.bbox, b.bbox) <= 0.8
        rear = a if a.camera[0] < b.camera[0] else b  # smaller scale = farther away
        _, vis_alone = _alone(spec, rear, 224)
        assert rear.visibility.sum() < vis_alone.sum()


def test_severe_preset_iou_above_threshold():
    for seed in range(10):
        scene = generate_scene(SceneConfig.from_preset("severe", seed=seed))
        a, b = scene.persons
        assert _box_iou(a.bbox, b.bbox) > 0.6


def test_scene_invariants(spec):
    for seed, preset in enumerate(("clear", "occluded", "severe", "occluded")):
        scene = generate_scene(SceneConfig.from_preset(preset, n_persons=2 + seed % 2, seed=100 + seed))
        masks = np.stack([p.mask for p in scene.persons])
        assert (masks.sum(0) <= 1).all()
        assert np.allclose(scene.global_centermap, render_centermap(scene.centers, 224, 224), atol=1e-6)
        body = np.any(np.abs(scene.image - 0.5) > 1e-9, axis=-1)
        assert not (masks.any(0) & ~body).any()
        for p in scene.persons:
            assert p.visibility.sum() >= 5
            assert np.allclose(compute_body_center(p.keypoints2d, p.visibility), p.center)
            alone_mask, vis_alone = _alone(spec, p, 224)
            # occluders only remove pixels and keypoints
            assert not (p.mask & ~alone_mask).any()
            assert not (p.visibility & ~vis_alone).any()


def test_image_quantized_to_bytes():
    img = generate_scene(SceneConfig(seed=3)).image
    assert img.min() >= 0 and img.max() <= 1
    assert np.allclose(img * 255, np.round(img * 255))


def test_unattainable_overlap_raises():
    cfg = SceneConfig(n_persons=2, overlap_target=1.0, overlap_tolerance=0.0, max_attempts=30, seed=0)
    with pytest.raises(GenerationError, match="IoU"):
        generate_scene(cfg)


@pytest.mark.parametrize("kw", [{"n_persons": 0}, {"n_persons": 5}, {"overlap_target": 1.5}, {"pose_noise": -1.0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)


def test_dataset_round_trip(tmp_path):
    scenes = [generate_scene(SceneConfig.from_preset(p, seed=k)) for k, p in enumerate(("clear", "severe", "occluded"))]
    manifest = write_dataset(scenes, tmp_path / "d", extra={"note": "x"})
    assert manifest["count"] == 3 and manifest["note"] == "x"
    back = read_dataset(tmp_path / "d")
    for a, b in zip(scenes, back):
        _assert_same_scene(a, b)
        assert a.config == b.config
        assert a.achieved_iou == b.achieved_iou


def test_dataset_rewrite_identical_checksums(tmp_path):
    scenes = [generate_scene(SceneConfig(seed=k)) for k in range(2)]
    m1 = write_dataset(scenes, tmp_path / "a")
    m2 = write_dataset(scenes, tmp_path / "b")
    assert m1 == m2


def test_dataset_missing_file(tmp_path):
    write_dataset([generate_scene(SceneConfig(seed=0))], tmp_path)
    (tmp_path / "masks" / "0000_1.png").unlink()
    with pytest.raises(DatasetError, match="missing"):
        read_dataset(tmp_path)


def test_dataset_checksum_mismatch(tmp_path):
    write_dataset([generate_scene(SceneConfig(seed=0))], tmp_path)
    ann = tmp_path / "annotations" / "0000.json"
    data = json.loads(ann.read_text())
    data["achieved_iou"] = 0.123
    ann.write_text(json.dumps(data))
    with pytest.raises(DatasetError, match="checksum"):
        read_dataset(tmp_path)
    assert read_dataset(tmp_path, verify=False)[0].achieved_iou == 0.123


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)
