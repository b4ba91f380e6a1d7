import numpy as np
import pytest
from hypothesis import given, strategies as st

from occmesh.metrics import COCO_SIGMAS, OKS_THRESHOLDS, average_precision, mpjpe, oks, pmpjpe, pve

from oracles import exhaustive_ap, oks_oracle, random_rotation


def _skeleton(rng, n=24):
    return rng.normal(scale=0.3, size=(n, 3))


# ---------------------------------------------------------------------------
# 3D errors


def test_mpjpe_zero_for_identical():
    x = np.random.default_rng(0).normal(size=(24, 3))
    assert mpjpe(x, x) == 0.0


def test_mpjpe_ignores_translation():
    rng = np.random.default_rng(1)
    x = _skeleton(rng)
    assert mpjpe(x + [1.0, -2.0, 3.0], x) < 1e-9


def test_mpjpe_hand_value():
    gt = np.zeros((3, 3))
    pred = np.array([[0, 0, 0], [0.003, 0, 0], [0, 0.004, 0]], dtype=float)
    assert mpjpe(pred, gt) == pytest.approx((0 + 3 + 4) / 3)


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((24, 3)), np.zeros((17, 3)))


def test_pmpjpe_similarity_invariance():
    rng = np.random.default_rng(2)
    for _ in range(100):
        gt = _skeleton(rng)
        s = rng.uniform(0.3, 3.0)
        R = random_rotation(rng)
        t = rng.normal(size=3)
        assert pmpjpe(s * gt @ R.T + t, gt) < 1e-6


def test_pmpjpe_identity_zero():
    gt = _skeleton(np.random.default_rng(3))
    assert pmpjpe(gt, gt) < 1e-9


def test_pmpjpe_not_above_mpjpe():
    rng = np.random.default_rng(4)
    for _ in range(100):
        gt = _skeleton(rng)
        pred = gt + rng.normal(scale=0.1, size=gt.shape)
        assert pmpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


@given(st.integers(0, 2 ** 31 - 1))
def test_pmpjpe_nonnegative_and_bounded(seed):
    rng = np.random.default_rng(seed)
    gt, pred = _skeleton(rng), _skeleton(rng)
    v = pmpjpe(pred, gt)
    # aligning to the scaled-to-zero prediction is always available
    spread = np.linalg.norm(gt - gt.mean(0), axis=-1).mean() * 1000
    assert 0 <= v <= spread + 1e-6


def test_pve_root_alignment():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(50, 3))
    assert pve(v + 2.0, v) < 1e-9
    assert pve(v, v, pred_root=np.zeros(3), gt_root=np.ones(3)) == pytest.approx(np.sqrt(3) * 1000)


# ---------------------------------------------------------------------------
# OKS


def test_oks_matches_hand_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        gt = rng.uniform(0, 200, size=(17, 2))
        pred = gt + rng.normal(scale=5, size=gt.shape)
        vis = rng.uniform(size=17) < 0.7
        area = rng.uniform(500, 20000)
        assert oks(pred, gt, vis, area) == pytest.approx(oks_oracle(pred, gt, vis, area, COCO_SIGMAS), rel=1e-12)


def test_oks_perfect_and_invisible():
    gt = np.arange(34, dtype=float).reshape(17, 2)
    assert oks(gt, gt, np.ones(17, bool), 1000.0) == 1.0
    assert oks(gt + 50, gt, np.zeros(17, bool), 1000.0) == 0.0


def test_oks_single_keypoint_hand_value():
    gt = np.zeros((17, 2))
    pred = np.zeros((17, 2))
    pred[0] = [3.0, 4.0]
    vis = np.zeros(17, bool)
    vis[0] = True
    k = 2 * COCO_SIGMAS[0]
    assert oks(pred, gt, vis, 100.0) == pytest.approx(np.exp(-25.0 / (2 * 100.0 * k * k)))


@given(st.floats(0, 100), st.floats(1, 1e4))
def test_oks_in_unit_interval(offset, area):
    gt = np.zeros((17, 2))
    v = oks(gt + offset, gt, np.ones(17, bool), area)
    assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------------------
# AP


def _person(rng, cx, cy, size=60.0):
    kp = np.array([cx, cy]) + rng.uniform(-size / 2, size / 2, size=(17, 2))
    return {"keypoints": kp, "visible": np.ones(17, bool), "area": size * size * 4}


def _crafted_case(rng):
    """1 to 3 well-separated people; predictions near some of them plus far-away false positives."""
    n = int(rng.integers(1, 4))
    gts = [_person(rng, 150 + 400 * k, 150) for k in range(n)]
    preds = []
    for g in gts:
        if rng.uniform() < 0.8:
            noise = rng.choice([0.5, 2.0, 5.0, 10.0, 20.0])
            preds.append({"keypoints": g["keypoints"] + rng.normal(scale=noise, size=(17, 2))})
    for _ in range(int(rng.integers(0, 2))):
        preds.append({"keypoints": rng.uniform(0, 60, size=(17, 2)) + [150, 2000]})
    return preds, gts


def test_ap_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    scores = iter(rng.permutation(1000) / 1000.0 + 0.0005)
    for _ in range(50):
        images = []
        for _ in range(int(rng.integers(1, 4))):
            preds, gts = _crafted_case(rng)
            for p in preds:
                p["score"] = float(next(scores))
            images.append((preds, gts))
        got = average_precision(images)["AP"]
        want = exhaustive_ap(images, OKS_THRESHOLDS, COCO_SIGMAS)
        assert got == pytest.approx(want, abs=1e-9)


def test_ap_perfect_predictions():
    rng = np.random.default_rng(8)
    gts = [_person(rng, 150, 150), _person(rng, 600, 150)]
    preds = [{"keypoints": g["keypoints"].copy(), "score": s} for g, s in zip(gts, (0.9, 0.8))]
    r = average_precision([(preds, gts)])
    assert r["AP"] == pytest.approx(1.0)
    assert r["AR"] == pytest.approx(1.0)
    assert r["AP50"] == pytest.approx(1.0)


def test_ap_no_predictions_is_zero():
    rng = np.random.default_rng(9)
    assert average_precision([([], [_person(rng, 150, 150)])])["AP"] == 0.0


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(10)
    images = []
    for _ in range(5):
        preds, gts = _crafted_case(rng)
        for p in preds:
            p["score"] = float(rng.uniform())
        images.append((preds, gts))
    per = average_precision(images)["per_threshold"]
    assert all(b <= a + 1e-12 for a, b in zip(per, per[1:]))


def test_ap_medium_and_large_buckets():
    rng = np.random.default_rng(11)
    small = _person(rng, 150, 150, size=30.0)  # area 3600: medium
    big = _person(rng, 600, 150, size=100.0)  # area 40000: large
    preds = [{"keypoints": small["keypoints"].copy(), "score": 0.9}]
    r = average_precision([(preds, [small, big])])
    assert r["AP_M"] == pytest.approx(1.0)
    assert r["AP_L"] == 0.0
