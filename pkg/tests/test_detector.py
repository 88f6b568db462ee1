import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccf.channels import HogLuvBackend
from ccf.detector import (
    Detection,
    DetectorModel,
    ModelFormatError,
    _level_box,
    detect,
    dump_model,
    evaluate,
    jitter_boxes,
    lamr_reference_points,
    load_model,
    mine_hard_negatives,
    nms,
    nms_indices,
    parse_model,
    save_model,
    scan,
    train_detector,
)
from ccf.forest import BoostedForest, CandidateFeatureSpace, DecisionTree
from ccf.image import ImagePlane, LabeledBox
from ccf.pyramid import PowerLawModel
from ccf.synthetic import make_detection_scene, make_negative_images


def _leaf_forest(value, window=(32, 16), n_maps=10):
    space = CandidateFeatureSpace("pixel_lookup", window, n_maps)
    tree = DecisionTree([-1], [0.0], [-1], [-1], [value])
    return BoostedForest([tree], [-np.inf], space)


def _model(value=-1.0, **kw):
    return DetectorModel(HogLuvBackend(), (128, 64), _leaf_forest(value), **kw)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 0, 0, 5, 1.0)
    with pytest.raises(ValueError):
        Detection(0, 0, 5, 5, math.nan)


def test_model_validation():
    with pytest.raises(ValueError):
        DetectorModel(HogLuvBackend(), (130, 64), _leaf_forest(1.0))
    with pytest.raises(ValueError):
        DetectorModel(HogLuvBackend(), (128, 64), _leaf_forest(1.0, window=(16, 16)))


def test_blank_image_negative_forest_no_detections():
    img = ImagePlane(np.zeros((3, 200, 160)))
    assert detect(img, _model(-1.0)) == []
    with pytest.raises(ValueError):
        detect(ImagePlane(np.zeros((3, 100, 60))), _model())


def test_positive_forest_fires_everywhere_then_nms():
    img = ImagePlane(np.zeros((3, 160, 96)))
    m = _model(1.0)
    pyr = m.pyramid(img)
    c = scan(m, pyr)
    expected = sum((s.height - 31) * (s.width - 15) for s in pyr.levels if s.height >= 32 and s.width >= 16)
    assert len(c.score) == expected
    dets = detect(img, m)
    assert 1 <= len(dets) < expected


def test_nms_basic():
    d = Detection(0, 0, 10, 10, 1.0)
    assert nms([d]) == [d]
    lo = Detection(0, 0, 10, 10, 0.5)
    assert nms([lo, d]) == [d]
    assert nms([]) == []
    with pytest.raises(ValueError):
        nms_indices(np.zeros((1, 4)) + 1, [1.0], overlap=1.0)


@pytest.mark.parametrize("k", range(5))
def test_nms_matches_frozen_bruteforce(oracles, k):
    kept = nms_indices(oracles[f"nms{k}_boxes"], oracles[f"nms{k}_scores"], 0.65)
    np.testing.assert_array_equal(kept, oracles[f"nms{k}_kept"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_nms_order_independent(seed, n):
    rng = np.random.default_rng(seed)
    boxes = np.concatenate([rng.uniform(0, 50, (n, 2)), rng.uniform(5, 30, (n, 2))], 1)
    scores = rng.permutation(n).astype(float)
    perm = rng.permutation(n)
    a = {tuple(boxes[i]) for i in nms_indices(boxes, scores)}
    b = {tuple(boxes[perm][i]) for i in nms_indices(boxes[perm], scores[perm])}
    assert a == b


def test_evaluate_trivial_cases():
    gts = [[LabeledBox(0, 0, 10, 20)], [LabeledBox(5, 5, 10, 20)]]
    perfect = [[Detection(0, 0, 10, 20, 1.0)], [Detection(5, 5, 10, 20, 0.9)]]
    r = evaluate(perfect, gts)
    assert np.all(r.miss_at_ref == 0) and r.lamr == pytest.approx(1e-10)
    r = evaluate([[], []], gts)
    assert np.all(r.miss_at_ref == 1) and r.lamr == 1.0
    with pytest.raises(ValueError):
        evaluate([[]], gts)


def test_evaluate_hand_fixture():
    gts = [
        [LabeledBox(0, 0, 10, 20)],
        [LabeledBox(0, 0, 10, 20), LabeledBox(30, 0, 10, 20)],
        [LabeledBox(0, 0, 20, 20, ignore=True)],
    ]
    dets = [
        [Detection(0, 0, 10, 20, 0.9), Detection(50, 50, 10, 20, 0.8)],
        [Detection(30, 0, 10, 20, 0.7), Detection(1, 0, 10, 20, 0.3)],
        [Detection(2, 2, 10, 10, 0.6), Detection(60, 60, 10, 10, 0.5)],
    ]
    r = evaluate(dets, gts)
    # by score: TP .9, FP .8, TP .7, ignored .6, FP .5, TP .3
    np.testing.assert_allclose(r.fppi, [0, 0, 1 / 3, 1 / 3, 2 / 3, 2 / 3])
    np.testing.assert_allclose(r.miss_rate, [1, 2 / 3, 2 / 3, 1 / 3, 1 / 3, 0])
    expected_ref = [2 / 3] * 7 + [1 / 3, 0]
    np.testing.assert_allclose(r.miss_at_ref, expected_ref)
    lamr = math.exp(np.mean(np.log(np.maximum(1e-10, expected_ref))))
    assert r.lamr == pytest.approx(lamr)
    assert r.n_gt == 3


def test_evaluate_min_height_turns_small_boxes_into_ignores():
    gts = [[LabeledBox(0, 0, 10, 20), LabeledBox(40, 0, 30, 60)]]
    dets = [[Detection(0, 0, 10, 20, 0.9), Detection(40, 0, 30, 60, 0.8)]]
    r = evaluate(dets, gts, min_height=50)
    assert r.n_gt == 1 and r.fppi[-1] == 0 and r.miss_rate[-1] == 0


def test_reference_points():
    ref = lamr_reference_points()
    assert len(ref) == 9 and ref[0] == pytest.approx(0.01) and ref[-1] == pytest.approx(1.0)


def test_box_roundtrip_within_one_cell():
    img = ImagePlane(np.zeros((3, 300, 220)))
    m = _model(upsample=2)
    pyr = m.pyramid(img)
    for li in range(len(pyr)):
        cy, cx = np.array([0, 3, 7]), np.array([0, 2, 5])
        boxes = _level_box(m, pyr, li, cy, cx)
        sy, sx = pyr.level_scale(li)
        back_y = boxes[:, 1] * sy / m.shrink
        back_x = boxes[:, 0] * sx / m.shrink
        assert np.all(np.abs(back_y - cy) <= 1) and np.all(np.abs(back_x - cx) <= 1)
        np.testing.assert_allclose(boxes[:, 3] * sy, 128, rtol=1e-9)


def test_box_ratio_shrinks_about_centre():
    img = ImagePlane(np.zeros((3, 128, 64)))
    m = _model(box_ratio=(0.5, 0.5))
    b = _level_box(m, m.pyramid(img), 0, np.array([0]), np.array([0]))[0]
    np.testing.assert_allclose(b, [16, 32, 32, 64])


def test_model_roundtrip(tmp_path):
    m = _model(0.5, threshold=0.25, per_octave=4, mode="approx",
               plm=PowerLawModel(np.linspace(0, 1, 10), np.r_[np.zeros(9), np.inf]))
    p = tmp_path / "m.cfd"
    save_model(m, p)
    back = load_model(p)
    assert dump_model(back) == dump_model(m)
    assert back.threshold == 0.25 and back.mode == "approx" and np.isinf(back.plm.sigmas[-1])
    with pytest.raises(ModelFormatError):
        parse_model(b"NOPE" + dump_model(m)[4:])


def test_mining_with_rejecting_model_is_empty():
    imgs = make_negative_images(2)
    feats, scores = mine_hard_negatives(_model(-1.0), imgs, 100)
    assert feats.shape == (0, 32 * 16 * 10) and len(scores) == 0


def test_mining_respects_cap_and_boxes():
    imgs = make_negative_images(2)
    feats, scores = mine_hard_negatives(_model(1.0), imgs, 7, per_image=5)
    assert len(feats) == 7


def test_jitter_keeps_original_and_is_seeded():
    boxes = [LabeledBox(10, 10, 32, 64)]
    a = jitter_boxes(boxes, (128, 64), 3, rng_seed=1)
    assert len(a) == 4 and a[0] == boxes[0]
    assert a == jitter_boxes(boxes, (128, 64), 3, rng_seed=1)


def test_small_training_run_finds_planted_instances():
    scenes = [make_detection_scene(1000 + i, n_distractors=1) for i in range(9)]
    hist = train_detector(
        scenes, HogLuvBackend(), n_trees=32, rounds=1, n_mine=200,
        mining_images=make_negative_images(4), mine_threshold=0.0, model_opts={"upsample": 2},
    )
    assert [h.round for h in hist] == [0, 1]
    model = hist[-1].model
    test = [make_detection_scene(2000 + i, n_distractors=1) for i in range(3)]
    dets = [detect(s.image, model) for s in test]
    r = evaluate(dets, [s.boxes for s in test])
    assert r.miss_rate.min() == 0.0
    # with early rejection off nothing above threshold changes
    full = [detect(s.image, model, reject_early=False) for s in test]
    assert dets == full
