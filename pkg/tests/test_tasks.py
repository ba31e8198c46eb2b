import json
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msvcl.config import preset
from msvcl.data import BoundingBox, generate_phantom, render_view
from msvcl.learning import EncoderConfig
from msvcl.tasks import (DetectionResult, MatchCandidate, MissingLabelsError, anatomical_gate,
                         breast_pairs, build_candidates, classification_inputs, detect, extract_roi,
                         finetune_detector, greedy_match, label_candidates, load_backbone, match,
                         matching_accuracy, nms, prediction_record, roi_square, train_classifier,
                         train_matcher, write_predictions)
from msvcl.tasks.detection import assign_targets
from msvcl.tasks.roi import RoiPatch

TASKS = preset()["tasks"]
ENC = EncoderConfig()


def test_roi_side_rule_on_random_boxes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w, h = rng.uniform(1, 300, 2)
        x, y, side = roi_square(BoundingBox(*rng.uniform(-50, 500, 2), w, h))
        assert side == pytest.approx(1.2 * max(w, h))
    assert roi_square(BoundingBox(0, 0, 100, 60))[2] == pytest.approx(120.0)


def test_extract_roi_corner_and_nipple():
    s = render_view(generate_phantom(1, "dense", 1), "CC")
    roi = extract_roi(s, BoundingBox(0, 0, 50, 50))
    assert roi.patch.shape == (224, 224)
    # the part of the window outside the image is zero padding
    assert roi.patch[:10, :10].max() == 0.0
    nx, ny = s.nipple_px
    assert extract_roi(s, BoundingBox(nx - 5, ny - 5, 10, 10)).d_nipple == pytest.approx(0.0, abs=1e-9)


def test_nms_identical_boxes():
    boxes = [BoundingBox(0, 0, 10, 10, score=0.9), BoundingBox(0, 0, 10, 10, score=0.8)]
    assert nms(boxes, 0.5) == boxes[:1]
    assert nms([], 0.5) == []


def test_detection_result_requires_sorted_scores():
    with pytest.raises(ValueError):
        DetectionResult([BoundingBox(0, 0, 1, 1, score=0.1), BoundingBox(0, 0, 1, 1, score=0.5)], [])
    with pytest.raises(ValueError):
        DetectionResult([BoundingBox(0, 0, 1, 1)], [])


def test_assign_targets_marks_box_center():
    pos, tgt = assign_targets(np.array([[40.0, 40.0, 60.0, 70.0]]), 16, 16, 8)
    i, j = int(55 // 8), int(50 // 8)
    assert pos[i, j]
    assert tuple(tgt[i, j]) == (40.0, 40.0, 60.0, 70.0)
    # every positive cell center lies inside the box
    ys, xs = np.nonzero(pos)
    assert ((xs + 0.5) * 8 > 40).all() and ((xs + 0.5) * 8 < 60).all()


def labeled(boxes, ids):
    return [BoundingBox(*b, lesion_id=i) for b, i in zip(boxes, ids)]


def test_label_candidates_partition():
    gt = labeled([(0, 0, 10, 10), (40, 40, 10, 10)], [0, 1])
    preds = [BoundingBox(0, 0, 10, 10, score=0.9), BoundingBox(80, 80, 5, 5, score=0.7),
             BoundingBox(1, 0, 10, 10, score=0.6)]
    cc, mlo = label_candidates(DetectionResult(preds, preds[:1]), gt, gt)
    assert cc.is_tp == [True, False, False]
    assert cc.lesion_ids == [0, None, None]
    assert mlo.is_tp == [True]


def _fake_roi(d_nipple, size):
    return RoiPatch(np.zeros((4, 4), np.float32), BoundingBox(0, 0, 1, 1), (0, 0, 1), d_nipple, 0.0, size)


def test_anatomical_gate():
    assert anatomical_gate(_fake_roi(40, 100), _fake_roi(36, 120))
    assert not anatomical_gate(_fake_roi(40, 100), _fake_roi(30, 100))
    assert not anatomical_gate(_fake_roi(40, 100), _fake_roi(40, 250))
    assert not anatomical_gate(_fake_roi(40, 100), _fake_roi(40, 100), lesion_ids=(0, 1))
    assert anatomical_gate(_fake_roi(40, 100), _fake_roi(40, 100), lesion_ids=(0, None))


def test_greedy_match_injective_and_thresholded():
    d = {(0, 0): 2.0, (0, 1): 1.0, (1, 1): 3.0, (1, 0): 4.0, (2, 2): 7.0}
    out = greedy_match(3, 3, d, 5.0)
    assert out == [(0, 1, 1.0), (1, 0, 4.0)]
    assert greedy_match(1, 1, {(0, 0): 2.0}, 5.0) == [(0, 0, 2.0)]
    assert greedy_match(1, 1, {(0, 0): 5.0}, 5.0) == []


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), n_cc=st.integers(1, 5), n_mlo=st.integers(1, 5))
def test_greedy_match_is_injective(seed, n_cc, n_mlo):
    rng = np.random.default_rng(seed)
    d = {(i, j): float(rng.uniform(0, 10)) for i in range(n_cc) for j in range(n_mlo) if rng.random() < 0.7}
    out = greedy_match(n_cc, n_mlo, d, 5.0)
    assert len({i for i, _, _ in out}) == len(out) == len({j for _, j, _ in out})
    assert all((i, j) in d and dist < 5.0 for i, j, dist in out)


def test_matching_accuracy_definition():
    r = _fake_roi(10, 10)
    cands = [MatchCandidate(r, r, (True, True), 1, (0, 0), (0, 0)),
             MatchCandidate(r, r, (True, False), 0, (0, None), (0, 1)),
             MatchCandidate(r, r, (False, True), 0, (None, 0), (1, 0)),
             MatchCandidate(r, r, (True, True), 0, (1, 0), (2, 0))]
    assert matching_accuracy(cands, {(0, 0)}) == 1.0
    assert matching_accuracy(cands, {(0, 1)}) == pytest.approx(0.5 * (0 + 0.5))
    assert matching_accuracy(cands, set()) == pytest.approx(0.5)


def test_candidates_and_matcher(lesion_samples, tiny_manifest):
    samples = [tiny_manifest.load(e) for e in tiny_manifest.select(split="self-supervision", domain="A")]
    cfg = dict(TASKS["matching"], epochs=4)
    rng = np.random.default_rng(0)
    cands = [c for cc, mlo in breast_pairs(samples) for c in build_candidates(cc, mlo, cfg, rng)]
    ys = [c.y for c in cands]
    assert 0 < sum(ys) < len(ys)
    for c in cands:
        if c.y:
            assert c.lesion_ids[0] == c.lesion_ids[1] and all(c.tp_flags)
    model = train_matcher(cands, None, cfg, ENC, seed=0)
    assert model.history[-1]["loss"] < model.history[0]["loss"]
    d = model.distances([(c.roi_cc, c.roi_mlo) for c in cands])
    y = np.array(ys)
    assert d[y == 1].mean() < d[y == 0].mean()

    cc, mlo = breast_pairs(samples)[0]
    res = DetectionResult([BoundingBox(*b.xyxy()[:2], b.w, b.h, score=0.9) for b in cc.annotations[:1]],
                          [BoundingBox(*b.xyxy()[:2], b.w, b.h, score=0.9) for b in mlo.annotations[:1]])
    out = match(model, res, cc, mlo)
    assert len(out) <= 1 and all(dist < 0.5 * model.margin for _, _, dist in out)

    with pytest.raises(ValueError):
        train_matcher([c for c in cands if c.y == 0], None, cfg, ENC)
    with pytest.warns(RuntimeWarning):
        train_matcher(cands[:4] + [c for c in cands if c.y][:1], None, dict(cfg, margin=0.0, epochs=1), ENC)


def test_classifier_errors(tiny_manifest):
    f_samples = [tiny_manifest.load(e) for e in tiny_manifest.select(split="test", domain="F")]
    f_samples = [s for s in f_samples if s.annotations] or f_samples
    cfg = dict(TASKS["classify"], epochs=1)
    with pytest.raises(MissingLabelsError):
        train_classifier(None, "birads", f_samples, cfg, ENC)
    with pytest.raises(MissingLabelsError):
        train_classifier(None, "birads", [], cfg, ENC)
    with pytest.raises(ValueError):
        train_classifier(None, "shape", f_samples, cfg, ENC)


def test_classification_inputs(lesion_samples):
    cfg = TASKS["classify"]
    x, labels = classification_inputs("density", lesion_samples[:3], cfg)
    assert x.shape == (3, 224, 224) and labels == [s.density_class for s in lesion_samples[:3]]
    x, labels = classification_inputs("birads", lesion_samples[:3], cfg)
    assert x.shape[1:] == (64, 64) and len(labels) == sum(len(s.annotations) for s in lesion_samples[:3])


def test_load_backbone_sources(tmp_path):
    a = load_backbone(None, ENC, 0)
    b = load_backbone("random", ENC, 0)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    with pytest.raises(Exception):
        load_backbone(tmp_path / "missing.pt", ENC, 0)


def test_detector_smoke(lesion_samples):
    cfg = dict(TASKS["detection"], epochs=2)
    det = finetune_detector(None, lesion_samples[:4], cfg, ENC, seed=0, val_samples=lesion_samples[4:6])
    assert len(det.history) == 2 and "val_ap" in det.history[-1]
    boxes = detect(det, lesion_samples[0], score_threshold=0.0)
    h, w = lesion_samples[0].image.shape
    assert all(b.within(h, w) for b in boxes)
    assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)
    with pytest.raises(ValueError):
        finetune_detector(None, [], cfg, ENC)


def test_prediction_export(tmp_path):
    b = BoundingBox(1, 2, 3, 4, score=0.5)
    rec = prediction_record("images/A/test/x_L_CC.png", [b], [(b, b, 1.5)], {"density": {"dense": 0.7}})
    (path,) = write_predictions([rec], tmp_path)
    assert path.name == "x_L_CC.json"
    assert json.loads(path.read_text())["matches"][0]["distance"] == 1.5
