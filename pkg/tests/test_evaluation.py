import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from locpatch.attack import make_random_patch
from locpatch.detector import Detection
from locpatch.evaluation import (MetricsReport, attack_success_rate, average_precision, compute_iou,
                                 evaluate_attack, match_detections, patch_dataset, recall, transfer_matrix,
                                 write_transfer_csv)
from locpatch.imaging import BBox, ValidationError
from locpatch.placement import PlacementParams, SceneParams

CONFS = (0.1, 0.3, 0.5, 0.7, 0.9)


def _det(x0, y0, x1, y1, c):
    return Detection(BBox(x0, y0, x1, y1), c)


def _random_box(rng, size=40):
    x0, y0 = rng.integers(0, size - 4, 2)
    w, h = rng.integers(2, 14, 2)
    return BBox(float(x0), float(y0), float(min(x0 + w, size)), float(min(y0 + h, size)))


def _random_instance(rng):
    images = []
    for _ in range(rng.integers(1, 6)):
        gts = [_random_box(rng) for _ in range(rng.integers(0, 5))]
        preds = []
        for g in gts:
            if rng.random() < 0.7:  # jittered copy of a ground truth
                d = rng.integers(-2, 3, 4)
                box = BBox(g.x_min + d[0], g.y_min + d[1], max(g.x_max + d[2], g.x_min + d[0] + 1),
                           max(g.y_max + d[3], g.y_min + d[1] + 1))
                preds.append(Detection(box, float(rng.choice(CONFS))))
        for _ in range(rng.integers(0, 4)):
            preds.append(Detection(_random_box(rng), float(rng.choice(CONFS))))
        images.append((preds, gts))
    if sum(len(g) for _, g in images) == 0:
        images[0][1].append(_random_box(rng))
    return images


# -- IoU ---------------------------------------------------------------------------

def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert compute_iou(a, a) == 1.0
    assert compute_iou(a, BBox(10, 0, 20, 10)) == 0.0
    assert compute_iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_matches_area_arithmetic(rng):
    for _ in range(500):
        a, b = _random_box(rng), _random_box(rng)
        ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
        iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
        inter = ix * iy
        expected = inter / ((a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min)
                            - inter)
        assert abs(compute_iou(a, b) - expected) <= 1e-12
        assert compute_iou(a, b) == compute_iou(b, a)


# -- matching ----------------------------------------------------------------------

def _greedy_oracle(preds, gts, iou_thresh, conf_thresh):
    order = sorted((p for p in enumerate(preds) if p[1].confidence >= conf_thresh),
                   key=lambda ip: (-ip[1].confidence, *ip[1].box.as_list(), ip[0]))
    free = set(range(len(gts)))
    matched = set()
    for _, p in order:
        cands = [(compute_iou(p.box, gts[g]), -g) for g in free]
        cands = [c for c in cands if c[0] >= iou_thresh]
        if cands:
            g = -max(cands)[1]
            free.discard(g)
            matched.add(g)
    return matched, len(order)


def test_match_prefers_higher_confidence():
    gt = [BBox(0, 0, 10, 10)]
    res = match_detections([_det(0, 0, 10, 10, 0.6), _det(1, 0, 10, 10, 0.9)], gt)
    assert res.pairs[0][0] == 1 and res.true_positives == 1 and res.false_positives == 1


def test_match_iou_tie_goes_to_lower_gt_index():
    gts = [BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)]
    res = match_detections([_det(0, 0, 10, 10, 0.9)], gts)
    assert res.pairs == [(0, 0, 1.0)]


def test_match_respects_thresholds():
    gt = [BBox(0, 0, 10, 10)]
    assert match_detections([_det(0, 0, 10, 10, 0.2)], gt).true_positives == 0
    assert match_detections([_det(5, 0, 15, 10, 0.9)], gt).true_positives == 0
    assert match_detections([_det(5, 0, 15, 10, 0.9)], gt, iou_thresh=0.3).true_positives == 1


def test_match_is_independent_of_prediction_order(rng):
    for _ in range(100):
        preds, gts = _random_instance(rng)[0]
        a = match_detections(preds, gts, conf_thresh=0.0)
        b = match_detections(preds[::-1], gts, conf_thresh=0.0)
        assert a.matched_gt == b.matched_gt
        assert (a.true_positives, a.false_positives) == (b.true_positives, b.false_positives)


def test_match_agrees_with_oracle(rng):
    for _ in range(300):
        for preds, gts in _random_instance(rng):
            for thr in (0.0, 0.4):
                res = match_detections(preds, gts, 0.5, thr)
                matched, kept = _greedy_oracle(preds, gts, 0.5, thr)
                assert res.matched_gt == matched
                assert res.true_positives + res.false_positives == kept
                assert res.false_negatives == len(gts) - len(matched)


# -- AP ------------------------------------------------------------------------------

def ap_exhaustive_cutoff(images, iou_thresh=0.5):
    """Rematch at every distinct confidence cutoff and integrate the envelope."""
    npos = sum(len(g) for _, g in images)
    cutoffs = sorted({p.confidence for preds, _ in images for p in preds}, reverse=True)
    points = []
    for t in cutoffs:
        tp = kept = 0
        for preds, gts in images:
            matched, k = _greedy_oracle(preds, gts, iou_thresh, t)
            tp += len(matched)
            kept += k
        points.append((tp / npos, tp / kept))
    terms, prev = [], 0.0
    for k, (r, _) in enumerate(points):
        terms.append((r - prev) * max(p for _, p in points[k:]))
        prev = r
    return math.fsum(terms)


def test_ap_perfect_and_empty():
    gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    assert average_precision([([_det(0, 0, 10, 10, 0.9), _det(20, 20, 30, 30, 0.8)], gts)]) == 1.0
    assert average_precision([([], gts)]) == 0.0
    with pytest.raises(ValidationError):
        average_precision([([_det(0, 0, 1, 1, 0.5)], [])])


def test_ap_hand_example():
    gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    preds = [_det(40, 40, 50, 50, 0.9), _det(0, 0, 10, 10, 0.8), _det(20, 20, 30, 30, 0.7)]
    # cutoffs: (r 0, p 0), (r .5, p .5), (r 1, p 2/3) -> .5 * 2/3 + .5 * 2/3
    assert average_precision([(preds, gts)]) == pytest.approx(2 / 3, abs=1e-15)


def test_ap_equals_exhaustive_cutoff_oracle():
    rng = np.random.default_rng(99)
    for _ in range(200):
        images = _random_instance(rng)
        assert average_precision(images) == ap_exhaustive_cutoff(images)


# -- recall / ASR ----------------------------------------------------------------------

def test_recall_examples():
    gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    m = [match_detections([_det(0, 0, 10, 10, 0.9)], gts)]
    assert recall(m) == 0.5
    with pytest.raises(ValidationError):
        recall([match_detections([], [])])


def test_asr_examples():
    gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    both = [_det(0, 0, 10, 10, 0.9), _det(20, 20, 30, 30, 0.9)]
    clean = [match_detections(both, gts)]
    assert attack_success_rate(clean, clean) == 0.0
    assert attack_success_rate(clean, [match_detections([], gts)]) == 1.0
    assert attack_success_rate(clean, [match_detections(both[:1], gts)]) == 0.5
    # nothing detected on clean images: nothing to suppress
    none = [match_detections([], gts)]
    assert attack_success_rate(none, none) == 0.0


def test_asr_ignores_objects_found_only_under_attack():
    gts = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    clean = [match_detections([_det(0, 0, 10, 10, 0.9)], gts)]
    attacked = [match_detections([_det(20, 20, 30, 30, 0.9)], gts)]
    assert attack_success_rate(clean, attacked) == 1.0


def test_asr_rejects_mismatched_inputs():
    with pytest.raises(ValidationError):
        attack_success_rate([], [match_detections([], [])])


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.data())
def test_asr_is_monotone_in_removed_predictions(seed, data):
    rng = np.random.default_rng(seed)
    images = _random_instance(rng)
    clean = [match_detections(p, g) for p, g in images]
    attacked = [list(p) for p, _ in images]
    before = attack_success_rate(clean, [match_detections(p, g) for p, (_, g) in zip(attacked, images)])
    candidates = [(i, j) for i, p in enumerate(attacked) for j in range(len(p))]
    if not candidates:
        return
    i, j = data.draw(st.sampled_from(candidates))
    del attacked[i][j]
    after = attack_success_rate(clean, [match_detections(p, g) for p, (_, g) in zip(attacked, images)])
    assert 0.0 <= before <= after <= 1.0


def test_metrics_report_validation_and_outputs(tmp_path):
    with pytest.raises(ValidationError):
        MetricsReport(1.2, 0.5, 0.1)
    rep = MetricsReport(0.9, 0.8, 0.1, [{"image": "a", "num_gt": 2, "clean_detected": 2, "attacked_detected": 1,
                                         "suppressed": 1}])
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][0] == "image" and rows[1] == ["a", "2", "2", "1", "1"]
    assert rows[-1] == ["0.9", "0.8", "0.1"]


# -- end-to-end with a detector --------------------------------------------------------

def test_clean_evaluation_has_zero_asr(quick_detectors, eval_dataset):
    rep = evaluate_attack(quick_detectors["s"], eval_dataset, None)
    assert rep.asr == 0.0 and rep.ap > 0.5


def test_evaluation_is_pure_and_deterministic(quick_detectors, eval_dataset):
    snapshot = [img.clone() for img in eval_dataset.images]
    patch = make_random_patch(32, np.random.default_rng(0))
    a = evaluate_attack(quick_detectors["s"], eval_dataset, patch, seed=3)
    b = evaluate_attack(quick_detectors["s"], eval_dataset, patch, seed=3)
    assert a == b
    assert all(torch.equal(x, y) for x, y in zip(snapshot, eval_dataset.images))


def test_patch_dataset_shares_placements_across_patches(eval_dataset):
    params = PlacementParams()
    scene = SceneParams((1.0, 1.0), (0.0, 0.0), 0.0)
    white = patch_dataset(eval_dataset, torch.ones(16, 16, 3), params, scene, seed=5)
    black = patch_dataset(eval_dataset, torch.zeros(16, 16, 3), params, scene, seed=5)
    for w, b, img in zip(white, black, eval_dataset.images):
        changed_w = (w != img).any(-1)
        changed_b = (b != img).any(-1)
        footprint = changed_w | changed_b
        assert torch.allclose(w[footprint], torch.ones(1), atol=1e-6)
        assert torch.allclose(b[footprint], torch.zeros(1), atol=1e-6)


def test_transfer_matrix_shape_and_csv(tmp_path, quick_detectors, eval_dataset):
    patches = {f"p{k}": make_random_patch(32, np.random.default_rng(k)) for k in range(3)}
    rows, cols, m = transfer_matrix(patches, quick_detectors, eval_dataset)
    assert rows == ["p0", "p1", "p2"] and cols == ["n", "s"] and m.shape == (3, 2)
    assert np.all((m >= 0) & (m <= 1))
    single = evaluate_attack(quick_detectors["s"], eval_dataset, patches["p1"])
    assert m[1, 1] == single.asr
    write_transfer_csv(tmp_path / "t.csv", rows, cols, m)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "source,n,s"


def test_transfer_matrix_needs_two_detectors(quick_detectors, eval_dataset):
    with pytest.raises(ValidationError):
        transfer_matrix({"p": torch.rand(16, 16, 3)}, {"s": quick_detectors["s"]}, eval_dataset)
