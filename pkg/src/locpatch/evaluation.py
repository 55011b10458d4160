"""Detection metrics (AP, recall) and attack success rate under a placed patch."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .imaging import BBox, ValidationError
from .placement import PlacementParams, SceneParams, apply_patch_to_all_targets

AP_SCORE_FLOOR = 0.001


def compute_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    # confidence and TP flag of every kept prediction, in matching order
    scored: list[tuple[float, bool]] = field(default_factory=list)
    num_gt: int = 0

    @property
    def matched_gt(self) -> set[int]:
        return {g for _, g, _ in self.pairs}


def _score(pred) -> float:
    return float(pred.confidence)


def match_detections(preds, gts, iou_thresh: float = 0.5, conf_thresh: float = 0.25) -> MatchResult:
    """Greedy confidence-ordered matching of predictions to ground-truth boxes.

    Predictions under ``conf_thresh`` are ignored. Equal confidences are
    ordered by box coordinates so the result does not depend on input order;
    IoU ties go to the lower ground-truth index.
    """
    kept = [(i, p) for i, p in enumerate(preds) if _score(p) >= conf_thresh]
    kept.sort(key=lambda ip: (-_score(ip[1]), tuple(ip[1].box.as_list()), ip[0]))
    taken = [False] * len(gts)
    pairs, scored = [], []
    for idx, pred in kept:
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = compute_iou(pred.box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
            pairs.append((idx, best, best_iou))
        scored.append((_score(pred), best >= 0))
    tp = len(pairs)
    return MatchResult(tp, len(kept) - tp, len(gts) - tp, pairs, scored, len(gts))


def pr_points(matches: list[MatchResult]):
    """(recall, precision) at each distinct confidence cutoff, highest first."""
    npos = sum(m.num_gt for m in matches)
    if npos == 0:
        raise ValidationError("precision/recall needs at least one ground-truth box")
    scored = sorted((s for m in matches for s in m.scored), key=lambda s: -s[0])
    points = []
    tp = fp = 0
    for k, (conf, hit) in enumerate(scored):
        tp += hit
        fp += not hit
        if k + 1 == len(scored) or scored[k + 1][0] != conf:
            points.append((tp / npos, tp / (tp + fp)))
    return points


def ap_from_points(points) -> float:
    """All-points interpolated area under a precision/recall staircase."""
    terms = []
    prev_recall = 0.0
    for k, (r, _) in enumerate(points):
        envelope = max(p for _, p in points[k:])
        terms.append((r - prev_recall) * envelope)
        prev_recall = r
    return math.fsum(terms)


def average_precision(image_results, iou_thresh: float = 0.5) -> float:
    """AP over a dataset given ``(predictions, ground_truths)`` per image.

    Every prediction is ranked (no confidence cutoff); precision is sampled
    once per distinct confidence.
    """
    matches = [match_detections(p, g, iou_thresh, conf_thresh=-math.inf) for p, g in image_results]
    return ap_from_points(pr_points(matches))


def recall(matches: list[MatchResult]) -> float:
    tp = sum(m.true_positives for m in matches)
    fn = sum(m.false_negatives for m in matches)
    if tp + fn == 0:
        raise ValidationError("recall is undefined without ground-truth boxes")
    return tp / (tp + fn)


def attack_success_rate(clean_matches: list[MatchResult], attacked_matches: list[MatchResult]) -> float:
    """Fraction of objects detected on clean images that are missed once patched."""
    if len(clean_matches) != len(attacked_matches):
        raise ValidationError("clean and attacked evaluations cover different images")
    detected = suppressed = 0
    for clean, attacked in zip(clean_matches, attacked_matches):
        if clean.num_gt != attacked.num_gt:
            raise ValidationError("clean and attacked evaluations disagree on ground truth")
        hit = clean.matched_gt
        detected += len(hit)
        suppressed += len(hit - attacked.matched_gt)
    return suppressed / detected if detected else 0.0


@dataclass
class MetricsReport:
    ap: float
    recall: float
    asr: float
    per_image: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("ap", "recall", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "num_gt", "clean_detected", "attacked_detected", "suppressed"])
            for row in self.per_image:
                writer.writerow([row["image"], row["num_gt"], row["clean_detected"],
                                 row["attacked_detected"], row["suppressed"]])
            writer.writerow([])
            writer.writerow(["ap", "recall", "asr"])
            writer.writerow([self.ap, self.recall, self.asr])


def _detect_all(detector, images, batch_size: int, floor: float):
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.stack(images[start:start + batch_size])
            for dets in detector.detect(batch, confidence_floor=floor):
                for d in dets:
                    d.confidence = float(d.confidence)
                out.append(dets)
    return out


def evaluate_detector(detector, dataset, iou_thresh: float = 0.5, batch_size: int = 32) -> float:
    """Clean AP@``iou_thresh`` of ``detector`` on ``dataset``."""
    dets = _detect_all(detector, dataset.images, batch_size, AP_SCORE_FLOOR)
    return average_precision([(d, a.boxes) for d, a in zip(dets, dataset.annotations)], iou_thresh)


def patch_dataset(dataset, patch: torch.Tensor, placement: PlacementParams, scene: SceneParams, seed: int):
    """Place ``patch`` on every target with per-image streams derived from ``seed``.

    The draws depend only on ``seed`` and the image index, so different
    patches evaluated with one seed share identical placements.
    """
    patch = patch.detach().float()
    out = []
    for i, (img, ann) in enumerate(zip(dataset.images, dataset.annotations)):
        place_ss, scene_ss = np.random.SeedSequence([seed, i]).spawn(2)
        out.append(apply_patch_to_all_targets(img, patch, ann, placement, scene,
                                              np.random.default_rng(place_ss), np.random.default_rng(scene_ss)))
    return out


def evaluate_attack(detector, dataset, patch: torch.Tensor | None, placement: PlacementParams = PlacementParams(),
                    scene: SceneParams = SceneParams(), seed: int = 0, conf_thresh: float = 0.25,
                    iou_thresh: float = 0.5, batch_size: int = 32, clean_detections=None) -> MetricsReport:
    """AP, recall and ASR of ``detector`` with ``patch`` applied to every target.

    ``patch=None`` evaluates the clean images against themselves (ASR 0).
    """
    gts = [a.boxes for a in dataset.annotations]
    clean = clean_detections
    if clean is None:
        clean = _detect_all(detector, dataset.images, batch_size, AP_SCORE_FLOOR)
    if patch is None:
        attacked = clean
    else:
        attacked = _detect_all(detector, patch_dataset(dataset, patch, placement, scene, seed),
                               batch_size, AP_SCORE_FLOOR)
    clean_m = [match_detections(d, g, iou_thresh, conf_thresh) for d, g in zip(clean, gts)]
    att_m = [match_detections(d, g, iou_thresh, conf_thresh) for d, g in zip(attacked, gts)]
    per_image = []
    for ann, cm, am in zip(dataset.annotations, clean_m, att_m):
        per_image.append({
            "image": ann.image_id,
            "num_gt": cm.num_gt,
            "clean_detected": len(cm.matched_gt),
            "attacked_detected": len(am.matched_gt),
            "suppressed": len(cm.matched_gt - am.matched_gt),
        })
    return MetricsReport(
        ap=average_precision(list(zip(attacked, gts)), iou_thresh),
        recall=recall(att_m),
        asr=attack_success_rate(clean_m, att_m),
        per_image=per_image,
    )


def transfer_matrix(patches: dict, detectors: dict, dataset, placement: PlacementParams = PlacementParams(),
                    scene: SceneParams = SceneParams(), seed: int = 0, conf_thresh: float = 0.25,
                    iou_thresh: float = 0.5):
    """ASR of every patch (rows) against every detector (columns).

    All cells use the same evaluation seed, so each row sees identical
    placements on every detector. Returns ``(row_names, col_names, matrix)``.
    """
    if len(detectors) < 2:
        raise ValidationError("a transfer matrix needs at least two detectors")
    rows, cols = list(patches), list(detectors)
    clean = {name: _detect_all(det, dataset.images, 32, AP_SCORE_FLOOR) for name, det in detectors.items()}
    matrix = np.zeros((len(rows), len(cols)))
    for r, pname in enumerate(rows):
        patched = patch_dataset(dataset, patches[pname], placement, scene, seed)
        for c, dname in enumerate(cols):
            attacked = _detect_all(detectors[dname], patched, 32, AP_SCORE_FLOOR)
            gts = [a.boxes for a in dataset.annotations]
            cm = [match_detections(d, g, iou_thresh, conf_thresh) for d, g in zip(clean[dname], gts)]
            am = [match_detections(d, g, iou_thresh, conf_thresh) for d, g in zip(attacked, gts)]
            matrix[r, c] = attack_success_rate(cm, am)
    return rows, cols, matrix


def write_transfer_csv(path, rows, cols, matrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source"] + list(cols))
        for name, vals in zip(rows, matrix):
            writer.writerow([name] + [f"{v:.6f}" for v in vals])
