"""Detection measurement: PASCAL-criteria matching, difficulty filters,
average precision, recall at a precision operating point by height
bucket, false-positive taxonomy, and log-average miss rate.

Evaluation targets the pedestrian class; cyclists exist as confusers
(detections on them are false positives feeding the taxonomy). Ground
truths failing the active difficulty filter, and de facto ground truths
withheld from the labels, are ignore regions: detections matching them
count neither as true nor as false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heads import Box, CYCLIST, Detection, PEDESTRIAN
from .synthworld import Annotation

HEIGHT_BUCKETS = ((0.0, 80.0), (80.0, 160.0), (160.0, math.inf))


@dataclass(frozen=True)
class DifficultySpec:
    name: str
    min_height: float
    max_occlusion_level: int
    max_truncation: float

    def __post_init__(self):
        if self.min_height <= 0:
            raise ValueError("min_height must be positive")

    def admits(self, ann: Annotation) -> bool:
        return (
            ann.height >= self.min_height
            and ann.occlusion <= self.max_occlusion_level
            and ann.truncation <= self.max_truncation
        )


EASY = DifficultySpec("easy", 40.0, 0, 0.15)
MODERATE = DifficultySpec("moderate", 25.0, 1, 0.30)
HARD = DifficultySpec("hard", 25.0, 2, 0.50)
DIFFICULTIES = {d.name: d for d in (MODERATE, EASY, HARD)}  # report order: Mod, Easy, Hard


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area of two boxes."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass
class MatchResult:
    """Per-detection outcomes and per-ground-truth match bookkeeping for
    one image, in input order."""

    det_outcomes: list[str]
    det_matched_gt: list[int]  # index into gts, -1 if unmatched
    gt_matched: list[bool]
    gt_matched_score: list[float | None]
    gt_eligible: list[bool]


def match_detections(
    dets: list[Detection],
    gts: list[Annotation],
    difficulty: DifficultySpec = MODERATE,
    iou_thresh: float = 0.5,
    target_class: int = PEDESTRIAN,
    unannotated_as_ignore: bool = True,
) -> MatchResult:
    """Greedy descending-score matching under PASCAL criteria.

    Eligible ground truths are annotated `target_class` objects passing
    the difficulty filter; each may match at most one detection, and a
    detection takes the highest-IoU unmatched eligible ground truth with
    IoU >= iou_thresh. Detections whose best remaining overlap is with an
    ignore ground truth (difficulty-filtered or unannotated) are neither
    TP nor FP. Other-class ground truths are plain background, so
    detections on them are false positives.

    With unannotated_as_ignore=False the de facto unannotated ground
    truths are invisible instead (a benchmark that does not know them
    counts detections on them as false positives); the error taxonomy
    uses this view to realize the annotation-error category.
    """
    eligible = [g.annotated and g.class_id == target_class and difficulty.admits(g) for g in gts]
    ignore = [
        g.class_id == target_class
        and (not difficulty.admits(g) if g.annotated else unannotated_as_ignore)
        for g in gts
    ]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    outcomes = [FP] * len(dets)
    det_matched_gt = [-1] * len(dets)
    matched = [False] * len(gts)
    matched_score: list[float | None] = [None] * len(gts)

    for di in order:
        det = dets[di]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if not eligible[gi] or matched[gi]:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0:
            outcomes[di] = TP
            det_matched_gt[di] = best_gt
            matched[best_gt] = True
            matched_score[best_gt] = det.score
            continue
        ignore_hit = any(
            ignore[gi] and iou(det.box, gt.box) >= iou_thresh for gi, gt in enumerate(gts)
        )
        outcomes[di] = IGNORED if ignore_hit else FP
    return MatchResult(outcomes, det_matched_gt, matched, matched_score, eligible)


@dataclass
class EvalCurve:
    """Score sweep: cumulative TP/FP at each distinct threshold
    (descending) over the non-ignored detections, plus the eligible
    ground-truth count."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    gt_count: int

    def precision(self) -> np.ndarray:
        denom = self.tp + self.fp
        return np.where(denom > 0, self.tp / np.where(denom > 0, denom, 1), 0.0)

    def recall(self) -> np.ndarray:
        return self.tp / self.gt_count if self.gt_count else np.zeros_like(self.tp)


def curve_from_outcomes(scored_outcomes, gt_count: int) -> EvalCurve:
    """Build the curve from (score, outcome) pairs pooled over images."""
    pairs = [(s, o) for s, o in scored_outcomes if o != IGNORED]
    if not pairs:
        return EvalCurve(np.array([]), np.array([]), np.array([]), gt_count)
    pairs.sort(key=lambda p: -p[0])
    scores = np.array([p[0] for p in pairs])
    is_tp = np.array([p[1] == TP for p in pairs])
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(~is_tp)
    # keep the last entry of each distinct score
    keep = np.ones(len(pairs), dtype=bool)
    keep[:-1] = scores[:-1] != scores[1:]
    return EvalCurve(scores[keep], cum_tp[keep].astype(np.float64),
                     cum_fp[keep].astype(np.float64), gt_count)


def average_precision(curve: EvalCurve, points: int = 41) -> float:
    """Area under the monotone-envelope precision/recall curve, sampled at
    `points` equally spaced recall values (41 by default, 11 optional)."""
    if curve.gt_count < 1:
        raise ValueError("average precision is undefined without ground truths")
    if curve.thresholds.size == 0:
        return 0.0
    recall = curve.recall()
    precision = curve.precision()
    grid = np.linspace(0.0, 1.0, points)
    ap = 0.0
    for r in grid:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / points)


@dataclass
class RecallReport:
    threshold: float | None
    achieved_precision: float
    bucket_recall: dict
    overall_recall: float | None
    bucket_gt_counts: dict = field(default_factory=dict)


def recall_at_precision(
    curve: EvalCurve,
    gt_heights,
    gt_match_scores,
    precision: float = 0.7,
    buckets=HEIGHT_BUCKETS,
) -> RecallReport:
    """Recall per height bucket at the lowest score threshold whose overall
    precision still reaches the target.

    gt_heights / gt_match_scores run over the eligible ground truths
    (match score None when unmatched). Buckets are (lo, hi] on box
    height; empty buckets report None. If the precision target is never
    reached the report carries the best achieved precision and no
    recalls.
    """
    heights = np.asarray(list(gt_heights), dtype=np.float64)
    scores = [s for s in gt_match_scores]
    if curve.thresholds.size == 0:
        return RecallReport(None, 0.0, {b: None for b in buckets}, None,
                            {b: int(((heights > b[0]) & (heights <= b[1])).sum()) for b in buckets})
    prec = curve.precision()
    ok = np.where(prec >= precision)[0]
    counts = {b: int(((heights > b[0]) & (heights <= b[1])).sum()) for b in buckets}
    if ok.size == 0:
        return RecallReport(None, float(prec.max()), {b: None for b in buckets}, None, counts)
    idx = ok[-1]  # lowest threshold still meeting the target
    thr = float(curve.thresholds[idx])
    matched = np.array([s is not None and s >= thr for s in scores], dtype=bool)
    report = {}
    for b in buckets:
        in_b = (heights > b[0]) & (heights <= b[1])
        report[b] = float(matched[in_b].mean()) if in_b.any() else None
    overall = float(matched.mean()) if heights.size else None
    return RecallReport(thr, float(prec[idx]), report, overall, counts)


@dataclass
class FPBreakdown:
    localization: int = 0
    background: int = 0
    cyclist: int = 0
    annotation: int = 0

    @property
    def total(self) -> int:
        return self.localization + self.background + self.cyclist + self.annotation

    def as_dict(self) -> dict:
        return {
            "localization": self.localization,
            "background": self.background,
            "cyclist": self.cyclist,
            "annotation": self.annotation,
        }


def categorize_false_positives(
    dets: list[Detection],
    gts: list[Annotation],
    difficulty: DifficultySpec = MODERATE,
    iou_thresh: float = 0.5,
    top_n: int | None = None,
    recall_point: float | None = None,
) -> FPBreakdown:
    """Partition false positives into the four error sources.

    Precedence: annotation error (IoU >= thresh with an unannotated de
    facto pedestrian) > cyclist error (IoU >= thresh with a cyclist) >
    localization error (any remaining overlap with a pedestrian ground
    truth, including sub-threshold overlaps and double detections) >
    background error (no overlap with any ground truth). Selection is
    either the top_n highest-scoring false positives or the false
    positives at the score threshold whose recall is closest from above
    to recall_point.
    """
    if (top_n is None) == (recall_point is None):
        raise ValueError("select false positives with exactly one of top_n / recall_point")
    # de facto unannotated ground truths are invisible to this matching, so
    # detections on them surface as false positives to be categorized
    result = match_detections(dets, gts, difficulty, iou_thresh,
                              unannotated_as_ignore=False)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))

    if recall_point is not None:
        eligible_count = sum(result.gt_eligible)
        if eligible_count == 0:
            raise ValueError("recall anchoring needs at least one eligible ground truth")
        cutoff = None
        tp_seen = 0
        for di in order:
            if result.det_outcomes[di] == TP:
                tp_seen += 1
            if tp_seen / eligible_count >= recall_point:
                cutoff = dets[di].score
                break
        if cutoff is None:
            cutoff = -math.inf  # recall never reached: take every false positive
        selected = [di for di in order
                    if result.det_outcomes[di] == FP and dets[di].score >= cutoff]
    else:
        fps = [di for di in order if result.det_outcomes[di] == FP]
        selected = fps[:top_n]

    breakdown = FPBreakdown()
    for di in selected:
        det = dets[di]
        best_unannotated = 0.0
        best_cyclist = 0.0
        best_pedestrian = 0.0
        any_overlap = 0.0
        for gt in gts:
            v = iou(det.box, gt.box)
            any_overlap = max(any_overlap, v)
            if gt.class_id == PEDESTRIAN and not gt.annotated:
                best_unannotated = max(best_unannotated, v)
            elif gt.class_id == CYCLIST:
                best_cyclist = max(best_cyclist, v)
            elif gt.class_id == PEDESTRIAN:
                best_pedestrian = max(best_pedestrian, v)
        if best_unannotated >= iou_thresh:
            breakdown.annotation += 1
        elif best_cyclist >= iou_thresh:
            breakdown.cyclist += 1
        elif any_overlap > 0.0:
            breakdown.localization += 1
        else:
            breakdown.background += 1
    return breakdown


def log_average_miss_rate(
    curve: EvalCurve, image_count: int, min_exponent: float = -2.0
) -> float:
    """Geometric mean of the miss rate over 9 log-uniform FPPI reference
    points in [10^min_exponent, 10^0]. Reference points below the curve's
    lowest achieved FPPI take the first curve point."""
    if image_count < 1:
        raise ValueError("image_count must be >= 1")
    if curve.gt_count < 1:
        raise ValueError("miss rate is undefined without ground truths")
    refs = np.logspace(min_exponent, 0.0, 9)
    if curve.thresholds.size == 0:
        return 1.0
    fppi = curve.fp / image_count
    miss = 1.0 - curve.recall()
    vals = []
    for f in refs:
        idx = np.where(fppi <= f)[0]
        vals.append(miss[idx[-1]] if idx.size else miss[0])
    vals = np.asarray(vals)
    if np.any(vals == 0.0):  # a zero miss rate zeroes the geometric mean
        return 0.0
    return float(np.exp(np.mean(np.log(vals))))


# ------------------------------------------------------------ aggregation


@dataclass
class ImageEval:
    dets: list[Detection]
    gts: list[Annotation]
    match: MatchResult


def evaluate_images(
    per_image_dets,
    per_image_gts,
    difficulty: DifficultySpec = MODERATE,
    iou_thresh: float = 0.5,
):
    """Match every image and pool results into (curve, gt height/match
    arrays, per-image evals)."""
    evals = []
    scored = []
    gt_heights = []
    gt_scores = []
    gt_count = 0
    for dets, gts in zip(per_image_dets, per_image_gts):
        m = match_detections(dets, gts, difficulty, iou_thresh)
        evals.append(ImageEval(dets, gts, m))
        for det, outcome in zip(dets, m.det_outcomes):
            scored.append((det.score, outcome))
        for gi, gt in enumerate(gts):
            if m.gt_eligible[gi]:
                gt_count += 1
                gt_heights.append(gt.height)
                gt_scores.append(m.gt_matched_score[gi])
    curve = curve_from_outcomes(scored, gt_count)
    return curve, gt_heights, gt_scores, evals
