"""Detection evaluation: AP and AP@50 with per-modality reporting.

AP here is the COCO-style mean over IoU thresholds 0.50:0.05:0.95 of the
101-point interpolated area under the precision-recall curve; AP50 is the
0.50-threshold value alone. Absolute numbers depend on this interpolation
choice, so every per-threshold value is also reported. Matching is greedy
in confidence order against same-image, same-category ground truths, the
convention standard COCO tooling uses.

Determinism: detections are ranked by (-score, detection id) and ids are
assigned canonically from record content when a prediction file does not
carry them, so results never depend on input record order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DocumentError, IdSpaceMismatch
from .export import CocoDocument
from .geometry import BBox, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    bbox: BBox
    score: float
    det_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DocumentError(f"detection {self.det_id}: confidence {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    category_id: int
    bbox: BBox
    gt_id: int


@dataclass(frozen=True)
class CategoryMetrics:
    category: str
    n_gt: int
    ap: float
    ap50: float
    ap_by_threshold: dict
    tp: int  # counts at IoU 0.50
    fp: int
    fn: int
    pr_points: tuple  # (recall, precision) pairs at IoU 0.50, confidence order


@dataclass(frozen=True)
class ScopeSummary:
    """Unweighted category mean over one modality (or the whole pool)."""

    ap: float
    ap50: float
    categories: dict  # category name -> CategoryMetrics


@dataclass
class EvalResult:
    modalities: dict = field(default_factory=dict)  # modality -> ScopeSummary
    pooled: ScopeSummary | None = None

    def as_records(self) -> dict:
        def scope(s: ScopeSummary) -> dict:
            return {
                "ap": s.ap,
                "ap50": s.ap50,
                "categories": {
                    name: {
                        "n_gt": m.n_gt,
                        "ap": m.ap,
                        "ap50": m.ap50,
                        "ap_by_threshold": {f"{t:.2f}": v for t, v in m.ap_by_threshold.items()},
                        "tp": m.tp,
                        "fp": m.fp,
                        "fn": m.fn,
                        "pr_points": [[r, p] for r, p in m.pr_points],
                    }
                    for name, m in sorted(s.categories.items())
                },
            }

        return {
            "modalities": {name: scope(s) for name, s in sorted(self.modalities.items())},
            "pooled": scope(self.pooled) if self.pooled else None,
        }

    def to_table(self, run_label: str = "run") -> str:
        """One row per run, an AP/AP50 column pair per modality, plus pooled."""
        names = sorted(self.modalities) + ["pooled"]
        header1 = f"{'':<16}" + "".join(f"{name:^16}" for name in names)
        header2 = f"{'':<16}" + "".join(f"{'AP':>7} {'AP50':>7} " for _ in names)
        cells = []
        for name in sorted(self.modalities):
            s = self.modalities[name]
            cells.append(f"{100 * s.ap:>7.1f} {100 * s.ap50:>7.1f} ")
        pooled = self.pooled or ScopeSummary(0.0, 0.0, {})
        cells.append(f"{100 * pooled.ap:>7.1f} {100 * pooled.ap50:>7.1f} ")
        row = f"{run_label:<16}" + "".join(cells)
        return "\n".join([header1, header2, row, ""])


# --------------------------------------------------------------------------
# Core operations
# --------------------------------------------------------------------------


def match_detections(detections, ground_truths, iou_threshold: float) -> list[bool]:
    """Greedy one-to-one matching; returns a TP flag per input detection.

    Detections are processed in descending confidence (ties by ascending
    detection id). Each claims the still-unmatched ground truth of its own
    image and category with the highest IoU at or above the threshold; IoU
    ties go to the lowest ground-truth id. Returned flags align with the
    detections as given, whatever their order.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].det_id))
    pool: dict[tuple, list[GroundTruth]] = {}
    for gt in ground_truths:
        pool.setdefault((gt.image_id, gt.category_id), []).append(gt)
    matched: set[int] = set()
    flags = [False] * len(detections)
    for i in order:
        det = detections[i]
        best = None
        best_iou = 0.0
        for gt in pool.get((det.image_id, det.category_id), ()):
            if gt.gt_id in matched:
                continue
            value = iou(det.bbox, gt.bbox)
            if value < iou_threshold:
                continue
            if best is None or value > best_iou or (value == best_iou and gt.gt_id < best.gt_id):
                best, best_iou = gt, value
        if best is not None:
            matched.add(best.gt_id)
            flags[i] = True
    return flags


def average_precision(tp_flags, total_gt: int) -> float:
    """101-point interpolated AP from confidence-ordered TP/FP labels.

    The precision envelope (max precision at any recall >= r) is sampled at
    recalls 0.00, 0.01, ..., 1.00 and averaged. Zero when there is no
    ground truth or no true positive.
    """
    if total_gt <= 0 or not any(tp_flags):
        return 0.0
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    recall = tp / total_gt
    precision = tp / ranks
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def _pr_points(tp_flags, total_gt: int) -> tuple:
    flags = np.asarray(tp_flags, dtype=bool)
    if flags.size == 0 or total_gt <= 0:
        return ()
    tp = np.cumsum(flags)
    ranks = np.arange(1, flags.size + 1)
    return tuple(zip((tp / total_gt).tolist(), (tp / ranks).tolist()))


def _category_metrics(name, dets, gts, thresholds) -> CategoryMetrics:
    dets = sorted(dets, key=lambda d: (-d.score, d.det_id))
    ap_by_threshold = {}
    flags50 = [False] * len(dets)
    for t in thresholds:
        flags = match_detections(dets, gts, t)
        ap_by_threshold[t] = average_precision(flags, len(gts))
        if t == 0.5:
            flags50 = flags
    tp = sum(flags50)
    return CategoryMetrics(
        category=name,
        n_gt=len(gts),
        ap=float(np.mean(list(ap_by_threshold.values()))) if ap_by_threshold else 0.0,
        ap50=ap_by_threshold.get(0.5, 0.0),
        ap_by_threshold=ap_by_threshold,
        tp=tp,
        fp=len(dets) - tp,
        fn=len(gts) - tp,
        pr_points=_pr_points(flags50, len(gts)),
    )


def _scope_summary(categories: dict) -> ScopeSummary:
    scored = [m for m in categories.values() if m.n_gt > 0]
    if scored:
        ap = float(np.mean([m.ap for m in scored]))
        ap50 = float(np.mean([m.ap50 for m in scored]))
    else:
        ap = ap50 = 0.0
    return ScopeSummary(ap=ap, ap50=ap50, categories=categories)


def evaluate_corpus(gt_doc: CocoDocument, detections, iou_thresholds=IOU_THRESHOLDS) -> EvalResult:
    """Score a prediction set against a ground-truth document.

    Per (modality, category) and pooled: AP (mean over the IoU thresholds),
    AP50, PR points and TP/FP/FN counts at 0.50. Aggregation is the
    unweighted mean over categories that have at least one ground truth in
    the scope. Results are invariant to record ordering.
    """
    image_modality = {row["id"]: row["modality"] for row in gt_doc.images}
    category_names = {row["id"]: row["name"] for row in gt_doc.categories}

    unknown = sorted({d.image_id for d in detections} - set(image_modality))
    if unknown:
        raise IdSpaceMismatch(f"predictions reference image ids not in the ground truth: {unknown[:10]}")

    gts = [
        GroundTruth(
            image_id=row["image_id"],
            category_id=row["category_id"],
            bbox=BBox(*row["bbox"]),
            gt_id=row["id"],
        )
        for row in sorted(gt_doc.annotations, key=lambda r: r["id"])
    ]

    result = EvalResult()
    modalities = sorted(set(image_modality.values()))
    for modality in modalities:
        images = {i for i, m in image_modality.items() if m == modality}
        per_category = {}
        for cat_id in sorted(category_names):
            cat_gts = [g for g in gts if g.category_id == cat_id and g.image_id in images]
            cat_dets = [d for d in detections if d.category_id == cat_id and d.image_id in images]
            if not cat_gts and not cat_dets:
                continue
            per_category[category_names[cat_id]] = _category_metrics(
                category_names[cat_id], cat_dets, cat_gts, iou_thresholds
            )
        result.modalities[modality] = _scope_summary(per_category)

    pooled = {}
    for cat_id in sorted(category_names):
        cat_gts = [g for g in gts if g.category_id == cat_id]
        cat_dets = [d for d in detections if d.category_id == cat_id]
        if not cat_gts and not cat_dets:
            continue
        pooled[category_names[cat_id]] = _category_metrics(
            category_names[cat_id], cat_dets, cat_gts, iou_thresholds
        )
    result.pooled = _scope_summary(pooled)
    return result


# --------------------------------------------------------------------------
# Prediction document
# --------------------------------------------------------------------------


def detections_from_records(rows) -> list[Detection]:
    """Build Detection objects from prediction records.

    Records carry image_id, category_id, bbox [x, y, w, h], score, and an
    optional explicit id. Either every record has an id or none does; when
    absent, ids are assigned by sorting on (image, category, -score, bbox)
    so evaluation does not depend on file order.
    """
    if not isinstance(rows, list):
        raise DocumentError("prediction document must be a JSON list of records")
    for row in rows:
        missing = [k for k in ("image_id", "category_id", "bbox", "score") if k not in row]
        if missing:
            raise DocumentError(f"prediction record missing {missing}: {row}")
        if len(row["bbox"]) != 4:
            raise DocumentError(f"prediction bbox must be [x, y, w, h]: {row}")
    with_ids = [row for row in rows if "id" in row]
    if with_ids and len(with_ids) != len(rows):
        raise DocumentError("either every prediction carries an id or none does")
    if with_ids:
        ids = [row["id"] for row in rows]
        if len(set(ids)) != len(ids):
            raise DocumentError("duplicate prediction ids")
        ordered = rows
        det_ids = ids
    else:
        ordered = sorted(
            rows, key=lambda r: (r["image_id"], r["category_id"], -r["score"], tuple(r["bbox"]))
        )
        det_ids = list(range(1, len(ordered) + 1))
    return [
        Detection(
            image_id=row["image_id"],
            category_id=row["category_id"],
            bbox=BBox(*[float(v) for v in row["bbox"]]),
            score=float(row["score"]),
            det_id=det_id,
        )
        for row, det_id in zip(ordered, det_ids)
    ]


def load_predictions(path) -> list[Detection]:
    try:
        rows = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{path} is not valid JSON: {exc}") from exc
    return detections_from_records(rows)
