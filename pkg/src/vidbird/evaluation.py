"""VOC-2007 11-point AP at IOU thresholds 0.50:0.95 with size strata."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .boxes import as_box_array, box_area, box_iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
SMALL_MAX = 32 * 32
LARGE_MIN = 96 * 96
STRATA = ("small", "medium", "large")


@dataclass
class MatchResult:
    scores: np.ndarray  # descending, ignored detections removed
    tp: np.ndarray  # bool, aligned with scores
    n_gt: int


def _flatten(dets, frame_keys):
    """Flatten per-frame detections into ``(score, order, frame, box)`` lists."""
    flat = []
    for key in frame_keys:
        for d in dets.get(key, ()):
            box = d.box.as_tuple() if hasattr(d, "box") else tuple(d[:4])
            score = d.score if hasattr(d, "score") else float(d[4])
            flat.append((score, len(flat), key, box))
    # descending score, insertion order on ties
    flat.sort(key=lambda r: (-r[0], r[1]))
    return flat


def match(
    dets: Mapping[Hashable, Sequence],
    gts: Mapping[Hashable, Sequence],
    iou_thr: float = 0.5,
    gt_ignore: Mapping[Hashable, np.ndarray] | None = None,
) -> MatchResult:
    """Greedy matching in descending score; each GT is matched at most once.

    A detection is TP when its best *unmatched* counted GT reaches ``iou_thr``.
    GTs flagged in ``gt_ignore`` are not counted; a detection that can only
    reach an ignored GT is dropped instead of counted as FP.
    """
    keys = list(dict.fromkeys(list(gts.keys()) + list(dets.keys())))
    gt_arr = {k: as_box_array(gts.get(k, ())) for k in keys}
    ign = {}
    for k in keys:
        flags = None if gt_ignore is None else gt_ignore.get(k)
        ign[k] = np.zeros(len(gt_arr[k]), bool) if flags is None else np.asarray(flags, bool)
    used = {k: np.zeros(len(gt_arr[k]), bool) for k in keys}
    n_gt = int(sum((~ign[k]).sum() for k in keys))

    scores, tp = [], []
    for score, _, key, box in _flatten(dets, keys):
        g = gt_arr[key]
        if len(g) == 0:
            scores.append(score)
            tp.append(False)
            continue
        iou = box_iou(np.asarray(box)[None], g)[0]
        counted = np.where(~ign[key] & ~used[key], iou, -1.0)
        best = int(np.argmax(counted))
        if counted[best] >= iou_thr:
            used[key][best] = True
            scores.append(score)
            tp.append(True)
        elif ign[key].any() and iou[ign[key]].max() >= iou_thr:
            continue
        else:
            scores.append(score)
            tp.append(False)
    return MatchResult(np.asarray(scores, float), np.asarray(tp, bool), n_gt)


def precision_recall(tp: np.ndarray, gt_count: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.asarray(tp, bool)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / gt_count if gt_count > 0 else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall


def average_precision(tp, scores, gt_count: int) -> float:
    """11-point interpolated AP (recall 0.0, 0.1, ..., 1.0).

    ``tp`` and ``scores`` are per detection; detections are re-sorted by
    descending score (stable). No GT: 1.0 without detections, else 0.0.
    """
    tp = np.asarray(tp, bool)
    scores = np.asarray(scores, float)
    if gt_count < 0:
        raise ValueError("gt_count must be >= 0")
    if gt_count == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    tp = tp[np.argsort(-scores, kind="stable")]
    precision, recall = precision_recall(tp, gt_count)
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t - 1e-12
        ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
    return float(ap)


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    ap: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_threshold: dict[float, float]
    n_detections: int
    n_gt: int
    n_gt_strata: dict[str, int]
    pr_curves: dict[float, dict[str, list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP": self.ap,
            "AP_S": self.ap_small,
            "AP_M": self.ap_medium,
            "AP_L": self.ap_large,
            "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()},
            "n_detections": self.n_detections,
            "n_gt": self.n_gt,
            "n_gt_strata": self.n_gt_strata,
            "pr_curves": {f"{k:.2f}": v for k, v in self.pr_curves.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        cols = ("AP50", "AP75", "AP", "AP_S", "AP_M", "AP_L")
        vals = (self.ap50, self.ap75, self.ap, self.ap_small, self.ap_medium, self.ap_large)
        head = " | ".join(f"{c:>6}" for c in cols)
        row = " | ".join(f"{v:6.3f}" if v is not None else f"{'-':>6}" for v in vals)
        return f"{head}\n{'-' * len(head)}\n{row}\n"


def stratum_of(boxes: np.ndarray) -> np.ndarray:
    """0 small (< 32^2), 1 medium ([32^2, 96^2]), 2 large (> 96^2) by GT area."""
    area = box_area(as_box_array(boxes))
    return np.where(area < SMALL_MAX, 0, np.where(area > LARGE_MIN, 2, 1))


def evaluate(
    dets: Mapping[Hashable, Sequence],
    gts: Mapping[Hashable, Sequence],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """AP over frames keyed consistently in ``dets`` and ``gts``.

    Size-stratified APs restrict counted GTs to one stratum and drop
    detections matched to out-of-stratum GTs; they are ``None`` when the
    stratum has no GT, and averaged over ``thresholds``.
    """
    per_thr, curves = {}, {}
    for thr in thresholds:
        m = match(dets, gts, thr)
        per_thr[float(thr)] = average_precision(m.tp, m.scores, m.n_gt)
        p, r = precision_recall(m.tp, m.n_gt)
        curves[float(thr)] = {"precision": p.tolist(), "recall": r.tolist()}

    strata_counts = {name: 0 for name in STRATA}
    strata_ap: dict[str, float | None] = {}
    gt_strata = {k: stratum_of(v) for k, v in gts.items()}
    for s, name in enumerate(STRATA):
        strata_counts[name] = int(sum((v == s).sum() for v in gt_strata.values()))
        if strata_counts[name] == 0:
            strata_ap[name] = None
            continue
        ignore = {k: v != s for k, v in gt_strata.items()}
        aps = []
        for thr in thresholds:
            m = match(dets, gts, thr, ignore)
            aps.append(average_precision(m.tp, m.scores, m.n_gt))
        strata_ap[name] = float(np.mean(aps))

    def _at(t):
        return per_thr.get(t, float("nan"))

    return EvalReport(
        ap50=_at(0.5),
        ap75=_at(0.75),
        ap=float(np.mean(list(per_thr.values()))) if per_thr else float("nan"),
        ap_small=strata_ap["small"],
        ap_medium=strata_ap["medium"],
        ap_large=strata_ap["large"],
        per_threshold=per_thr,
        n_detections=int(sum(len(v) for v in dets.values())),
        n_gt=int(sum(len(as_box_array(v)) for v in gts.values())),
        n_gt_strata=strata_counts,
        pr_curves=curves,
    )
