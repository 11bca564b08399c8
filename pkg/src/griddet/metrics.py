"""Detection evaluation: greedy matching, precision/recall pooling, and
AP / heading-weighted APH at the L1 / L2 difficulty strata.

AP is 101-point interpolated: mean over recall points r in {0, 0.01, ..., 1}
of the maximum precision at recall >= r. APH replaces each true positive's
unit count with the heading weight w = 1 - dtheta / pi (dtheta the absolute
yaw error wrapped into [0, pi]) in both the precision and recall axes, so
APH <= AP always, with equality iff every TP has zero heading error.
Difficulty: L1 keeps labels with >= 5 points, L2 keeps >= 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decode import Detection
from .geometry import iou_3d as _iou_3d
from .geometry import iou_bev as _iou_bev
from .lidar_io import BoxLabel

DEFAULT_IOU_THRESHOLDS = {"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}
IOU_FALLBACK = 0.5
L1_MIN_POINTS = 5
L2_MIN_POINTS = 1
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EvalConfig:
    iou_kind: str = "bev"                 # "bev" | "3d"
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))
    difficulty: str = "L2"                # "L1" | "L2"
    recall_points: int = 101
    # optional BEV center range filter applied to labels and detections
    x_range: tuple[float, float] | None = None
    y_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.iou_kind not in ("bev", "3d"):
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}")
        if self.difficulty not in ("L1", "L2"):
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        for cls, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"iou threshold for {cls} must be in (0, 1]")

    def threshold(self, class_id: str) -> float:
        return self.iou_thresholds.get(class_id, IOU_FALLBACK)

    def iou(self, a, b) -> float:
        return _iou_3d(a, b) if self.iou_kind == "3d" else _iou_bev(a, b)


@dataclass
class ClassResult:
    ap: float
    aph: float
    tp: int
    fp: int
    fn: int
    num_gt: int
    precision: np.ndarray  # interpolated precision at the recall points
    h_precision: np.ndarray


@dataclass
class EvalResult:
    """Per-class results; classes without any ground truth are absent."""

    per_class: dict[str, ClassResult]
    difficulty: str
    iou_kind: str

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "difficulty": self.difficulty,
            "iou_kind": self.iou_kind,
            "classes": {
                cls: {"ap": r.ap, "aph": r.aph, "tp": r.tp, "fp": r.fp,
                      "fn": r.fn, "num_gt": r.num_gt}
                for cls, r in self.per_class.items()
            },
        }


@dataclass
class FrameMatches:
    """Greedy matching outcome for one frame: (detection, matched label or
    None) per detection, plus the labels left unmatched (the FNs)."""

    pairs: list[tuple[Detection, BoxLabel | None]]
    unmatched: list[BoxLabel]


def filter_difficulty(labels: list[BoxLabel], level: str) -> list[BoxLabel]:
    """L1 keeps labels with >= 5 points; L2 keeps labels with >= 1 point."""
    min_points = {"L1": L1_MIN_POINTS, "L2": L2_MIN_POINTS}[level]
    return [lab for lab in labels if lab.num_points >= min_points]


def _in_range(center, config: EvalConfig) -> bool:
    if config.x_range and not config.x_range[0] <= center[0] < config.x_range[1]:
        return False
    if config.y_range and not config.y_range[0] <= center[1] < config.y_range[1]:
        return False
    return True


def match_frame(dets: list[Detection], labels: list[BoxLabel],
                config: EvalConfig) -> FrameMatches:
    """Greedy matching: detections in descending score order each claim the
    unmatched same-class label of highest IoU >= threshold."""
    labels = filter_difficulty(labels, config.difficulty)
    labels = [lab for lab in labels if _in_range(lab.center, config)]
    dets = [d for d in dets if _in_range(d.box.center, config)]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(labels)
    pairs: list[tuple[Detection, BoxLabel | None]] = []
    label_boxes = [_label_box(lab) for lab in labels]
    for i in order:
        det = dets[i]
        thr = config.threshold(det.class_id)
        best_iou, best_j = 0.0, -1
        for j, lab in enumerate(labels):
            if matched[j] or lab.class_id != det.class_id:
                continue
            iou = config.iou(det.box, label_boxes[j])
            if iou >= thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            pairs.append((det, labels[best_j]))
        else:
            pairs.append((det, None))
    unmatched = [lab for j, lab in enumerate(labels) if not matched[j]]
    return FrameMatches(pairs=pairs, unmatched=unmatched)


def _label_box(lab: BoxLabel):
    from .geometry import Box3D
    return Box3D(center=lab.center, dims=lab.dims, yaw=lab.yaw)


def heading_weight(det_yaw: float, gt_yaw: float) -> float:
    """1 - dtheta / pi with dtheta = min(|d|, 2pi - |d|) in [0, pi]."""
    d = abs(det_yaw - gt_yaw) % (2.0 * math.pi)
    d = min(d, 2.0 * math.pi - d)
    return 1.0 - d / math.pi


def compute_ap_aph(frames: list[FrameMatches], config: EvalConfig) -> EvalResult:
    """Pool matches across frames and compute per-class AP and APH."""
    # per class: scored detections (score, is_tp, heading weight), gt count
    records: dict[str, list[tuple[float, bool, float]]] = {}
    num_gt: dict[str, int] = {}
    for frame in frames:
        for det, lab in frame.pairs:
            w = heading_weight(det.box.yaw, lab.yaw) if lab is not None else 0.0
            records.setdefault(det.class_id, []).append((det.score, lab is not None, w))
        for det, lab in frame.pairs:
            if lab is not None:
                num_gt[lab.class_id] = num_gt.get(lab.class_id, 0) + 1
        for lab in frame.unmatched:
            num_gt[lab.class_id] = num_gt.get(lab.class_id, 0) + 1
    per_class: dict[str, ClassResult] = {}
    recall_pts = np.linspace(0.0, 1.0, config.recall_points)
    for cls, n_gt in sorted(num_gt.items()):
        if n_gt == 0:
            continue  # class reported as absent, not zero
        recs = sorted(records.get(cls, []), key=lambda r: -r[0])
        tp = np.cumsum([1.0 if r[1] else 0.0 for r in recs])
        htp = np.cumsum([r[2] if r[1] else 0.0 for r in recs])
        n_det = np.arange(1, len(recs) + 1, dtype=np.float64)
        if len(recs):
            precision = tp / n_det
            recall = tp / n_gt
            h_precision = htp / n_det
            h_recall = htp / n_gt
        else:
            precision = recall = h_precision = h_recall = np.zeros(0)
        p_interp = _interp_precision(precision, recall, recall_pts)
        hp_interp = _interp_precision(h_precision, h_recall, recall_pts)
        n_tp = int(tp[-1]) if len(recs) else 0
        per_class[cls] = ClassResult(
            ap=float(p_interp.mean()),
            aph=float(hp_interp.mean()),
            tp=n_tp,
            fp=len(recs) - n_tp,
            fn=n_gt - n_tp,
            num_gt=n_gt,
            precision=p_interp,
            h_precision=hp_interp,
        )
    return EvalResult(per_class=per_class, difficulty=config.difficulty,
                      iou_kind=config.iou_kind)


def _interp_precision(precision: np.ndarray, recall: np.ndarray,
                      recall_pts: np.ndarray) -> np.ndarray:
    """Interpolated precision: max precision among points with recall >= r."""
    out = np.zeros_like(recall_pts)
    if len(precision) == 0:
        return out
    # running max of precision from the right over the recall-sorted curve
    order = np.argsort(recall, kind="stable")
    rec_sorted = recall[order]
    prec_sorted = precision[order]
    prec_from_right = np.maximum.accumulate(prec_sorted[::-1])[::-1]
    idx = np.searchsorted(rec_sorted, recall_pts, side="left")
    valid = idx < len(rec_sorted)
    out[valid] = prec_from_right[idx[valid]]
    return out


def format_report(result: EvalResult) -> str:
    """Aligned plain-text table of per-class AP / APH."""
    lines = [f"{'class':<12} {'AP':>8} {'APH':>8} {'TP':>6} {'FP':>6} {'FN':>6} {'GT':>6}"]
    for cls, r in result.per_class.items():
        lines.append(f"{cls:<12} {r.ap:>8.4f} {r.aph:>8.4f} "
                     f"{r.tp:>6d} {r.fp:>6d} {r.fn:>6d} {r.num_gt:>6d}")
    return "\n".join(lines)
