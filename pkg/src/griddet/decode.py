"""Turn head outputs into scored rotated boxes: peak extraction, box
decoding, IoU rescoring, and greedy rotated NMS.

A heatmap cell is a peak iff it is the strict maximum of its 3x3
neighborhood; equal-valued neighbors are resolved toward the
lexicographically smallest coordinate, so a plateau yields exactly one peak.
NMS is greedy by descending score within each class (boxes of different
classes never suppress each other) using exact rotated BEV IoU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, iou_bev
from .network import HeadOutput

DEFAULT_MAX_K = 500          # peaks per class per frame
DEFAULT_THRESHOLD = 0.05
DEFAULT_RESCORE_ALPHA = 0.5
DEFAULT_NMS_THRESHOLDS = {"vehicle": 0.7, "pedestrian": 0.2, "cyclist": 0.25}
NMS_FALLBACK = 0.5
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class OutputGrid:
    """Geometry of the head output map: BEV origin and cell size. Row index
    (axis 0) advances along x, column index (axis 1) along y."""

    x_min: float
    y_min: float
    cell: float

    @staticmethod
    def for_model(config) -> "OutputGrid":
        return OutputGrid(x_min=config.grid.mins[0], y_min=config.grid.mins[1],
                          cell=config.output_cell_size())


@dataclass
class Detection:
    box: Box3D
    class_id: str
    score: float
    peak: tuple[int, int] = (0, 0)  # source (row, col) on the output map

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def extract_peaks(heatmap: np.ndarray, max_k: int = DEFAULT_MAX_K,
                  threshold: float = DEFAULT_THRESHOLD) -> list[tuple[int, int, int, float]]:
    """Find 3x3-strict local maxima on a pre-sigmoid heatmap.

    Returns up to max_k peaks per class above the post-sigmoid threshold as
    (class index, row, col, score), sorted by descending score (ties by
    class, then coordinate).
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim == 2:
        hm = hm[None]
    ncls, h, w = hm.shape
    padded = np.full((ncls, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = hm
    is_peak = np.ones((ncls, h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            if (dy, dx) > (0, 0):
                # neighbor is lexicographically later: ties go to this cell
                is_peak &= hm >= neighbor
            else:
                is_peak &= hm > neighbor
    peaks: list[tuple[int, int, int, float]] = []
    for c in range(ncls):
        rows, cols = np.nonzero(is_peak[c])
        if rows.size == 0:
            continue
        scores = sigmoid(hm[c, rows, cols])
        keep = scores > threshold
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
        order = np.lexsort((cols, rows, -scores))[:max_k]
        peaks.extend((c, int(rows[i]), int(cols[i]), float(scores[i])) for i in order)
    peaks.sort(key=lambda p: (-p[3], p[0], p[1], p[2]))
    return peaks


def decode_boxes(peaks: list[tuple[int, int, int, float]], group,
                 grid: OutputGrid) -> list[Detection]:
    """Decode peaks of one head group into detections.

    x = x_min + (row + offset_x) * cell, y likewise; z read directly; dims
    are exp of the log-space map; yaw = atan2(sin, cos).
    """
    regs = group.regressions
    offset = regs["offset"]
    z_map = regs.get("z")
    dims_map = regs.get("dims")
    yaw_map = regs.get("yaw")
    vel_map = regs.get("velocity")
    iou_map = regs.get("iou")
    out = []
    for cls_idx, row, col, score in peaks:
        x = grid.x_min + (row + float(offset[0, row, col])) * grid.cell
        y = grid.y_min + (col + float(offset[1, row, col])) * grid.cell
        z = float(z_map[0, row, col]) if z_map is not None else 0.0
        if dims_map is not None:
            dims = np.exp(np.float64(dims_map[:, row, col]))
        else:
            dims = np.ones(3)
        yaw = (math.atan2(float(yaw_map[0, row, col]), float(yaw_map[1, row, col]))
               if yaw_map is not None else 0.0)
        vel = (np.float64(vel_map[:, row, col]) if vel_map is not None else None)
        det = Detection(
            box=Box3D(center=np.array([x, y, z]), dims=dims, yaw=yaw, velocity=vel),
            class_id=group.classes[cls_idx],
            score=score,
            peak=(row, col),
        )
        if iou_map is not None:
            det = rescore_detection(det, float(iou_map[0, row, col]))
        out.append(det)
    return out


def rescore(score: float, iou_pred: float, alpha: float = DEFAULT_RESCORE_ALPHA) -> float:
    """Blend classification score with the predicted IoU:
    score^(1 - alpha) * clamp(iou, 0, 1)^alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    iou = min(max(iou_pred, 0.0), 1.0)
    return float(score ** (1.0 - alpha) * iou ** alpha)


def rescore_detection(det: Detection, iou_pred: float,
                      alpha: float = DEFAULT_RESCORE_ALPHA) -> Detection:
    return Detection(box=det.box, class_id=det.class_id,
                     score=rescore(det.score, iou_pred, alpha), peak=det.peak)


def nms_rotated(dets: list[Detection],
                thresholds: dict[str, float] | float = None) -> list[Detection]:
    """Greedy per-class NMS on rotated BEV IoU; survivors keep descending-
    score order. Classes never suppress each other."""
    if thresholds is None:
        thresholds = DEFAULT_NMS_THRESHOLDS
    survivors: list[tuple[int, Detection]] = []
    by_class: dict[str, list[tuple[int, Detection]]] = {}
    for i, det in enumerate(dets):
        by_class.setdefault(det.class_id, []).append((i, det))
    for class_id, group in by_class.items():
        thr = (thresholds if isinstance(thresholds, (int, float))
               else thresholds.get(class_id, NMS_FALLBACK))
        group = sorted(group, key=lambda t: (-t[1].score, t[0]))
        kept: list[tuple[int, Detection]] = []
        for idx, det in group:
            if all(iou_bev(det.box, k.box) <= thr for _, k in kept):
                kept.append((idx, det))
        survivors.extend(kept)
    survivors.sort(key=lambda t: (-t[1].score, t[0]))
    return [det for _, det in survivors]


def decode_head_output(head: HeadOutput, grid: OutputGrid,
                       max_k: int = DEFAULT_MAX_K,
                       threshold: float = DEFAULT_THRESHOLD,
                       nms_thresholds: dict[str, float] | float = None) -> list[Detection]:
    """Full pipeline for one frame: peaks per group, decode, rescore (when
    the group has an IoU branch), then rotated NMS."""
    dets: list[Detection] = []
    for group in head.groups:
        peaks = extract_peaks(group.heatmap, max_k=max_k, threshold=threshold)
        dets.extend(decode_boxes(peaks, group, grid))
    return nms_rotated(dets, nms_thresholds)


# ---------------------------------------------------------------------------
# Detection JSONL
# ---------------------------------------------------------------------------

def detection_to_json(det: Detection, frame_id: str) -> dict:
    obj = {
        "schema_version": SCHEMA_VERSION,
        "frame_id": frame_id,
        "class": det.class_id,
        "score": round(float(det.score), 9),
        "center": [round(float(v), 9) for v in det.box.center],
        "dims": [round(float(v), 9) for v in det.box.dims],
        "yaw": round(float(det.box.yaw), 9),
    }
    if det.box.velocity is not None:
        obj["velocity"] = [round(float(v), 9) for v in det.box.velocity]
    return obj


def save_detections(dets_by_frame: list[tuple[str, list[Detection]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame_id, dets in dets_by_frame:
            for det in dets:
                fh.write(json.dumps(detection_to_json(det, frame_id)) + "\n")


def load_detections(path) -> list[tuple[str, Detection]]:
    """Read (frame_id, Detection) pairs from a detections JSONL file."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            det = Detection(
                box=Box3D(center=np.array(obj["center"]), dims=np.array(obj["dims"]),
                          yaw=float(obj["yaw"]),
                          velocity=(np.array(obj["velocity"])
                                    if obj.get("velocity") is not None else None)),
                class_id=str(obj["class"]),
                score=float(obj["score"]),
            )
            out.append((str(obj.get("frame_id", "")), det))
    return out
