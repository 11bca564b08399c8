"""Training-time data transforms: global flip/rotation/scale/translation,
ground-truth copy-and-paste with a fade schedule, and random frame dropping.

Every transform is a pure function of (input, seed): sampling uses a Philox
generator keyed by the seed, so augmented scenes reproduce byte-for-byte.
The copy-and-paste database stores cropped object points in the canonical
box frame; pasted objects keep their stored global pose and are rejected on
any BEV overlap, and original scene points falling inside a pasted box are
removed so interiors stay physically consistent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3D, iou_bev, points_in_box, rotation_z, transform_box, transform_points
from .lidar_io import BoxLabel, DataError, PointCloud

SCHEMA_VERSION = 1
IN_BOX_TOL = 1e-6


class AugmentConfigError(DataError):
    """Missing or inconsistent augmentation inputs (e.g., absent database)."""


@dataclass(frozen=True)
class PasteConfig:
    db_path: str
    samples_per_class: dict = field(default_factory=dict)  # class -> count
    fade_after_epoch: int = 30


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_std: float = 0.5
    paste: PasteConfig | None = None
    frame_drop_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise AugmentConfigError("flip_prob must be in [0, 1]")
        if not 0.0 <= self.frame_drop_prob <= 1.0:
            raise AugmentConfigError("frame_drop_prob must be in [0, 1]")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise AugmentConfigError("rotation_range must be ordered")
        if self.scale_range[0] > self.scale_range[1]:
            raise AugmentConfigError("scale_range must be ordered")
        if self.translation_std < 0:
            raise AugmentConfigError("translation_std must be >= 0")

    @staticmethod
    def from_json(obj: dict) -> "AugmentConfig":
        obj = dict(obj)
        obj.pop("schema_version", None)
        known = {"flip_prob", "rotation_range", "scale_range", "translation_std",
                 "paste", "frame_drop_prob"}
        unknown = set(obj) - known
        if unknown:
            raise AugmentConfigError(f"unknown augment config keys: {sorted(unknown)}")
        paste = None
        if obj.get("paste") is not None:
            p = dict(obj["paste"])
            unknown = set(p) - {"db_path", "samples_per_class", "fade_after_epoch"}
            if unknown:
                raise AugmentConfigError(f"unknown paste config keys: {sorted(unknown)}")
            paste = PasteConfig(db_path=p["db_path"],
                                samples_per_class=dict(p.get("samples_per_class", {})),
                                fade_after_epoch=int(p.get("fade_after_epoch", 30)))
        return AugmentConfig(
            flip_prob=float(obj.get("flip_prob", 0.5)),
            rotation_range=tuple(obj.get("rotation_range", (-math.pi / 4, math.pi / 4))),
            scale_range=tuple(obj.get("scale_range", (0.9, 1.1))),
            translation_std=float(obj.get("translation_std", 0.5)),
            paste=paste,
            frame_drop_prob=float(obj.get("frame_drop_prob", 0.0)),
        )


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def _label_box(lab: BoxLabel) -> Box3D:
    return Box3D(center=lab.center, dims=lab.dims, yaw=lab.yaw, velocity=lab.velocity)


def _apply_to_label(lab: BoxLabel, op: str, *params) -> BoxLabel:
    box = transform_box(_label_box(lab), op, *params)
    return BoxLabel(center=box.center, dims=box.dims, yaw=box.yaw,
                    class_id=lab.class_id, num_points=lab.num_points,
                    velocity=box.velocity, frame_id=lab.frame_id)


def apply_global(cloud: PointCloud, labels: list[BoxLabel], config: AugmentConfig,
                 seed: int) -> tuple[PointCloud, list[BoxLabel]]:
    """Sample one flip/rotation/scale/translation draw and apply it
    identically to points and boxes. Zero-width ranges and zero probabilities
    make this the identity."""
    rng = _rng(seed)
    ops: list[tuple] = []
    if rng.uniform() < config.flip_prob:
        ops.append(("flip_x",))
    if rng.uniform() < config.flip_prob:
        ops.append(("flip_y",))
    theta = rng.uniform(*config.rotation_range)
    if theta != 0.0:
        ops.append(("rotate", theta))
    s = rng.uniform(*config.scale_range)
    if s != 1.0:
        ops.append(("scale", s))
    if config.translation_std > 0:
        t = rng.normal(0.0, config.translation_std, 3)
        ops.append(("translate", t))

    xyz = cloud.xyz.astype(np.float64)
    for op in ops:
        xyz = transform_points(xyz, *op)
        labels = [_apply_to_label(lab, *op) for lab in labels]
    data = cloud.data.copy()
    data[:, 0:3] = xyz.astype(np.float32)
    out = PointCloud(data, frame_id=cloud.frame_id,
                     num_source_frames=cloud.num_source_frames)
    return out, labels


# ---------------------------------------------------------------------------
# Ground-truth database
# ---------------------------------------------------------------------------

@dataclass
class GtSample:
    label: BoxLabel
    points: np.ndarray  # (N, 5) in the canonical box frame (centered, yaw 0)


@dataclass
class GtDatabase:
    per_class: dict[str, list[GtSample]]

    def classes(self) -> list[str]:
        return sorted(self.per_class)


def build_gt_database(frames: list[tuple[PointCloud, list[BoxLabel]]]) -> GtDatabase:
    """Crop the in-box points of every labeled object and store them in the
    canonical box frame (translated to the center, rotated to yaw 0). Labels
    whose boxes contain no points are skipped."""
    per_class: dict[str, list[GtSample]] = {}
    for cloud, labels in frames:
        xyz = cloud.xyz.astype(np.float64)
        for lab in labels:
            box = _label_box(lab)
            mask = points_in_box(xyz, box, tol=IN_BOX_TOL)
            if not mask.any():
                continue
            pts = cloud.data[mask].astype(np.float64)
            local = pts.copy()
            local[:, 0:3] = (pts[:, 0:3] - lab.center) @ rotation_z(-lab.yaw).T
            stored = BoxLabel(center=lab.center, dims=lab.dims, yaw=lab.yaw,
                              class_id=lab.class_id, num_points=int(mask.sum()),
                              velocity=lab.velocity, frame_id=lab.frame_id)
            per_class.setdefault(lab.class_id, []).append(
                GtSample(stored, local.astype(np.float32)))
    return GtDatabase(per_class=per_class)


def save_gt_database(db: GtDatabase, out_dir) -> None:
    """Directory layout: one binary point blob per class plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"schema_version": SCHEMA_VERSION, "classes": {}}
    for cls, samples in sorted(db.per_class.items()):
        blob_name = f"{cls}.bin"
        chunks = []
        entries = []
        offset = 0
        for s in samples:
            pts = np.ascontiguousarray(s.points, dtype="<f4")
            entries.append({
                "center": [float(v) for v in s.label.center],
                "dims": [float(v) for v in s.label.dims],
                "yaw": float(s.label.yaw),
                "num_points": int(pts.shape[0]),
                "offset": offset,
                **({"velocity": [float(v) for v in s.label.velocity]}
                   if s.label.velocity is not None else {}),
            })
            chunks.append(pts.tobytes())
            offset += pts.shape[0]
        (out_dir / blob_name).write_bytes(b"".join(chunks))
        index["classes"][cls] = {"blob": blob_name, "samples": entries}
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n",
                                        encoding="utf-8")


def load_gt_database(db_dir) -> GtDatabase:
    db_dir = Path(db_dir)
    index_path = db_dir / "index.json"
    if not index_path.exists():
        raise AugmentConfigError(f"ground-truth database not found at {db_dir}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    per_class: dict[str, list[GtSample]] = {}
    for cls, info in index["classes"].items():
        blob = np.frombuffer((db_dir / info["blob"]).read_bytes(),
                             dtype="<f4").reshape(-1, 5)
        samples = []
        for e in info["samples"]:
            pts = blob[e["offset"]:e["offset"] + e["num_points"]].copy()
            label = BoxLabel(center=np.array(e["center"]), dims=np.array(e["dims"]),
                             yaw=float(e["yaw"]), class_id=cls,
                             num_points=int(e["num_points"]),
                             velocity=(np.array(e["velocity"])
                                       if e.get("velocity") is not None else None))
            samples.append(GtSample(label, pts))
        per_class[cls] = samples
    return GtDatabase(per_class=per_class)


def paste_samples(cloud: PointCloud, labels: list[BoxLabel], db: GtDatabase,
                  config: AugmentConfig, epoch: int,
                  seed: int) -> tuple[PointCloud, list[BoxLabel]]:
    """Faded copy-and-paste: past the fade epoch this is the identity.

    Otherwise draw up to samples_per_class objects per class, keep each
    candidate only if its BEV IoU with every existing and already-pasted box
    is exactly 0, drop original points inside accepted boxes, and append the
    pasted points and labels.
    """
    if config.paste is None:
        raise AugmentConfigError("paste_samples requires config.paste")
    if epoch >= config.paste.fade_after_epoch:
        return cloud, list(labels)
    rng = _rng(seed)
    existing = [_label_box(lab) for lab in labels]
    accepted: list[GtSample] = []
    for cls in db.classes():
        want = int(config.paste.samples_per_class.get(cls, 0))
        pool = db.per_class.get(cls, [])
        if want <= 0 or not pool:
            continue
        order = rng.permutation(len(pool))
        taken = 0
        for idx in order:
            if taken >= want:
                break
            cand = pool[idx]
            cand_box = _label_box(cand.label)
            if any(iou_bev(cand_box, b) > 0.0 for b in existing):
                continue
            existing.append(cand_box)
            accepted.append(cand)
            taken += 1
    if not accepted:
        return cloud, list(labels)

    keep = np.ones(len(cloud), dtype=bool)
    xyz = cloud.xyz.astype(np.float64)
    new_points = [cloud.data]
    new_labels = list(labels)
    for sample in accepted:
        lab = sample.label
        keep &= ~points_in_box(xyz, _label_box(lab))
        pts = sample.points.astype(np.float64)
        world = pts.copy()
        world[:, 0:3] = pts[:, 0:3] @ rotation_z(lab.yaw).T + lab.center
        new_points.append(world.astype(np.float32))
        new_labels.append(BoxLabel(center=lab.center, dims=lab.dims, yaw=lab.yaw,
                                   class_id=lab.class_id, num_points=lab.num_points,
                                   velocity=lab.velocity, frame_id=cloud.frame_id))
    new_points[0] = cloud.data[keep]
    merged = np.concatenate(new_points, axis=0)
    out = PointCloud(merged, frame_id=cloud.frame_id,
                     num_source_frames=cloud.num_source_frames)
    return out, new_labels


def drop_frames(past: list, prob: float, seed: int) -> list:
    """Drop each past sweep independently with the given probability; the
    current sweep is never part of `past` and is never dropped."""
    if not 0.0 <= prob <= 1.0:
        raise AugmentConfigError("drop probability must be in [0, 1]")
    rng = _rng(seed)
    draws = rng.uniform(size=len(past))
    return [entry for entry, u in zip(past, draws) if u >= prob]
