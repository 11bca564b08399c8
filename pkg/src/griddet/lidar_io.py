"""Point-cloud and annotation I/O: binary point files, JSONL labels, sequence
manifests, multi-sweep assembly, and range cropping.

Point files are little-endian float32 records with 5 columns
(x, y, z, intensity, dt). Coordinates are meters in the ego frame, intensity
is normalized to [0, 1], and dt <= 0 is the time offset in seconds of the
point's source sweep relative to the current sweep (0 for current-frame
points). Multi-sweep clouds are assembled by rigidly mapping past sweeps into
the current ego frame and shifting dt by the inter-frame gap (0.1 s at the
10 Hz capture rate unless the manifest overrides it).

Annotations are JSON Lines, one object per line with keys
{frame_id, center, dims, yaw, class, num_points, velocity?}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import wrap_angle

POINT_COLUMNS = ("x", "y", "z", "intensity", "dt")
RECORD_BYTES = 4 * len(POINT_COLUMNS)
DEFAULT_FRAME_GAP = 0.1  # seconds, 10 Hz capture
SCHEMA_VERSION = 1

POSE_ORTHO_TOL = 1e-6


class DataError(Exception):
    """Base class for malformed or invalid input data."""


class FormatError(DataError):
    """Structurally malformed file (bad length, unparseable)."""


class ValidationError(DataError):
    """Well-formed file whose values violate an invariant."""


@dataclass(frozen=True)
class Pose:
    """Ego-to-world rigid transform."""

    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=POSE_ORTHO_TOL):
            raise ValidationError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > POSE_ORTHO_TOL:
            raise ValidationError("pose rotation determinant is not +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.T
        return Pose(rot_inv, -(rot_inv @ self.translation))

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def to_json(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "Pose":
        return Pose(np.array(obj["rotation"]), np.array(obj["translation"]))


@dataclass
class PointCloud:
    """Column-typed point set; `data` is an (N, 5) float32 array in the order
    (x, y, z, intensity, dt). Immutable by convention after construction."""

    data: np.ndarray
    frame_id: str = ""
    num_source_frames: int = 1

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1, 5)
        if self.num_source_frames < 1:
            raise ValidationError("num_source_frames must be >= 1")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, 0:3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def dt(self) -> np.ndarray:
        return self.data[:, 4]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            bad = int(np.argwhere(~np.isfinite(self.data).all(axis=1))[0, 0])
            raise ValidationError(f"non-finite point value at record {bad}")
        if len(self) and np.any(self.data[:, 4] > 0):
            bad = int(np.argmax(self.data[:, 4] > 0))
            raise ValidationError(f"dt must be <= 0, violated at record {bad}")
        if (self.num_source_frames == 1 and len(self)
                and not np.any(self.data[:, 4] == 0.0)):
            raise ValidationError("single-frame cloud has no dt == 0 point")

    @staticmethod
    def empty(frame_id: str = "") -> "PointCloud":
        return PointCloud(np.zeros((0, 5), dtype=np.float32), frame_id=frame_id)

    @staticmethod
    def from_columns(x, y, z, intensity=None, dt=None, frame_id: str = "",
                     num_source_frames: int = 1) -> "PointCloud":
        x = np.asarray(x, dtype=np.float32)
        n = x.shape[0]
        cols = [
            x,
            np.asarray(y, dtype=np.float32),
            np.asarray(z, dtype=np.float32),
            np.zeros(n, np.float32) if intensity is None else np.asarray(intensity, np.float32),
            np.zeros(n, np.float32) if dt is None else np.asarray(dt, np.float32),
        ]
        return PointCloud(np.stack(cols, axis=1), frame_id=frame_id,
                          num_source_frames=num_source_frames)


@dataclass
class BoxLabel:
    """Ground-truth box annotation."""

    center: np.ndarray   # (3,)
    dims: np.ndarray     # (3,) l, w, h, strictly positive
    yaw: float           # radians in (-pi, pi]
    class_id: str        # "vehicle", "pedestrian", "cyclist", ...
    num_points: int = 0
    velocity: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(self.dims > 0):
            raise ValidationError(f"label dims must be positive, got {self.dims}")
        if self.num_points < 0:
            raise ValidationError("num_points must be >= 0")
        self.yaw = wrap_angle(float(self.yaw))
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)


# ---------------------------------------------------------------------------
# Binary point files
# ---------------------------------------------------------------------------

def load_point_file(path, frame_id: str | None = None,
                    columns: tuple[str, ...] = POINT_COLUMNS) -> PointCloud:
    """Load a little-endian float32 point file; one Point per record.

    Raises FormatError (with the byte offset) when the file length is not a
    multiple of the record size, and ValidationError (with the record index)
    on non-finite values. Round-trips bit-exactly with save_point_file.
    """
    path = Path(path)
    raw = path.read_bytes()
    record_bytes = 4 * len(columns)
    if len(raw) % record_bytes != 0:
        offset = len(raw) - (len(raw) % record_bytes)
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file length {len(raw)} not a multiple of {record_bytes})")
    flat = np.frombuffer(raw, dtype="<f4").reshape(-1, len(columns))
    if columns != POINT_COLUMNS:
        # map arbitrary column layouts onto the canonical 5-column order
        out = np.zeros((flat.shape[0], 5), dtype=np.float32)
        for i, name in enumerate(columns):
            if name in POINT_COLUMNS:
                out[:, POINT_COLUMNS.index(name)] = flat[:, i]
        flat = out
    cloud = PointCloud(flat.copy(), frame_id=frame_id if frame_id is not None else path.stem)
    finite = np.isfinite(cloud.data).all(axis=1)
    if not finite.all():
        raise ValidationError(
            f"{path}: non-finite value at record {int(np.argmin(finite))}")
    return cloud


def save_point_file(cloud: PointCloud, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(cloud.data, dtype="<f4")
    path.write_bytes(data.tobytes())


# ---------------------------------------------------------------------------
# Label JSONL
# ---------------------------------------------------------------------------

def load_labels(path) -> list[BoxLabel]:
    """Read annotations from a JSON Lines file."""
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                labels.append(BoxLabel(
                    center=np.array(obj["center"], dtype=np.float64),
                    dims=np.array(obj["dims"], dtype=np.float64),
                    yaw=float(obj["yaw"]),
                    class_id=str(obj["class"]),
                    num_points=int(obj.get("num_points", 0)),
                    velocity=(np.array(obj["velocity"], dtype=np.float64)
                              if obj.get("velocity") is not None else None),
                    frame_id=str(obj.get("frame_id", "")),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad label record ({exc})") from exc
    return labels


def save_labels(labels: list[BoxLabel], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            obj = {
                "schema_version": SCHEMA_VERSION,
                "frame_id": lab.frame_id,
                "center": [float(v) for v in lab.center],
                "dims": [float(v) for v in lab.dims],
                "yaw": float(lab.yaw),
                "class": lab.class_id,
                "num_points": int(lab.num_points),
            }
            if lab.velocity is not None:
                obj["velocity"] = [float(v) for v in lab.velocity]
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Sequence manifests
# ---------------------------------------------------------------------------

@dataclass
class FrameEntry:
    frame_id: str
    path: str
    timestamp: float
    pose: Pose
    labels_path: str | None = None


@dataclass
class SequenceManifest:
    """Sidecar JSON describing a sequence: per-frame point files, timestamps,
    poses, and the inter-frame gap."""

    frames: list[FrameEntry]
    frame_gap: float = DEFAULT_FRAME_GAP
    root: Path = field(default_factory=Path)

    def frame_path(self, entry: FrameEntry) -> Path:
        return self.root / entry.path


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        frames = [
            FrameEntry(
                frame_id=str(f["frame_id"]),
                path=str(f["path"]),
                timestamp=float(f.get("timestamp", i * obj.get("frame_gap", DEFAULT_FRAME_GAP))),
                pose=Pose.from_json(f["pose"]) if "pose" in f else Pose.identity(),
                labels_path=f.get("labels_path"),
            )
            for i, f in enumerate(obj["frames"])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad manifest ({exc})") from exc
    return SequenceManifest(frames=frames,
                            frame_gap=float(obj.get("frame_gap", DEFAULT_FRAME_GAP)),
                            root=path.parent)


def save_manifest(manifest: SequenceManifest, path) -> None:
    path = Path(path)
    obj = {
        "schema_version": SCHEMA_VERSION,
        "frame_gap": manifest.frame_gap,
        "frames": [
            {
                "frame_id": f.frame_id,
                "path": f.path,
                "timestamp": f.timestamp,
                "pose": f.pose.to_json(),
                **({"labels_path": f.labels_path} if f.labels_path else {}),
            }
            for f in manifest.frames
        ],
    }
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Multi-sweep assembly and range cropping
# ---------------------------------------------------------------------------

def assemble_frames(current: PointCloud, past: list[tuple[PointCloud, Pose]],
                    current_pose: Pose, max_frames: int,
                    frame_gap: float = DEFAULT_FRAME_GAP) -> PointCloud:
    """Merge past sweeps into the current ego frame.

    `past` is ordered most recent first. Sweep j (1-based) is mapped through
    current_pose^-1 o past_pose_j and its dt shifted by -j * frame_gap. At
    most max_frames sweeps are kept in total, current included; current
    points are never modified.
    """
    if max_frames < 1:
        raise ValidationError("max_frames must be >= 1")
    kept = past[:max_frames - 1]
    parts = [current.data]
    inv = current_pose.inverse()
    for j, (cloud, pose) in enumerate(kept, start=1):
        rel = inv.compose(pose)
        data = cloud.data.copy()
        if len(cloud):
            data[:, 0:3] = rel.apply(cloud.xyz.astype(np.float64)).astype(np.float32)
            data[:, 4] = data[:, 4] - np.float32(j * frame_gap)
        parts.append(data)
    merged = np.concatenate(parts, axis=0) if parts else np.zeros((0, 5), np.float32)
    return PointCloud(merged, frame_id=current.frame_id,
                      num_source_frames=1 + len(kept))


def crop_range(cloud: PointCloud, spec) -> PointCloud:
    """Keep exactly the points with min <= coordinate < max on every cropped
    axis of the grid spec; order is preserved. Idempotent."""
    if len(cloud) == 0:
        return PointCloud(cloud.data.copy(), frame_id=cloud.frame_id,
                          num_source_frames=cloud.num_source_frames)
    coords = spec.view_coords(cloud.xyz.astype(np.float64))
    mask = np.ones(len(cloud), dtype=bool)
    for axis in range(coords.shape[1]):
        lo, hi = spec.mins[axis], spec.maxs[axis]
        mask &= (coords[:, axis] >= lo) & (coords[:, axis] < hi)
    return PointCloud(cloud.data[mask].copy(), frame_id=cloud.frame_id,
                      num_source_frames=cloud.num_source_frames)
