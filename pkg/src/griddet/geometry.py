"""Rotated 3D box geometry: corners, BEV/3D IoU, and rigid/scale transforms.

Boxes live in the ego frame: center (x, y, z) in meters, dims (l, w, h) in
meters, yaw in radians about +z measured from +x. In bird's-eye view a box is
the rotated rectangle spanned by l along its heading and w across it.

IoU uses exact convex polygon clipping (Sutherland-Hodgman) with shoelace
areas, all in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# On-edge classification tolerance for polygon clipping.
CLIP_EPS = 1e-9

# Boxes with BEV area below this are treated as degenerate (zero overlap).
DEGENERATE_AREA = 1e-12


def wrap_angle(angle):
    """Wrap an angle (scalar or array) into the principal range (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.isscalar(angle) or np.ndim(angle) == 0:
        return float(wrapped)
    return wrapped


@dataclass
class Box3D:
    """Oriented 3D box: center (m), dims l/w/h (m, positive), yaw in (-pi, pi]."""

    center: np.ndarray  # (3,)
    dims: np.ndarray    # (3,) l, w, h
    yaw: float
    velocity: np.ndarray | None = None  # (2,) vx, vy m/s

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(self.dims > 0):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        self.yaw = wrap_angle(float(self.yaw))
        if self.velocity is not None:
            self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)

    @property
    def bev_area(self) -> float:
        return float(self.dims[0] * self.dims[1])

    @property
    def volume(self) -> float:
        return float(self.dims[0] * self.dims[1] * self.dims[2])

    @property
    def z_interval(self) -> tuple[float, float]:
        half = self.dims[2] / 2.0
        return (self.center[2] - half, self.center[2] + half)


def bev_corners(box: Box3D) -> np.ndarray:
    """Return the 4 BEV corners of a box, counterclockwise, as a (4, 2) array."""
    l2, w2 = box.dims[0] / 2.0, box.dims[1] / 2.0
    local = np.array([[l2, w2], [-l2, w2], [-l2, -w2], [l2, -w2]], dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return local @ rot.T + box.center[:2]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (N, 2) vertices (CCW positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip a convex subject polygon by a convex CCW clip polygon.

    Sutherland-Hodgman: the subject is clipped against each clip edge in
    turn. Points within CLIP_EPS of an edge count as inside so shared edges
    do not produce spurious slivers.
    """
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) == 0:
            return np.zeros((0, 2), dtype=np.float64)
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        # cross(edge, p - a): >= 0 means p is on or left of the edge, which
        # is the inside half-plane for a CCW clip polygon
        side = edge[0] * (output[:, 1] - a[1]) - edge[1] * (output[:, 0] - a[0])
        inside = side >= -CLIP_EPS
        new_pts: list[np.ndarray] = []
        m = len(output)
        for j in range(m):
            cur, nxt = output[j], output[(j + 1) % m]
            cur_in, nxt_in = inside[j], inside[(j + 1) % m]
            if cur_in:
                new_pts.append(cur)
            if cur_in != nxt_in:
                denom = side[j] - side[(j + 1) % m]
                t = side[j] / denom if abs(denom) > CLIP_EPS * CLIP_EPS else 0.0
                new_pts.append(cur + t * (nxt - cur))
        output = np.array(new_pts, dtype=np.float64) if new_pts else np.zeros((0, 2))
    return output


def intersection_area_bev(a: Box3D, b: Box3D) -> float:
    """Exact BEV intersection area of two rotated boxes."""
    ca, cb = bev_corners(a), bev_corners(b)
    clipped = clip_polygon(ca, cb)
    return abs(polygon_area(clipped))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated BEV IoU in [0, 1]. Degenerate (near-zero area) boxes give 0."""
    area_a, area_b = a.bev_area, b.bev_area
    if area_a < DEGENERATE_AREA or area_b < DEGENERATE_AREA:
        return 0.0
    inter = intersection_area_bev(a, b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times z-overlap over the volume union."""
    vol_a, vol_b = a.volume, b.volume
    if vol_a < DEGENERATE_AREA or vol_b < DEGENERATE_AREA:
        return 0.0
    inter_bev = intersection_area_bev(a, b)
    za0, za1 = a.z_interval
    zb0, zb1 = b.z_interval
    z_overlap = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_bev * z_overlap
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


# ---------------------------------------------------------------------------
# Shared point / box transforms (flip, rotate, scale, translate)
# ---------------------------------------------------------------------------

def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)


def transform_points(xyz: np.ndarray, op: str, *params) -> np.ndarray:
    """Apply a named transform to an (N, 3) array of points; returns a copy.

    Supported ops: "flip_x" (mirror across the x axis: y -> -y), "flip_y"
    (x -> -x), "rotate" (theta about +z), "scale" (s), "translate" (t, a
    3-vector).
    """
    pts = np.array(xyz, dtype=np.float64, copy=True)
    if op == "flip_x":
        pts[:, 1] = -pts[:, 1]
    elif op == "flip_y":
        pts[:, 0] = -pts[:, 0]
    elif op == "rotate":
        (theta,) = params
        pts = pts @ rotation_z(theta).T
    elif op == "scale":
        (s,) = params
        pts *= float(s)
    elif op == "translate":
        (t,) = params
        pts += np.asarray(t, dtype=np.float64).reshape(3)
    else:
        raise ValueError(f"unknown transform op {op!r}")
    return pts


def transform_box(box: Box3D, op: str, *params) -> Box3D:
    """Apply a named transform to a box; yaw is re-wrapped into (-pi, pi]."""
    center = box.center.copy()
    dims = box.dims.copy()
    yaw = box.yaw
    vel = None if box.velocity is None else box.velocity.copy()
    if op == "flip_x":
        center[1] = -center[1]
        yaw = -yaw
        if vel is not None:
            vel[1] = -vel[1]
    elif op == "flip_y":
        center[0] = -center[0]
        yaw = math.pi - yaw
        if vel is not None:
            vel[0] = -vel[0]
    elif op == "rotate":
        (theta,) = params
        center = rotation_z(theta) @ center
        yaw = yaw + theta
        if vel is not None:
            c, s = math.cos(theta), math.sin(theta)
            vel = np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
    elif op == "scale":
        (s,) = params
        center = center * float(s)
        dims = dims * float(s)
        if vel is not None:
            vel = vel * float(s)
    elif op == "translate":
        (t,) = params
        center = center + np.asarray(t, dtype=np.float64).reshape(3)
    else:
        raise ValueError(f"unknown transform op {op!r}")
    return Box3D(center=center, dims=dims, yaw=wrap_angle(yaw), velocity=vel)


def transform_boxes(boxes: list[Box3D], op: str, *params) -> list[Box3D]:
    return [transform_box(b, op, *params) for b in boxes]


def points_in_box(xyz: np.ndarray, box: Box3D, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside a box (closed bounds, optional slack)."""
    rel = np.asarray(xyz, dtype=np.float64) - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # rotate into the box frame (inverse yaw)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    half = box.dims / 2.0 + tol
    return (
        (np.abs(local_x) <= half[0])
        & (np.abs(local_y) <= half[1])
        & (np.abs(rel[:, 2]) <= half[2])
    )
