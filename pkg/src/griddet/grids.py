"""Local point aggregators: pillar, voxel, and multi-view (cartesian +
cylindrical) encoders producing sparse BEV / 3D feature maps.

All three share the same skeleton: assign points to grid cells, decorate each
point with offsets to its cell's centroid and geometric center, run a shared
per-point MLP (linear + ReLU stack, no normalization), and max-pool per cell.
Max pooling makes every encoder invariant to input point order, and no cap is
placed on points per cell.

Grid conventions: per-axis binning is half-open, index = floor((c - min) /
cell), so a point on the max boundary falls outside. The cylindrical view
bins (atan2(y, x), z); when the yaw axis spans the full circle the yaw
coordinate is wrapped into [yaw_min, yaw_min + 2*pi) before binning so the
+pi seam stays covered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lidar_io import PointCloud, ValidationError
from .sparse import LinearWeights, SparseTensor, mlp_forward

OUTSIDE = -1

VIEWS = ("cartesian2d", "cartesian3d", "cylindrical")


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned binning grid for one view.

    Axes by view: cartesian2d -> (x, y, z) with only x/y gridded (z bounds
    crop); cartesian3d -> (x, y, z), all gridded; cylindrical -> (yaw, z),
    both gridded. `cells` covers the gridded axes only.
    """

    view: str
    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    cells: tuple[float, ...]

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValidationError(f"unknown grid view {self.view!r}")
        object.__setattr__(self, "mins", tuple(float(v) for v in self.mins))
        object.__setattr__(self, "maxs", tuple(float(v) for v in self.maxs))
        object.__setattr__(self, "cells", tuple(float(v) for v in self.cells))
        n_axes = 2 if self.view == "cylindrical" else 3
        n_grid = 3 if self.view == "cartesian3d" else 2
        if len(self.mins) != n_axes or len(self.maxs) != n_axes:
            raise ValidationError(f"{self.view} spec needs {n_axes} axis bounds")
        if len(self.cells) != n_grid:
            raise ValidationError(f"{self.view} spec needs {n_grid} cell sizes")
        for lo, hi in zip(self.mins, self.maxs):
            if not hi > lo:
                raise ValidationError(f"axis bounds must satisfy max > min ({lo}, {hi})")
        for c in self.cells:
            if not c > 0:
                raise ValidationError("cell sizes must be positive")

    @property
    def ndim(self) -> int:
        """Number of gridded axes (2 for pillar/cylindrical, 3 for voxel)."""
        return len(self.cells)

    @property
    def dims(self) -> tuple[int, ...]:
        """Cell count per gridded axis: ceil((max - min) / cell)."""
        return tuple(
            int(math.ceil((self.maxs[i] - self.mins[i]) / self.cells[i] - 1e-9))
            for i in range(self.ndim)
        )

    @property
    def num_cells(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def _yaw_spans_circle(self) -> bool:
        return (self.view == "cylindrical"
                and abs((self.maxs[0] - self.mins[0]) - 2.0 * math.pi) < 1e-9)

    def view_coords(self, xyz: np.ndarray) -> np.ndarray:
        """Map (N, 3) ego points to this view's axis coordinates.

        cartesian: (x, y, z). cylindrical: (yaw, z) with yaw wrapped into
        [yaw_min, yaw_min + 2*pi) when the axis covers the full circle.
        """
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if self.view == "cylindrical":
            yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
            if self._yaw_spans_circle():
                lo = self.mins[0]
                yaw = np.mod(yaw - lo, 2.0 * math.pi) + lo
            return np.stack([yaw, xyz[:, 2]], axis=1)
        return xyz

    def cell_centers(self, indices: np.ndarray) -> np.ndarray:
        """Geometric centers of cells given (M, ndim) per-axis indices."""
        idx = np.asarray(indices, dtype=np.float64)
        mins = np.array(self.mins[: self.ndim])
        cells = np.array(self.cells)
        return mins + (idx + 0.5) * cells

    def to_json(self) -> dict:
        return {"view": self.view, "mins": list(self.mins),
                "maxs": list(self.maxs), "cells": list(self.cells)}

    @staticmethod
    def from_json(obj: dict) -> "GridSpec":
        return GridSpec(view=obj["view"], mins=tuple(obj["mins"]),
                        maxs=tuple(obj["maxs"]), cells=tuple(obj["cells"]))


def wod_pillar_grid(cell: float = 0.075) -> GridSpec:
    """Default pillar grid: [-76.8, 76.8) m horizontally, [-2, 4) m vertically."""
    return GridSpec("cartesian2d", mins=(-76.8, -76.8, -2.0),
                    maxs=(76.8, 76.8, 4.0), cells=(cell, cell))


def wod_voxel_grid(cell_xy: float = 0.075, cell_z: float = 0.15) -> GridSpec:
    return GridSpec("cartesian3d", mins=(-76.8, -76.8, -2.0),
                    maxs=(76.8, 76.8, 4.0), cells=(cell_xy, cell_xy, cell_z))


def wod_cylinder_grid(yaw_cell_deg: float = 1.8, cell_z: float = 0.2) -> GridSpec:
    return GridSpec("cylindrical", mins=(-math.pi, -2.0), maxs=(math.pi, 4.0),
                    cells=(math.radians(yaw_cell_deg), cell_z))


@dataclass(frozen=True)
class EncoderConfig:
    """Grid-encoder settings: kind, shared MLP widths, decoration toggles."""

    kind: str                       # "pillar" | "voxel" | "mvf"
    mlp_channels: tuple[int, ...] = (32,)
    centroid_offsets: bool = True   # offsets to the cell's point centroid
    center_offsets: bool = True     # offsets to the cell's geometric center

    def __post_init__(self):
        if self.kind not in ("pillar", "voxel", "mvf"):
            raise ValidationError(f"unknown encoder kind {self.kind!r}")
        object.__setattr__(self, "mlp_channels", tuple(int(c) for c in self.mlp_channels))
        if not self.mlp_channels or any(c <= 0 for c in self.mlp_channels):
            raise ValidationError("mlp_channels must be nonempty and positive")

    def feature_dim(self, spec: GridSpec) -> int:
        """Decorated per-point feature width for one view."""
        dim = 5  # x, y, z, intensity, dt
        if self.centroid_offsets:
            dim += 3
        if self.center_offsets:
            dim += spec.ndim
        return dim

    def to_json(self) -> dict:
        return {"kind": self.kind, "mlp_channels": list(self.mlp_channels),
                "centroid_offsets": self.centroid_offsets,
                "center_offsets": self.center_offsets}

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        return EncoderConfig(kind=obj["kind"],
                             mlp_channels=tuple(obj["mlp_channels"]),
                             centroid_offsets=obj.get("centroid_offsets", True),
                             center_offsets=obj.get("center_offsets", True))


# ---------------------------------------------------------------------------
# Cell assignment, decoration, scatter-max
# ---------------------------------------------------------------------------

def grid_coords(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Raw per-axis floor indices, (N, ndim) int64; may fall out of range."""
    coords = spec.view_coords(cloud.xyz.astype(np.float64))
    idx = np.empty((len(cloud), spec.ndim), dtype=np.int64)
    for axis in range(spec.ndim):
        idx[:, axis] = np.floor(
            (coords[:, axis] - spec.mins[axis]) / spec.cells[axis]).astype(np.int64)
    return idx


def assign_cells(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Flat cell id per point (C-order over spec.dims), OUTSIDE when any axis
    is out of range. For cartesian2d specs the z bounds also gate points."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    idx = grid_coords(cloud, spec)
    dims = spec.dims
    inside = np.ones(len(cloud), dtype=bool)
    for axis in range(spec.ndim):
        inside &= (idx[:, axis] >= 0) & (idx[:, axis] < dims[axis])
    coords = spec.view_coords(cloud.xyz.astype(np.float64))
    for axis in range(spec.ndim, coords.shape[1]):  # crop-only axes (pillar z)
        inside &= (coords[:, axis] >= spec.mins[axis]) & (coords[:, axis] < spec.maxs[axis])
    flat = np.full(len(cloud), OUTSIDE, dtype=np.int64)
    if inside.any():
        flat[inside] = np.ravel_multi_index(
            tuple(idx[inside, a] for a in range(spec.ndim)), dims)
    return flat


def decorate_points(cloud: PointCloud, cell_ids: np.ndarray,
                    spec: GridSpec, config: EncoderConfig) -> np.ndarray:
    """Per-point features: [x, y, z, intensity, dt, xyz - cell centroid,
    view coords - cell geometric center]. 10 dims for pillar / cylindrical,
    11 for voxel. Offsets for OUTSIDE points are zero; such points never
    survive the scatter anyway."""
    n = len(cloud)
    feats = np.zeros((n, config.feature_dim(spec)), dtype=np.float64)
    if n == 0:
        return feats
    feats[:, 0:5] = cloud.data.astype(np.float64)
    col = 5
    inside = cell_ids != OUTSIDE
    if config.centroid_offsets:
        if inside.any():
            ids = cell_ids[inside]
            uniq, inv = np.unique(ids, return_inverse=True)
            sums = np.zeros((len(uniq), 3), dtype=np.float64)
            np.add.at(sums, inv, cloud.xyz[inside].astype(np.float64))
            counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
            centroids = sums / counts[:, None]
            feats[inside, col:col + 3] = cloud.xyz[inside] - centroids[inv]
        col += 3
    if config.center_offsets:
        if inside.any():
            axis_idx = np.stack(
                np.unravel_index(cell_ids[inside], spec.dims), axis=1)
            centers = spec.cell_centers(axis_idx)
            coords = spec.view_coords(cloud.xyz.astype(np.float64))[inside, : spec.ndim]
            feats[inside, col:col + spec.ndim] = coords - centers
        col += spec.ndim
    return feats


def scatter_max(point_features: np.ndarray, cell_ids: np.ndarray,
                num_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise max over the points of each occupied cell.

    Returns (features (M, C), occupied flat ids (M,) sorted ascending).
    Cells with no points are absent. Exact and order-invariant.
    """
    point_features = np.asarray(point_features)
    valid = (cell_ids >= 0) & (cell_ids < num_cells)
    ids = cell_ids[valid]
    feats = point_features[valid]
    if ids.size == 0:
        return (np.zeros((0, point_features.shape[1]), dtype=point_features.dtype),
                np.zeros(0, dtype=np.int64))
    occupied, inv = np.unique(ids, return_inverse=True)
    pooled = np.full((len(occupied), feats.shape[1]), -np.inf, dtype=feats.dtype)
    np.maximum.at(pooled, inv, feats)
    return pooled, occupied


def _gather_pooled(pooled: np.ndarray, occupied: np.ndarray,
                   cell_ids: np.ndarray, channels: int) -> np.ndarray:
    """Give each point its cell's pooled feature (zeros for OUTSIDE points)."""
    out = np.zeros((cell_ids.shape[0], channels), dtype=pooled.dtype)
    inside = cell_ids >= 0
    if inside.any():
        pos = np.searchsorted(occupied, cell_ids[inside])
        out[inside] = pooled[pos]
    return out


def _sparse_from_scatter(pooled: np.ndarray, occupied: np.ndarray,
                         spec: GridSpec) -> SparseTensor:
    coords = np.stack(np.unravel_index(occupied, spec.dims), axis=1).astype(np.int64)
    return SparseTensor(coords=coords, features=pooled.astype(np.float32),
                        spatial_dims=spec.dims, stride=1)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass
class MvfWeights:
    """Weights for the multi-view encoder: one MLP per view plus the fusion
    layer applied to [decorated | pillar-view emb | cylinder-view emb]."""

    pillar_mlp: list[LinearWeights]
    cylinder_mlp: list[LinearWeights]
    fusion: LinearWeights


def pillar_encode(cloud: PointCloud, spec: GridSpec, config: EncoderConfig,
                  weights: list[LinearWeights]) -> SparseTensor:
    """Decorate, shared MLP, max-pool onto the BEV pillar grid (stride 1)."""
    if spec.view != "cartesian2d":
        raise ValidationError("pillar_encode needs a cartesian2d spec")
    ids = assign_cells(cloud, spec)
    feats = decorate_points(cloud, ids, spec, config)
    feats = mlp_forward(feats, weights)
    pooled, occupied = scatter_max(feats, ids, spec.num_cells)
    return _sparse_from_scatter(pooled, occupied, spec)


def voxel_encode(cloud: PointCloud, spec: GridSpec, config: EncoderConfig,
                 weights: list[LinearWeights]) -> SparseTensor:
    """As pillar_encode with 3D cells and 11-dim decoration."""
    if spec.view != "cartesian3d":
        raise ValidationError("voxel_encode needs a cartesian3d spec")
    ids = assign_cells(cloud, spec)
    feats = decorate_points(cloud, ids, spec, config)
    feats = mlp_forward(feats, weights)
    pooled, occupied = scatter_max(feats, ids, spec.num_cells)
    return _sparse_from_scatter(pooled, occupied, spec)


def mvf_encode(cloud: PointCloud, pillar_spec: GridSpec, cyl_spec: GridSpec,
               config: EncoderConfig, weights: MvfWeights) -> SparseTensor:
    """Multi-view fusion: per-view point embeddings (MLP + pool + gather
    back), concatenated with the decorated cartesian features, fused by one
    linear + ReLU, then max-pooled onto the cartesian pillar grid.

    A point outside one view contributes nothing there and gathers a zero
    embedding from it. The output active set equals pillar_encode's on the
    same cloud by construction.
    """
    if pillar_spec.view != "cartesian2d" or cyl_spec.view != "cylindrical":
        raise ValidationError("mvf_encode needs cartesian2d + cylindrical specs")
    pillar_ids = assign_cells(cloud, pillar_spec)
    cyl_ids = assign_cells(cloud, cyl_spec)

    pillar_feats = decorate_points(cloud, pillar_ids, pillar_spec, config)
    cyl_feats = decorate_points(cloud, cyl_ids, cyl_spec, config)

    emb_p = mlp_forward(pillar_feats, weights.pillar_mlp)
    pooled_p, occ_p = scatter_max(emb_p, pillar_ids, pillar_spec.num_cells)
    gathered_p = _gather_pooled(pooled_p, occ_p, pillar_ids, emb_p.shape[1])

    emb_c = mlp_forward(cyl_feats, weights.cylinder_mlp)
    pooled_c, occ_c = scatter_max(emb_c, cyl_ids, cyl_spec.num_cells)
    gathered_c = _gather_pooled(pooled_c, occ_c, cyl_ids, emb_c.shape[1])

    fused_in = np.concatenate([pillar_feats, gathered_p, gathered_c], axis=1)
    fused = mlp_forward(fused_in, [weights.fusion])
    pooled, occupied = scatter_max(fused, pillar_ids, pillar_spec.num_cells)
    return _sparse_from_scatter(pooled, occupied, pillar_spec)
