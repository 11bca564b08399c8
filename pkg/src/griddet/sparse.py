"""Sparse COO tensors and the convolution kernels used by the backbone,
neck, and head.

Stride-1 sparse layers are submanifold (the active set is preserved exactly);
stride-2 layers are regular sparse convolutions whose output site is active
iff its receptive window covers at least one active input. Dense layers are
plain zero-padded cross-correlations. All kernels accumulate in float64 and
store float32, and iterate kernel offsets in a fixed order so results are
bitwise reproducible regardless of how work could be partitioned.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Channel or spatial shape mismatch between tensors and weights."""


@dataclass
class LinearWeights:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(f"bad linear weights {self.weight.shape}/{self.bias.shape}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class AffineWeights:
    """Folded per-channel affine (inference-mode normalization stand-in)."""

    scale: np.ndarray  # (C,)
    shift: np.ndarray  # (C,)

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32).reshape(-1)
        self.shift = np.asarray(self.shift, dtype=np.float32).reshape(-1)
        if self.scale.shape != self.shift.shape:
            raise ShapeError("affine scale/shift length mismatch")

    @staticmethod
    def identity(channels: int) -> "AffineWeights":
        return AffineWeights(np.ones(channels, np.float32), np.zeros(channels, np.float32))


@dataclass
class ConvWeights:
    """Convolution kernel (Cout, Cin, k, ..., k) with bias, stride, dilation.

    Kernels are odd and square/cubic; stride is 1 or 2. Padding is implicit
    "same"-style: (k - 1) / 2 * dilation per axis.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.kernel.ndim < 3:
            raise ShapeError(f"kernel must be (Cout, Cin, k, ...), got {self.kernel.shape}")
        k = self.kernel.shape[2]
        if any(s != k for s in self.kernel.shape[2:]):
            raise ShapeError("kernel must be square/cubic")
        if k % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {k}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ShapeError("dilation must be >= 1")
        if self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError("bias length must match Cout")

    @property
    def rank(self) -> int:
        return self.kernel.ndim - 2

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def padding(self) -> int:
        return (self.ksize - 1) // 2 * self.dilation


@dataclass
class SparseTensor:
    """Unique-coordinate COO feature map with a spatial stride.

    coords are (M, rank) int64, unique and lexicographically sorted (which
    equals ascending C-order flat ids); features are (M, C) float32; stride
    is the downsampling factor relative to the original input grid.
    """

    coords: np.ndarray
    features: np.ndarray
    spatial_dims: tuple[int, ...]
    stride: int = 1

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.spatial_dims = tuple(int(d) for d in self.spatial_dims)
        if self.coords.ndim != 2 or self.coords.shape[1] != len(self.spatial_dims):
            raise ShapeError(
                f"coords {self.coords.shape} do not match dims {self.spatial_dims}")
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ShapeError("feature rows must match coordinate count")

    @property
    def rank(self) -> int:
        return len(self.spatial_dims)

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def flat_ids(self) -> np.ndarray:
        if self.num_active == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(self.coords.T), self.spatial_dims)

    def validate(self) -> None:
        if self.num_active:
            if np.any(self.coords < 0) or np.any(self.coords >= np.array(self.spatial_dims)):
                raise ShapeError("coordinates out of bounds")
            flat = self.flat_ids()
            if np.any(np.diff(flat) <= 0):
                raise ShapeError("coordinates must be unique and sorted")
        if not np.all(np.isfinite(self.features)):
            raise ShapeError("non-finite features")

    @staticmethod
    def empty(spatial_dims: tuple[int, ...], channels: int, stride: int = 1) -> "SparseTensor":
        rank = len(spatial_dims)
        return SparseTensor(np.zeros((0, rank), np.int64),
                            np.zeros((0, channels), np.float32),
                            spatial_dims, stride)

    @staticmethod
    def from_dense(dense: np.ndarray, coords: np.ndarray, stride: int = 1) -> "SparseTensor":
        """Sample a dense (C, *dims) array at an explicit active-site list."""
        dense = np.asarray(dense)
        dims = dense.shape[1:]
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(dims))
        order = np.lexsort(tuple(coords[:, a] for a in reversed(range(coords.shape[1]))))
        coords = coords[order]
        feats = dense[(slice(None),) + tuple(coords.T)].T
        return SparseTensor(coords, feats.astype(np.float32), dims, stride)


def to_dense(st: SparseTensor) -> np.ndarray:
    """Densify to (C, *spatial_dims): zeros everywhere except active sites."""
    out = np.zeros((st.channels,) + st.spatial_dims, dtype=np.float32)
    if st.num_active:
        out[(slice(None),) + tuple(st.coords.T)] = st.features.T
    return out


def sparse_relu(st: SparseTensor) -> SparseTensor:
    return SparseTensor(st.coords, np.maximum(st.features, 0.0),
                        st.spatial_dims, st.stride)


def sparse_add(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Feature-wise add of two tensors with identical active sets (the only
    case the backbone needs: submanifold layers preserve the active set)."""
    if a.spatial_dims != b.spatial_dims or a.num_active != b.num_active:
        raise ShapeError("sparse_add expects identical active sets")
    if a.num_active and not np.array_equal(a.coords, b.coords):
        raise ShapeError("sparse_add expects identical active sets")
    return SparseTensor(a.coords, a.features + b.features, a.spatial_dims, a.stride)


def mlp_forward(features: np.ndarray, layers: list[LinearWeights]) -> np.ndarray:
    """Shared per-point MLP: (linear, ReLU) per layer, float64 accumulation."""
    x = np.asarray(features, dtype=np.float64)
    for layer in layers:
        if x.shape[1] != layer.in_channels:
            raise ShapeError(
                f"MLP expects {layer.in_channels} input channels, got {x.shape[1]}")
        x = x @ layer.weight.astype(np.float64).T + layer.bias.astype(np.float64)
        x = np.maximum(x, 0.0)
    return x


# ---------------------------------------------------------------------------
# Kernel maps
# ---------------------------------------------------------------------------

def _kernel_offsets(ksize: int, rank: int, dilation: int) -> np.ndarray:
    """Centered, dilated kernel offsets, (k^rank, rank), fixed C order."""
    half = (ksize - 1) // 2
    taps = [np.array(t) for t in itertools.product(range(ksize), repeat=rank)]
    return np.array([(t - half) * dilation for t in taps], dtype=np.int64)


def _match_sites(cand: np.ndarray, site_flat: np.ndarray,
                 dims: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of `cand` (N, rank) that are active sites, and their row index in
    the sorted flat-id list `site_flat`."""
    ok = np.ones(cand.shape[0], dtype=bool)
    for a, d in enumerate(dims):
        ok &= (cand[:, a] >= 0) & (cand[:, a] < d)
    rows = np.nonzero(ok)[0]
    if rows.size == 0:
        return rows, rows
    flat = np.ravel_multi_index(tuple(cand[rows].T), dims)
    pos = np.searchsorted(site_flat, flat)
    pos = np.minimum(pos, max(len(site_flat) - 1, 0))
    hit = site_flat[pos] == flat if len(site_flat) else np.zeros(len(rows), bool)
    return rows[hit], pos[hit]


def subm_kernel_map(st: SparseTensor, w: ConvWeights) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per kernel offset: (output rows, matching input rows). Output sites are
    the input sites. Within one offset each output taps at most one input, so
    the per-offset scatter is collision-free."""
    offsets = _kernel_offsets(w.ksize, st.rank, w.dilation)
    in_flat = st.flat_ids()
    pairs = []
    for off in offsets:
        cand = st.coords + off
        out_rows, in_rows = _match_sites(cand, in_flat, st.spatial_dims)
        pairs.append((out_rows, in_rows))
    return pairs


def strided_out_sites(st: SparseTensor, w: ConvWeights) -> tuple[np.ndarray, tuple[int, ...]]:
    """Active output coordinates (sorted unique) for a strided sparse conv:
    every output site whose receptive window covers >= 1 active input."""
    s, p, d, k = w.stride, w.padding, w.dilation, w.ksize
    out_dims = tuple((n + 2 * p - d * (k - 1) - 1) // s + 1 for n in st.spatial_dims)
    if st.num_active == 0:
        return np.zeros((0, st.rank), np.int64), out_dims
    offsets = _kernel_offsets(k, st.rank, d)
    all_flat = []
    for off in offsets:
        # input site i is seen by output o at this offset iff i = o*s + off
        num = st.coords - off
        ok = np.all(num % s == 0, axis=1)
        out = num[ok] // s
        for a, dim in enumerate(out_dims):
            out = out[(out[:, a] >= 0) & (out[:, a] < dim)]
        if len(out):
            all_flat.append(np.ravel_multi_index(tuple(out.T), out_dims))
    if not all_flat:
        return np.zeros((0, st.rank), np.int64), out_dims
    flat = np.unique(np.concatenate(all_flat))
    coords = np.stack(np.unravel_index(flat, out_dims), axis=1).astype(np.int64)
    return coords, out_dims


def strided_kernel_map(st: SparseTensor, w: ConvWeights,
                       out_coords: np.ndarray,
                       out_dims: tuple[int, ...]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per offset: (output rows, input rows) where input = out*s + offset."""
    offsets = _kernel_offsets(w.ksize, st.rank, w.dilation)
    in_flat = st.flat_ids()
    pairs = []
    for off in offsets:
        cand = out_coords * w.stride + off
        out_rows, in_rows = _match_sites(cand, in_flat, st.spatial_dims)
        pairs.append((out_rows, in_rows))
    return pairs


def apply_kernel_map(features: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                      pairs: list[tuple[np.ndarray, np.ndarray]],
                      n_out: int) -> np.ndarray:
    """Gather-GEMM-scatter per offset, float64 accumulation, fixed order."""
    cout = kernel.shape[0]
    feats64 = features.astype(np.float64)
    k64 = kernel.astype(np.float64).reshape(cout, kernel.shape[1], -1)
    out = np.zeros((n_out, cout), dtype=np.float64)
    for tap, (out_rows, in_rows) in enumerate(pairs):
        if len(out_rows) == 0:
            continue
        out[out_rows] += feats64[in_rows] @ k64[:, :, tap].T
    out += bias.astype(np.float64)
    return out.astype(np.float32)


def kernel_map_pairs(pairs: list[tuple[np.ndarray, np.ndarray]]) -> int:
    """Number of (input-tap, output-site) pairs actually accumulated."""
    return int(sum(len(r) for r, _ in pairs))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def submanifold_conv(st: SparseTensor, w: ConvWeights) -> SparseTensor:
    """Stride-1 sparse conv computing outputs only at already-active sites."""
    if w.stride != 1:
        raise ShapeError("submanifold convolution requires stride 1")
    if w.in_channels != st.channels:
        raise ShapeError(f"conv expects {w.in_channels} channels, got {st.channels}")
    pairs = subm_kernel_map(st, w)
    feats = apply_kernel_map(st.features, w.kernel, w.bias, pairs, st.num_active)
    return SparseTensor(st.coords.copy(), feats, st.spatial_dims, st.stride)


def sparse_conv_strided(st: SparseTensor, w: ConvWeights) -> SparseTensor:
    """Stride-2 sparse conv; the active set dilates to every covered window."""
    if w.stride != 2:
        raise ShapeError("strided sparse convolution requires stride 2")
    if w.in_channels != st.channels:
        raise ShapeError(f"conv expects {w.in_channels} channels, got {st.channels}")
    out_coords, out_dims = strided_out_sites(st, w)
    if len(out_coords) == 0:
        return SparseTensor.empty(out_dims, w.out_channels, st.stride * 2)
    pairs = strided_kernel_map(st, w, out_coords, out_dims)
    feats = apply_kernel_map(st.features, w.kernel, w.bias, pairs, len(out_coords))
    return SparseTensor(out_coords, feats, out_dims, st.stride * 2)


def dense_conv(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Zero-padded cross-correlation on a dense (C, H, W[, D]) array."""
    x = np.asarray(x)
    rank = x.ndim - 1
    if rank != w.rank:
        raise ShapeError(f"input rank {rank} does not match kernel rank {w.rank}")
    if x.shape[0] != w.in_channels:
        raise ShapeError(f"conv expects {w.in_channels} channels, got {x.shape[0]}")
    s, p, d, k = w.stride, w.padding, w.dilation, w.ksize
    out_dims = tuple((n + 2 * p - d * (k - 1) - 1) // s + 1 for n in x.shape[1:])
    pad = [(0, 0)] + [(p, p)] * rank
    xp = np.pad(x.astype(np.float64), pad)
    k64 = w.kernel.astype(np.float64)
    out = np.zeros((w.out_channels,) + out_dims, dtype=np.float64)
    for tap in itertools.product(range(k), repeat=rank):
        sl = tuple(slice(t * d, t * d + s * (o - 1) + 1, s)
                   for t, o in zip(tap, out_dims))
        patch = xp[(slice(None),) + sl]
        out += np.tensordot(k64[(slice(None), slice(None)) + tap], patch, axes=(1, 0))
    out += w.bias.astype(np.float64).reshape((-1,) + (1,) * rank)
    return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)


def collapse_height(st: SparseTensor) -> SparseTensor:
    """Project a rank-3 tensor to BEV by concatenating z slices channel-wise.

    Output channels are C * Dz; the feature block [z*C:(z+1)*C] of a BEV site
    holds the voxel feature at height bin z (zeros where inactive), so
    to_dense(collapse(x)) equals moveaxis(to_dense(x), 3, 0) reshaped.
    """
    if st.rank != 3:
        raise ShapeError("collapse_height expects a rank-3 tensor")
    nz = st.spatial_dims[2]
    bev_dims = st.spatial_dims[:2]
    c = st.channels
    if st.num_active == 0:
        return SparseTensor.empty(bev_dims, c * nz, st.stride)
    bev_flat = np.ravel_multi_index((st.coords[:, 0], st.coords[:, 1]), bev_dims)
    occupied, inv = np.unique(bev_flat, return_inverse=True)
    feats = np.zeros((len(occupied), c * nz), dtype=np.float32)
    z = st.coords[:, 2]
    cols = (z[:, None] * c + np.arange(c)[None, :]).ravel()
    rows = np.repeat(inv, c)
    feats[rows, cols] = st.features.ravel()
    coords = np.stack(np.unravel_index(occupied, bev_dims), axis=1).astype(np.int64)
    return SparseTensor(coords, feats, bev_dims, st.stride)


def transposed_conv2x(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Stride-2 transposed convolution that exactly doubles spatial dims.

    Equivalent to ConvTranspose with stride 2, padding (k-1)//2 * dilation,
    output_padding 1. Kernel layout matches ConvWeights: (Cout, Cin, k, k).
    """
    x = np.asarray(x)
    rank = x.ndim - 1
    if rank != w.rank:
        raise ShapeError("input rank does not match kernel rank")
    if x.shape[0] != w.in_channels:
        raise ShapeError(f"tconv expects {w.in_channels} channels, got {x.shape[0]}")
    s, p, d, k = 2, w.padding, w.dilation, w.ksize
    in_dims = x.shape[1:]
    out_dims = tuple(2 * n for n in in_dims)
    x64 = x.astype(np.float64)
    k64 = w.kernel.astype(np.float64)
    out = np.zeros((w.out_channels,) + out_dims, dtype=np.float64)
    in_grids = np.meshgrid(*[np.arange(n) for n in in_dims], indexing="ij")
    for tap in itertools.product(range(k), repeat=rank):
        target = [g * s - p + t * d for g, t in zip(in_grids, tap)]
        ok = np.ones(in_dims, dtype=bool)
        for tgt, n in zip(target, out_dims):
            ok &= (tgt >= 0) & (tgt < n)
        if not ok.any():
            continue
        contrib = np.tensordot(k64[(slice(None), slice(None)) + tap],
                               x64[:, ok], axes=(1, 0))
        idx = tuple(tgt[ok] for tgt in target)
        out[(slice(None),) + idx] += contrib
    out += w.bias.astype(np.float64).reshape((-1,) + (1,) * rank)
    return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)
