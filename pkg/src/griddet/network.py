"""Model builder and forward pass: sparse ResNet-18 backbone (2D or 3D),
single- and multi-scale neck variants, and the multi-group center head.

A model is a declarative config realized into an ordered dict of named
layers. The backbone runs sparse convolutions (submanifold at stride 1,
regular at stride 2, so each stage is a strided transition conv followed by
two purely-submanifold basic blocks whose skip connections align exactly).
Stage-4 output (height-collapsed first for 3D backbones) is densified before
the neck; neck and head are dense. Weights come from a counter-based Philox
generator, so identical (config, seed) builds are bitwise identical.
"""

from __future__ import annotations

import itertools
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sparse as sp
from .grids import EncoderConfig, GridSpec, MvfWeights, mvf_encode, pillar_encode, voxel_encode
from .lidar_io import PointCloud
from .sparse import AffineWeights, ConvWeights, LinearWeights, SparseTensor

NECK_KINDS = ("plain", "dilated", "aspp", "fpn", "bifpn", "pillarnet")
DILATED_RATES = (2, 4, 6, 8)
ASPP_RATES = (1, 6, 12, 18)
TARGET_CHANNELS = {"offset": 2, "z": 1, "dims": 3, "yaw": 2, "iou": 1, "velocity": 2}
DEFAULT_TARGETS = ("offset", "z", "dims", "yaw")
HEATMAP_PRIOR = 0.01  # focal init: bias = -ln((1 - p) / p)

# output resolution relative to stage 4 for each neck kind
NECK_SCALE = {"plain": 1, "dilated": 1, "aspp": 1, "fpn": 4, "bifpn": 4, "pillarnet": 2}

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Invalid, inconsistent, or unknown configuration."""


class BuildError(ConfigError):
    """Model construction failed; message names the offending layer."""


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadGroup:
    classes: tuple[str, ...]
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.classes:
            raise ConfigError("head group needs at least one class")
        for t in self.targets:
            if t not in TARGET_CHANNELS:
                raise ConfigError(f"unknown regression target {t!r}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    grid: GridSpec
    backbone_channels: tuple[int, int, int, int]
    cyl_grid: GridSpec | None = None
    backbone_strides: tuple[int, int, int, int] = (1, 2, 2, 2)
    neck: str = "aspp"
    neck_channels: int = 0          # 0 -> max(c4 // 2, 16)
    head_upsample: int = 2
    head_channels: int = 0          # 0 -> neck channels
    groups: tuple[HeadGroup, ...] = (HeadGroup(("vehicle",)),
                                     HeadGroup(("pedestrian", "cyclist")))
    iou_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels",
                           tuple(int(c) for c in self.backbone_channels))
        object.__setattr__(self, "backbone_strides",
                           tuple(int(s) for s in self.backbone_strides))
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(self.backbone_channels) != 4 or any(c <= 0 for c in self.backbone_channels):
            raise ConfigError("backbone_channels must be 4 positive counts")
        if len(self.backbone_strides) != 4 or any(s not in (1, 2) for s in self.backbone_strides):
            raise ConfigError("backbone_strides must be 4 factors from {1, 2}")
        if self.neck not in NECK_KINDS:
            raise ConfigError(f"unknown neck kind {self.neck!r}")
        if self.head_upsample not in (1, 2):
            raise ConfigError("head_upsample must be 1 or 2")
        if self.encoder.kind == "mvf" and self.cyl_grid is None:
            raise ConfigError("mvf encoder requires cyl_grid")
        if self.encoder.kind == "voxel" and self.grid.view != "cartesian3d":
            raise ConfigError("voxel encoder requires a cartesian3d grid")
        if self.encoder.kind in ("pillar", "mvf") and self.grid.view != "cartesian2d":
            raise ConfigError(f"{self.encoder.kind} encoder requires a cartesian2d grid")

    @property
    def resolved_neck_channels(self) -> int:
        return self.neck_channels or max(self.backbone_channels[3] // 2, 16)

    @property
    def resolved_head_channels(self) -> int:
        return self.head_channels or self.resolved_neck_channels

    @property
    def backbone_downsample(self) -> int:
        d = 1
        for s in self.backbone_strides:
            d *= s
        return d

    def output_cell_size(self) -> float:
        """Cell size (m) of the head output grid: input cell x backbone
        downsample / neck upsampling / head upsample."""
        return (self.grid.cells[0] * self.backbone_downsample
                / NECK_SCALE[self.neck] / self.head_upsample)

    def to_json(self) -> dict:
        obj = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "encoder": self.encoder.to_json(),
            "grid": self.grid.to_json(),
            "backbone": {"channels": list(self.backbone_channels),
                         "strides": list(self.backbone_strides)},
            "neck": {"kind": self.neck, "channels": self.neck_channels},
            "head": {"upsample": self.head_upsample,
                     "channels": self.head_channels,
                     "groups": [{"classes": list(g.classes),
                                 "targets": list(g.targets)} for g in self.groups],
                     "iou_branch": self.iou_branch},
        }
        if self.cyl_grid is not None:
            obj["cyl_grid"] = self.cyl_grid.to_json()
        return obj

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj.pop("schema_version", None)
        known = {"seed", "encoder", "grid", "cyl_grid", "backbone", "neck", "head"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        backbone = _strict(obj.get("backbone", {}), {"channels", "strides"}, "backbone")
        neck = _strict(obj.get("neck", {}), {"kind", "channels"}, "neck")
        head = _strict(obj.get("head", {}), {"upsample", "channels", "groups", "iou_branch"},
                       "head")
        groups = tuple(
            HeadGroup(tuple(g["classes"]),
                      tuple(_strict(g, {"classes", "targets"}, "head group")
                            .get("targets", DEFAULT_TARGETS)))
            for g in head.get("groups", [{"classes": ["vehicle"]},
                                         {"classes": ["pedestrian", "cyclist"]}])
        )
        return ModelConfig(
            encoder=EncoderConfig.from_json(obj["encoder"]),
            grid=GridSpec.from_json(obj["grid"]),
            cyl_grid=GridSpec.from_json(obj["cyl_grid"]) if "cyl_grid" in obj else None,
            backbone_channels=tuple(backbone.get("channels", (32, 64, 128, 128))),
            backbone_strides=tuple(backbone.get("strides", (1, 2, 2, 2))),
            neck=neck.get("kind", "aspp"),
            neck_channels=int(neck.get("channels", 0)),
            head_upsample=int(head.get("upsample", 2)),
            head_channels=int(head.get("channels", 0)),
            groups=groups,
            iou_branch=bool(head.get("iou_branch", True)),
            seed=int(obj.get("seed", 0)),
        )


def _strict(obj: dict, known: set[str], where: str) -> dict:
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {sorted(unknown)}")
    return obj


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    name: str
    weights: ConvWeights
    conv_kind: str               # "subm" | "sparse" | "dense" | "tconv"
    relu: bool = True
    affine: AffineWeights | None = None

    def param_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = [("kernel", self.weights.kernel), ("bias", self.weights.bias)]
        if self.affine is not None:
            arrays += [("scale", self.affine.scale), ("shift", self.affine.shift)]
        return arrays


@dataclass
class LinearLayer:
    name: str
    weights: LinearWeights

    def param_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("weight", self.weights.weight), ("bias", self.weights.bias)]


@dataclass
class FusionLayer:
    """BiFPN fusion node: nonnegative input weights, softplus-normalized."""

    name: str
    raw: np.ndarray  # (n_inputs,)

    def normalized(self) -> np.ndarray:
        soft = np.log1p(np.exp(self.raw.astype(np.float64)))
        return soft / soft.sum()

    def param_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("raw", self.raw)]


Layer = ConvLayer | LinearLayer | FusionLayer


@dataclass
class Model:
    config: ModelConfig
    layers: "OrderedDict[str, Layer]"

    def layer(self, name: str) -> Layer:
        try:
            return self.layers[name]
        except KeyError:
            raise BuildError(f"layer {name!r} missing from model") from None


@dataclass
class TraceEntry:
    """One executed layer: MAC count under the observed activity plus site
    and element counts for budget reporting."""

    name: str
    kind: str
    macs: int
    active_in: int
    active_out: int
    out_elems: int


@dataclass
class GroupOutput:
    classes: tuple[str, ...]
    heatmap: np.ndarray                 # (|classes|, H, W), pre-sigmoid
    regressions: dict[str, np.ndarray]  # target -> (channels, H, W)


@dataclass
class HeadOutput:
    groups: list[GroupOutput]

    @property
    def spatial(self) -> tuple[int, int]:
        hm = self.groups[0].heatmap
        return hm.shape[1], hm.shape[2]


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------

class _Init:
    """Counter-based deterministic weight source: stream i is Philox keyed by
    (seed, i), so layer weights do not depend on build order elsewhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def rng(self) -> np.random.Generator:
        g = np.random.Generator(np.random.Philox(key=np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.counter], dtype=np.uint64)))
        self.counter += 1
        return g

    def conv(self, name: str, cin: int, cout: int, k: int, rank: int,
             stride: int = 1, dilation: int = 1, bias_fill: float | None = None,
             relu: bool = True, affine: bool = True,
             conv_kind: str = "dense") -> ConvLayer:
        fan_in = cin * k ** rank
        std = float(np.sqrt(2.0 / fan_in))
        kernel = self.rng().normal(0.0, std, size=(cout, cin) + (k,) * rank)
        bias = np.full(cout, 0.0 if bias_fill is None else bias_fill, dtype=np.float32)
        try:
            weights = ConvWeights(kernel.astype(np.float32), bias,
                                  stride=stride, dilation=dilation)
        except sp.ShapeError as exc:
            raise BuildError(f"layer {name}: {exc}") from exc
        aff = AffineWeights.identity(cout) if affine else None
        return ConvLayer(name, weights, conv_kind, relu=relu, affine=aff)

    def linear(self, name: str, cin: int, cout: int) -> LinearLayer:
        std = float(np.sqrt(2.0 / cin))
        weight = self.rng().normal(0.0, std, size=(cout, cin)).astype(np.float32)
        return LinearLayer(name, LinearWeights(weight, np.zeros(cout, np.float32)))

    def fusion(self, name: str, n_inputs: int) -> FusionLayer:
        return FusionLayer(name, np.ones(n_inputs, dtype=np.float32))


def _stage_z_dims(config: ModelConfig) -> list[int]:
    """z extent after each backbone stage for 3D backbones (k=3, pad 1)."""
    nz = config.grid.dims[2] if config.grid.view == "cartesian3d" else 1
    out = []
    for s in config.backbone_strides:
        nz = (nz - 1) // s + 1
        out.append(nz)
    return out


def stage_dense_channels(config: ModelConfig) -> list[int]:
    """Channel width of each densified (BEV) stage output: plain channels for
    2D backbones, channels x remaining z bins after height collapse for 3D."""
    if config.encoder.kind == "voxel":
        return [c * z for c, z in zip(config.backbone_channels, _stage_z_dims(config))]
    return list(config.backbone_channels)


def build_model(config: ModelConfig) -> Model:
    """Realize a config into named layers with seed-deterministic weights."""
    init = _Init(config.seed)
    layers: "OrderedDict[str, Layer]" = OrderedDict()
    rank = 3 if config.encoder.kind == "voxel" else 2

    def add(layer: Layer) -> Layer:
        if layer.name in layers:
            raise BuildError(f"layer {layer.name}: duplicate name")
        layers[layer.name] = layer
        return layer

    # encoder MLP(s)
    enc = config.encoder
    c1, c2, c3, c4 = config.backbone_channels
    if enc.kind == "mvf":
        assert config.cyl_grid is not None
        in_dim = enc.feature_dim(config.grid)
        cin = in_dim
        for i, c in enumerate(enc.mlp_channels):
            add(init.linear(f"encoder.pillar_mlp.{i}", cin, c))
            cin = c
        cin = enc.feature_dim(config.cyl_grid)
        for i, c in enumerate(enc.mlp_channels):
            add(init.linear(f"encoder.cyl_mlp.{i}", cin, c))
            cin = c
        fusion_in = in_dim + 2 * enc.mlp_channels[-1]
        add(init.linear("encoder.fusion", fusion_in, enc.mlp_channels[-1]))
    else:
        cin = enc.feature_dim(config.grid)
        for i, c in enumerate(enc.mlp_channels):
            add(init.linear(f"encoder.mlp.{i}", cin, c))
            cin = c
    enc_out = enc.mlp_channels[-1]

    # backbone: stem + 4 stages x (transition + 2 submanifold basic blocks)
    add(init.conv("backbone.stem", enc_out, c1, 3, rank, conv_kind="subm"))
    chans = [c1, c2, c3, c4]
    cur = c1
    for s_idx, (c, stride) in enumerate(zip(chans, config.backbone_strides), start=1):
        prefix = f"backbone.stage{s_idx}"
        if stride == 2:
            add(init.conv(f"{prefix}.trans", cur, c, 3, rank, stride=2,
                          conv_kind="sparse"))
        elif cur != c:
            add(init.conv(f"{prefix}.trans", cur, c, 3, rank, conv_kind="subm"))
        cur = c
        for b in (1, 2):
            add(init.conv(f"{prefix}.block{b}.conv1", c, c, 3, rank, conv_kind="subm"))
            add(init.conv(f"{prefix}.block{b}.conv2", c, c, 3, rank,
                          conv_kind="subm", relu=False))

    # neck (dense, on height-collapsed stages for 3D backbones)
    dense_ch = stage_dense_channels(config)
    nc = config.resolved_neck_channels
    kind = config.neck
    if kind == "plain":
        if dense_ch[3] != nc:
            add(init.conv("neck.inproj", dense_ch[3], nc, 1, 2))
        add(init.conv("neck.block.conv1", nc, nc, 3, 2))
        add(init.conv("neck.block.conv2", nc, nc, 3, 2, relu=False))
    elif kind == "dilated":
        if dense_ch[3] != nc:
            add(init.conv("neck.inproj", dense_ch[3], nc, 1, 2))
        for d in DILATED_RATES:
            add(init.conv(f"neck.dil{d}.conv1", nc, nc, 3, 2, dilation=d))
            add(init.conv(f"neck.dil{d}.conv2", nc, nc, 3, 2, dilation=d, relu=False))
    elif kind == "aspp":
        for d in ASPP_RATES:
            add(init.conv(f"neck.branch_d{d}", dense_ch[3], nc, 3, 2, dilation=d))
        add(init.conv("neck.branch_1x1", dense_ch[3], nc, 1, 2))
        add(init.conv("neck.fuse", nc * (len(ASPP_RATES) + 1), nc, 1, 2))
    elif kind == "fpn":
        for lvl in (2, 3, 4):
            add(init.conv(f"neck.lateral{lvl}", dense_ch[lvl - 1], nc, 1, 2))
        add(init.conv("neck.out", nc, nc, 3, 2))
    elif kind == "bifpn":
        for lvl in (2, 3, 4):
            add(init.conv(f"neck.lateral{lvl}", dense_ch[lvl - 1], nc, 1, 2))
        for node, n_in in (("td3", 2), ("td2", 2), ("bu3", 3), ("bu4", 2), ("out", 3)):
            add(init.fusion(f"neck.{node}.fuse", n_in))
            add(init.conv(f"neck.{node}.conv", nc, nc, 3, 2))
        for lvl in (2, 3):  # stride-2 downsamples used by the bottom-up pass
            add(init.conv(f"neck.down{lvl}", nc, nc, 3, 2, stride=2))
    elif kind == "pillarnet":
        add(init.conv("neck.up", dense_ch[3], nc, 3, 2, conv_kind="tconv"))
        add(init.conv("neck.fuse", nc + dense_ch[2], nc, 3, 2))

    # head: optional upsample, then per-group shared conv + per-target 1x1
    hc = config.resolved_head_channels
    if config.head_upsample == 2:
        add(init.conv("head.upsample", nc, nc, 3, 2, conv_kind="tconv"))
    heat_bias = -float(np.log((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR))
    for g, group in enumerate(config.groups):
        prefix = f"head.g{g}"
        add(init.conv(f"{prefix}.shared", nc, hc, 3, 2))
        add(init.conv(f"{prefix}.heatmap", hc, len(group.classes), 1, 2,
                      bias_fill=heat_bias, relu=False, affine=False))
        for target in _group_targets(config, group):
            add(init.conv(f"{prefix}.{target}", hc, TARGET_CHANNELS[target], 1, 2,
                          relu=False, affine=False))
    return Model(config=config, layers=layers)


def _group_targets(config: ModelConfig, group: HeadGroup) -> tuple[str, ...]:
    targets = group.targets
    if config.iou_branch and "iou" not in targets:
        targets = targets + ("iou",)
    return targets


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _record(trace, name, kind, macs, active_in, active_out, out_elems):
    if trace is not None:
        trace.append(TraceEntry(name, kind, int(macs), int(active_in),
                                int(active_out), int(out_elems)))


def _encoder_mlp(model: Model, prefix: str) -> list[LinearWeights]:
    out = []
    i = 0
    while f"{prefix}.{i}" in model.layers:
        out.append(model.layers[f"{prefix}.{i}"].weights)
        i += 1
    return out


def encode(model: Model, cloud: PointCloud, trace=None) -> SparseTensor:
    """Run the configured grid encoder; records MLP MACs when tracing."""
    cfg = model.config
    enc = cfg.encoder
    n = len(cloud)
    if enc.kind == "pillar":
        mlp = _encoder_mlp(model, "encoder.mlp")
        st = pillar_encode(cloud, cfg.grid, enc, mlp)
        _trace_mlp(trace, "encoder.mlp", mlp, n, st.num_active)
    elif enc.kind == "voxel":
        mlp = _encoder_mlp(model, "encoder.mlp")
        st = voxel_encode(cloud, cfg.grid, enc, mlp)
        _trace_mlp(trace, "encoder.mlp", mlp, n, st.num_active)
    else:
        weights = MvfWeights(
            pillar_mlp=_encoder_mlp(model, "encoder.pillar_mlp"),
            cylinder_mlp=_encoder_mlp(model, "encoder.cyl_mlp"),
            fusion=model.layer("encoder.fusion").weights,
        )
        st = mvf_encode(cloud, cfg.grid, cfg.cyl_grid, enc, weights)
        _trace_mlp(trace, "encoder.pillar_mlp", weights.pillar_mlp, n, st.num_active)
        _trace_mlp(trace, "encoder.cyl_mlp", weights.cylinder_mlp, n, st.num_active)
        _trace_mlp(trace, "encoder.fusion", [weights.fusion], n, st.num_active)
    return st


def _trace_mlp(trace, name, layers, n, n_out):
    for i, lw in enumerate(layers):
        _record(trace, f"{name}.{i}" if len(layers) > 1 else name, "linear",
                n * lw.in_channels * lw.out_channels, n, n_out,
                n * lw.out_channels)


def _apply_sparse_layer(layer: ConvLayer, st: SparseTensor, trace) -> SparseTensor:
    w = layer.weights
    if w.in_channels != st.channels:
        raise BuildError(f"layer {layer.name}: expects {w.in_channels} channels, "
                         f"input has {st.channels}")
    if layer.conv_kind == "subm":
        pairs = sp.subm_kernel_map(st, w)
        feats = sp.apply_kernel_map(st.features, w.kernel, w.bias, pairs, st.num_active)
        out = SparseTensor(st.coords.copy(), feats, st.spatial_dims, st.stride)
    else:
        out_coords, out_dims = sp.strided_out_sites(st, w)
        pairs = sp.strided_kernel_map(st, w, out_coords, out_dims)
        feats = sp.apply_kernel_map(st.features, w.kernel, w.bias, pairs, len(out_coords))
        out = SparseTensor(out_coords, feats, out_dims, st.stride * w.stride)
    npairs = sp.kernel_map_pairs(pairs)
    _record(trace, layer.name, layer.conv_kind,
            npairs * w.in_channels * w.out_channels,
            st.num_active, out.num_active, out.num_active * w.out_channels)
    if layer.affine is not None:
        out = SparseTensor(out.coords,
                           out.features * layer.affine.scale + layer.affine.shift,
                           out.spatial_dims, out.stride)
        _record(trace, f"{layer.name}.affine", "affine",
                out.num_active * out.channels, out.num_active, out.num_active,
                out.num_active * out.channels)
    if layer.relu:
        out = sp.sparse_relu(out)
    return out


def _apply_dense_layer(layer: ConvLayer, x: np.ndarray, trace) -> np.ndarray:
    w = layer.weights
    if layer.conv_kind == "tconv":
        out = sp.transposed_conv2x(x, w)
        macs = _tconv_taps(x.shape[1:], w) * w.in_channels * w.out_channels
    else:
        out = sp.dense_conv(x, w)
        out_spatial = int(np.prod(out.shape[1:]))
        macs = w.in_channels * w.out_channels * w.ksize ** w.rank * out_spatial
    n_out = int(np.prod(out.shape[1:]))
    _record(trace, layer.name, layer.conv_kind, macs,
            int(np.prod(x.shape[1:])), n_out, n_out * w.out_channels)
    if layer.affine is not None:
        out = out * layer.affine.scale.reshape((-1,) + (1,) * (out.ndim - 1)) \
            + layer.affine.shift.reshape((-1,) + (1,) * (out.ndim - 1))
        _record(trace, f"{layer.name}.affine", "affine", out.size, n_out, n_out, out.size)
    if layer.relu:
        out = np.maximum(out, 0.0)
    return out


def _tconv_taps(in_dims, w: ConvWeights) -> int:
    """Exact count of accumulated (input, tap) scatters for transposed_conv2x."""
    s, p, d, k = 2, w.padding, w.dilation, w.ksize
    total = 0
    for tap in itertools.product(range(k), repeat=len(in_dims)):
        n = 1
        for t, dim in zip(tap, in_dims):
            # count i in [0, dim) with 0 <= s*i + off < 2*dim
            off = t * d - p
            lo = max(0, (-off + s - 1) // s)
            hi = min(dim - 1, (2 * dim - 1 - off) // s)
            n *= max(0, hi - lo + 1)
        total += n
    return total


def backbone_forward(model: Model, st: SparseTensor, trace=None) -> list[SparseTensor]:
    """Stem + 4 stages; returns the 4 stage outputs (sparse)."""
    x = _apply_sparse_layer(model.layer("backbone.stem"), st, trace)
    stages = []
    for s_idx in range(1, 5):
        prefix = f"backbone.stage{s_idx}"
        if f"{prefix}.trans" in model.layers:
            x = _apply_sparse_layer(model.layer(f"{prefix}.trans"), x, trace)
        for b in (1, 2):
            identity = x
            y = _apply_sparse_layer(model.layer(f"{prefix}.block{b}.conv1"), x, trace)
            y = _apply_sparse_layer(model.layer(f"{prefix}.block{b}.conv2"), y, trace)
            x = sp.sparse_relu(sp.sparse_add(y, identity))
        stages.append(x)
    return stages


def _stage_bev_dense(stage: SparseTensor) -> np.ndarray:
    if stage.rank == 3:
        stage = sp.collapse_height(stage)
    return sp.to_dense(stage)


def _upsample2_to(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor x2 upsample, cropped/padded to the target size."""
    up = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    out = np.zeros((x.shape[0],) + tuple(target), dtype=x.dtype)
    h = min(up.shape[1], target[0])
    w = min(up.shape[2], target[1])
    out[:, :h, :w] = up[:, :h, :w]
    return out


def _fuse(model: Model, node: str, inputs: list[np.ndarray], trace) -> np.ndarray:
    layer = model.layer(f"neck.{node}.fuse")
    weights = layer.normalized()
    if len(weights) != len(inputs):
        raise BuildError(f"layer neck.{node}.fuse: expects {len(weights)} inputs")
    out = np.zeros_like(inputs[0], dtype=np.float64)
    for wgt, arr in zip(weights, inputs):
        out += wgt * arr.astype(np.float64)
    out = out.astype(np.float32)
    _record(trace, f"neck.{node}.fuse", "fusion", out.size * len(inputs),
            int(np.prod(inputs[0].shape[1:])), int(np.prod(out.shape[1:])), out.size)
    return _apply_dense_layer(model.layer(f"neck.{node}.conv"), out, trace)


def neck_forward(model: Model, stages: list[SparseTensor], trace=None) -> np.ndarray:
    """Aggregate backbone stages into one dense BEV map (C, H, W)."""
    cfg = model.config
    kind = cfg.neck
    if kind in ("plain", "dilated"):
        x = _stage_bev_dense(stages[3])
        if "neck.inproj" in model.layers:
            x = _apply_dense_layer(model.layer("neck.inproj"), x, trace)
        rates = (None,) if kind == "plain" else DILATED_RATES
        for d in rates:
            prefix = "neck.block" if d is None else f"neck.dil{d}"
            identity = x
            y = _apply_dense_layer(model.layer(f"{prefix}.conv1"), x, trace)
            y = _apply_dense_layer(model.layer(f"{prefix}.conv2"), y, trace)
            x = np.maximum(y + identity, 0.0)
        return x
    if kind == "aspp":
        x = _stage_bev_dense(stages[3])
        branches = [_apply_dense_layer(model.layer(f"neck.branch_d{d}"), x, trace)
                    for d in ASPP_RATES]
        branches.append(_apply_dense_layer(model.layer("neck.branch_1x1"), x, trace))
        cat = np.concatenate(branches, axis=0)
        return _apply_dense_layer(model.layer("neck.fuse"), cat, trace)
    if kind == "fpn":
        laterals = {
            lvl: _apply_dense_layer(model.layer(f"neck.lateral{lvl}"),
                                    _stage_bev_dense(stages[lvl - 1]), trace)
            for lvl in (2, 3, 4)
        }
        p4 = laterals[4]
        p3 = laterals[3] + _upsample2_to(p4, laterals[3].shape[1:])
        p2 = laterals[2] + _upsample2_to(p3, laterals[2].shape[1:])
        return _apply_dense_layer(model.layer("neck.out"), p2, trace)
    if kind == "bifpn":
        laterals = {
            lvl: _apply_dense_layer(model.layer(f"neck.lateral{lvl}"),
                                    _stage_bev_dense(stages[lvl - 1]), trace)
            for lvl in (2, 3, 4)
        }
        td3 = _fuse(model, "td3",
                    [laterals[3], _upsample2_to(laterals[4], laterals[3].shape[1:])],
                    trace)
        td2 = _fuse(model, "td2",
                    [laterals[2], _upsample2_to(td3, laterals[2].shape[1:])], trace)
        down2 = _apply_dense_layer(model.layer("neck.down2"), td2, trace)
        bu3 = _fuse(model, "bu3", [laterals[3], td3,
                                   _crop_to(down2, td3.shape[1:])], trace)
        down3 = _apply_dense_layer(model.layer("neck.down3"), bu3, trace)
        bu4 = _fuse(model, "bu4", [laterals[4], _crop_to(down3, laterals[4].shape[1:])],
                    trace)
        target = td2.shape[1:]
        bu4_up = _upsample2_to(_upsample2_to(bu4, bu3.shape[1:]), target)
        return _fuse(model, "out", [td2, _upsample2_to(bu3, target), bu4_up], trace)
    if kind == "pillarnet":
        up = _apply_dense_layer(model.layer("neck.up"), _stage_bev_dense(stages[3]), trace)
        s3 = _stage_bev_dense(stages[2])
        up = _crop_to(up, s3.shape[1:])
        cat = np.concatenate([up, s3], axis=0)
        return _apply_dense_layer(model.layer("neck.fuse"), cat, trace)
    raise ConfigError(f"unknown neck kind {kind!r}")


def _crop_to(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    out = np.zeros((x.shape[0],) + tuple(target), dtype=x.dtype)
    h = min(x.shape[1], target[0])
    w = min(x.shape[2], target[1])
    out[:, :h, :w] = x[:, :h, :w]
    return out


def head_forward(model: Model, neck_map: np.ndarray, trace=None) -> HeadOutput:
    """Optional 2x upsample, then per-group shared 3x3 + per-target 1x1."""
    cfg = model.config
    x = neck_map
    if cfg.head_upsample == 2:
        x = _apply_dense_layer(model.layer("head.upsample"), x, trace)
    groups = []
    for g, group in enumerate(cfg.groups):
        prefix = f"head.g{g}"
        shared = _apply_dense_layer(model.layer(f"{prefix}.shared"), x, trace)
        heatmap = _apply_dense_layer(model.layer(f"{prefix}.heatmap"), shared, trace)
        regs = {
            target: _apply_dense_layer(model.layer(f"{prefix}.{target}"), shared, trace)
            for target in _group_targets(cfg, group)
        }
        groups.append(GroupOutput(classes=group.classes, heatmap=heatmap,
                                  regressions=regs))
    return HeadOutput(groups=groups)


def forward(model: Model, cloud: PointCloud, trace=None) -> HeadOutput:
    st = encode(model, cloud, trace)
    stages = backbone_forward(model, st, trace)
    neck_map = neck_forward(model, stages, trace)
    return head_forward(model, neck_map, trace)


# ---------------------------------------------------------------------------
# Receptive-field plan (interpreted by the budget module)
# ---------------------------------------------------------------------------

def rf_plan(config: ModelConfig) -> list:
    """Layer geometry as a nested plan of ("conv", name, k, dilation, stride),
    ("up", name, k, factor) and ("par", [branch plans]) steps, in forward
    order. The budget module folds this into analytic receptive fields."""
    plan: list = [("conv", "backbone.stem", 3, 1, 1)]
    cur = config.backbone_channels[0]
    for s_idx, (c, stride) in enumerate(
            zip(config.backbone_channels, config.backbone_strides), start=1):
        prefix = f"backbone.stage{s_idx}"
        if stride == 2 or cur != c:
            plan.append(("conv", f"{prefix}.trans", 3, 1, stride))
        cur = c
        for b in (1, 2):
            plan.append(("conv", f"{prefix}.block{b}.conv1", 3, 1, 1))
            plan.append(("conv", f"{prefix}.block{b}.conv2", 3, 1, 1))
    kind = config.neck
    if kind == "plain":
        plan += [("conv", "neck.block.conv1", 3, 1, 1),
                 ("conv", "neck.block.conv2", 3, 1, 1)]
    elif kind == "dilated":
        for d in DILATED_RATES:
            plan += [("conv", f"neck.dil{d}.conv1", 3, d, 1),
                     ("conv", f"neck.dil{d}.conv2", 3, d, 1)]
    elif kind == "aspp":
        plan.append(("par", [[("conv", f"neck.branch_d{d}", 3, d, 1)]
                             for d in ASPP_RATES] + [[("conv", "neck.branch_1x1", 1, 1, 1)]]))
        plan.append(("conv", "neck.fuse", 1, 1, 1))
    elif kind in ("fpn", "bifpn"):
        # dominant path: stage-4 features upsampled to the stage-2 level
        plan += [("up", "neck.topdown", 1, 4)]
        name = "neck.out" if kind == "fpn" else "neck.out.conv"
        plan.append(("conv", name, 3, 1, 1))
    elif kind == "pillarnet":
        plan += [("up", "neck.up", 3, 2), ("conv", "neck.fuse", 3, 1, 1)]
    if config.head_upsample == 2:
        plan.append(("up", "head.upsample", 3, 2))
    plan.append(("conv", "head.shared", 3, 1, 1))
    return plan


# ---------------------------------------------------------------------------
# Serialization: config JSON + flat float32 blob with a JSON layer index
# ---------------------------------------------------------------------------

def save_model(model: Model, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(model.config.to_json(), indent=2) + "\n", encoding="utf-8")
    index = []
    offset = 0
    chunks = []
    for name, layer in model.layers.items():
        for pname, arr in layer.param_arrays():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            index.append({"name": name, "param": pname,
                          "offset": offset, "shape": list(arr32.shape)})
            chunks.append(arr32.tobytes())
            offset += arr32.size
    (out_dir / "weights.bin").write_bytes(b"".join(chunks))
    (out_dir / "weights_index.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "params": index}, indent=2) + "\n",
        encoding="utf-8")


def load_model(model_dir) -> Model:
    model_dir = Path(model_dir)
    config = ModelConfig.from_json(
        json.loads((model_dir / "config.json").read_text(encoding="utf-8")))
    model = build_model(config)
    blob = np.frombuffer((model_dir / "weights.bin").read_bytes(), dtype="<f4")
    index = json.loads((model_dir / "weights_index.json").read_text(encoding="utf-8"))
    for entry in index["params"]:
        layer = model.layer(entry["name"])
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        values = blob[entry["offset"]:entry["offset"] + size].reshape(shape).copy()
        target = dict(layer.param_arrays())[entry["param"]]
        if target.shape != values.shape:
            raise BuildError(f"layer {entry['name']}: stored shape {values.shape} "
                             f"does not match built shape {target.shape}")
        target[...] = values
    return model
