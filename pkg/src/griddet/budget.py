"""Computational budget accounting: per-layer parameters, FLOPs under the
observed sparsity, analytic receptive fields, wall-clock benchmarking, and
the tiny/small/base/large width-scaling presets.

FLOPs are counted as 2x multiply-accumulates; bias adds are ignored (a
sub-0.1% effect). For sparse convolutions the MAC count uses the number of
(input-tap, output-site) pairs actually accumulated, so totals are monotone
in the active-site count of the input. Latency is reported, never asserted
against any reference hardware.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import network as net
from .grids import EncoderConfig, GridSpec, wod_cylinder_grid, wod_pillar_grid, wod_voxel_grid
from .lidar_io import PointCloud
from .network import ConvLayer, FusionLayer, LinearLayer, Model, ModelConfig

SCHEMA_VERSION = 1


@dataclass
class LayerStats:
    name: str
    kind: str
    params: int
    flops: int
    active_in: int
    active_out: int
    receptive_field: int  # cells per spatial axis, at the input grid


@dataclass(frozen=True)
class ScalePreset:
    tier: str                       # "T" | "S" | "B" | "L"
    channels: tuple[int, int, int, int]


# Width series per encoder; the voxel series starts at S because the smallest
# voxel network already costs about as much as the small pillar one.
SCALING_SERIES = {
    "pillar": (ScalePreset("T", (32, 64, 128, 128)),
               ScalePreset("S", (42, 84, 168, 168)),
               ScalePreset("B", (64, 128, 256, 256)),
               ScalePreset("L", (96, 192, 384, 384))),
    "voxel": (ScalePreset("S", (12, 24, 48, 96)),
              ScalePreset("B", (18, 36, 72, 144)),
              ScalePreset("L", (28, 56, 112, 224))),
    "mvf": (ScalePreset("T", (32, 64, 128, 128)),
            ScalePreset("S", (44, 88, 176, 176)),
            ScalePreset("B", (68, 136, 272, 272)),
            ScalePreset("L", (96, 192, 384, 384))),
}


def scaling_series(encoder_kind: str) -> tuple[ScalePreset, ...]:
    """The published channel lists for one encoder family."""
    try:
        return SCALING_SERIES[encoder_kind]
    except KeyError:
        raise ValueError(f"unknown encoder kind {encoder_kind!r}") from None


def preset_config(encoder_kind: str, tier: str, **overrides) -> ModelConfig:
    """Standard model config for one (encoder, tier) pair: default grids,
    ASPP neck, 2x head upsample, vehicle + pedestrian/cyclist groups."""
    presets = {p.tier: p for p in scaling_series(encoder_kind)}
    if tier not in presets:
        raise ValueError(f"no {tier} tier for {encoder_kind} (have {sorted(presets)})")
    channels = presets[tier].channels
    if encoder_kind == "voxel":
        grid = wod_voxel_grid()
        cyl = None
    else:
        grid = wod_pillar_grid()
        cyl = wod_cylinder_grid() if encoder_kind == "mvf" else None
    kwargs = dict(
        encoder=EncoderConfig(kind=encoder_kind, mlp_channels=(channels[0],)),
        grid=grid,
        cyl_grid=cyl,
        backbone_channels=channels,
        neck="aspp",
        head_upsample=2,
        seed=0,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def layer_params(layer) -> int:
    """conv: Cout*Cin*k^rank + Cout (+ folded affine 2C); linear:
    Cout*Cin + Cout; fusion node: one weight per input."""
    if isinstance(layer, ConvLayer):
        w = layer.weights
        n = w.kernel.size + w.bias.size
        if layer.affine is not None:
            n += layer.affine.scale.size + layer.affine.shift.size
        return int(n)
    if isinstance(layer, LinearLayer):
        return int(layer.weights.weight.size + layer.weights.bias.size)
    if isinstance(layer, FusionLayer):
        return int(layer.raw.size)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def count_params(model: Model) -> tuple[dict[str, int], int]:
    """Per-layer and total parameter counts (input-independent)."""
    per_layer = {name: layer_params(layer) for name, layer in model.layers.items()}
    return per_layer, sum(per_layer.values())


# ---------------------------------------------------------------------------
# FLOPs (instrumented forward)
# ---------------------------------------------------------------------------

def count_flops(model: Model, cloud: PointCloud) -> tuple[list[LayerStats], int]:
    """Run an instrumented forward pass and report per-layer FLOPs under the
    observed sparsity. Returns (per-layer stats, total FLOPs)."""
    trace: list[net.TraceEntry] = []
    net.forward(model, cloud, trace)
    params, _ = count_params(model)
    rf = receptive_field(model)
    stats = []
    for entry in trace:
        stats.append(LayerStats(
            name=entry.name,
            kind=entry.kind,
            params=params.get(entry.name, 0) if entry.kind != "affine" else 0,
            flops=2 * entry.macs,
            active_in=entry.active_in,
            active_out=entry.active_out,
            receptive_field=_rf_for(entry.name, rf),
        ))
    return stats, sum(s.flops for s in stats)


def _rf_for(name: str, rf: dict[str, int]) -> int:
    """Receptive field for a traced layer; layers off the dominant path (head
    group branches, multi-scale laterals) inherit the nearest tracked value."""
    base = name.removesuffix(".affine")
    if base in rf:
        return rf[base]
    if base.startswith("encoder"):
        return 1
    if base.startswith("head.g"):
        return rf.get("head.shared", rf["__output__"])
    return 0


# ---------------------------------------------------------------------------
# Analytic receptive field
# ---------------------------------------------------------------------------

def receptive_field(model: Model) -> dict[str, int]:
    """Receptive field after each layer, composed as rf += (k-1)*dilation*jump
    with jump *= stride, in input-grid cells. Parallel branches merge by max;
    upsampling divides the jump (and adds the transposed kernel's reach)."""
    per_layer: dict[str, int] = {}
    rf, jump = _fold_plan(net.rf_plan(model.config), 1.0, 1.0, per_layer)
    per_layer["__output__"] = int(round(rf))
    return per_layer


def model_receptive_field(model: Model) -> int:
    """Analytic receptive field at the head output, in input-grid cells."""
    return receptive_field(model)["__output__"]


def _fold_plan(plan, rf: float, jump: float, out: dict[str, int]) -> tuple[float, float]:
    for step in plan:
        op = step[0]
        if op == "conv":
            _, name, k, dilation, stride = step
            rf = rf + (k - 1) * dilation * jump
            jump = jump * stride
            out[name] = int(round(rf))
        elif op == "up":
            _, name, k, factor = step
            jump = jump / factor
            # ceil(k / factor) input taps reach each output of the transpose
            rf = rf + (int(np.ceil(k / factor)) - 1) * jump * factor
            out[name] = int(round(rf))
        elif op == "par":
            _, branches = step
            results = [_fold_plan(b, rf, jump, out) for b in branches]
            rf = max(r for r, _ in results)
            jump = results[0][1]
        else:
            raise ValueError(f"unknown rf plan step {op!r}")
    return rf, jump


# ---------------------------------------------------------------------------
# Wall-clock benchmark
# ---------------------------------------------------------------------------

def benchmark(model: Model, cloud: PointCloud, warmup: int = 2,
              iters: int = 10) -> dict:
    """Time repeated forward passes; warmup runs are excluded. Outputs must
    be bitwise identical across iterations (the forward is deterministic)."""
    reference = None
    samples_ms: list[float] = []
    for i in range(warmup + iters):
        t0 = time.perf_counter()
        out = net.forward(model, cloud)
        elapsed = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            samples_ms.append(elapsed)
        flat = np.concatenate([g.heatmap.ravel() for g in out.groups])
        if reference is None:
            reference = flat
        elif not np.array_equal(reference, flat):
            raise RuntimeError("forward pass is not deterministic across iterations")
    arr = np.array(samples_ms)
    return {
        "schema_version": SCHEMA_VERSION,
        "warmup": warmup,
        "iters": iters,
        "samples_ms": [round(v, 3) for v in samples_ms],
        "mean_ms": float(arr.mean()),
        "median_ms": float(np.median(arr)),
        "p95_ms": float(np.percentile(arr, 95)),
    }


# ---------------------------------------------------------------------------
# Canonical profiling scene
# ---------------------------------------------------------------------------

PROFILE_SCENE_SEED = 2024
PROFILE_SCENE_POINTS = 150_000


def make_profiling_scene(seed: int = PROFILE_SCENE_SEED,
                         n_points: int = PROFILE_SCENE_POINTS,
                         extent: float = 76.8) -> PointCloud:
    """Fixed synthetic scene used for FLOPs/latency reporting: a LiDAR-like
    mix of ground returns (range falloff), object clusters, and scattered
    tail points, all inside the default detection range. Absolute FLOPs are
    comparable only within this toolkit.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n_ground = int(n_points * 0.70)
    n_cluster = int(n_points * 0.25)
    n_tail = n_points - n_ground - n_cluster

    # ground: azimuth uniform, range concentrated near the sensor
    az = rng.uniform(-np.pi, np.pi, n_ground)
    rad = extent * 0.95 * rng.beta(1.3, 3.0, n_ground)
    gx = rad * np.cos(az)
    gy = rad * np.sin(az)
    gz = rng.normal(-1.7, 0.05, n_ground)

    # clusters: box-shaped objects at random poses
    n_obj = 60
    centers = rng.uniform(-extent * 0.9, extent * 0.9, (n_obj, 2))
    sizes = rng.uniform(0.5, 2.5, (n_obj, 3)) * np.array([2.0, 1.0, 0.8])
    idx = rng.integers(0, n_obj, n_cluster)
    local = rng.uniform(-0.5, 0.5, (n_cluster, 3)) * sizes[idx]
    cx = centers[idx, 0] + local[:, 0]
    cy = centers[idx, 1] + local[:, 1]
    cz = np.clip(-1.0 + local[:, 2] + sizes[idx, 2] / 2, -1.9, 3.9)

    tx = rng.uniform(-extent, extent, n_tail)
    ty = rng.uniform(-extent, extent, n_tail)
    tz = rng.uniform(-1.9, 3.9, n_tail)

    x = np.concatenate([gx, cx, tx]).astype(np.float32)
    y = np.concatenate([gy, cy, ty]).astype(np.float32)
    z = np.concatenate([gz, cz, tz]).astype(np.float32)
    np.clip(x, -extent, np.nextafter(extent, 0, dtype=np.float32), out=x)
    np.clip(y, -extent, np.nextafter(extent, 0, dtype=np.float32), out=y)
    np.clip(z, -1.99, 3.99, out=z)
    intensity = rng.uniform(0.0, 1.0, n_points).astype(np.float32)
    return PointCloud.from_columns(x, y, z, intensity, frame_id="profiling_scene")


# ---------------------------------------------------------------------------
# Report formatting
# ---------------------------------------------------------------------------

def profile_report(model: Model, stats: list[LayerStats], total_flops: int) -> dict:
    per_layer, total_params = count_params(model)
    return {
        "schema_version": SCHEMA_VERSION,
        "channels": list(model.config.backbone_channels),
        "total_params": total_params,
        "total_flops": total_flops,
        "receptive_field": model_receptive_field(model),
        "layers": [
            {"name": s.name, "kind": s.kind, "params": s.params, "flops": s.flops,
             "active_in": s.active_in, "active_out": s.active_out,
             "receptive_field": s.receptive_field}
            for s in stats
        ],
    }


def format_profile_table(model: Model, total_flops: int,
                         latency_ms: float | None = None) -> str:
    """One-line summary table: Channels, #Params (M), FLOPs (G), Latency (ms)."""
    _, total_params = count_params(model)
    channels = "[" + ", ".join(str(c) for c in model.config.backbone_channels) + "]"
    lat = f"{latency_ms:.1f}" if latency_ms is not None else "-"
    lines = [
        f"{'Channels':<26} {'#Params (M)':>12} {'FLOPs (G)':>12} {'Latency (ms)':>14}",
        f"{channels:<26} {total_params / 1e6:>12.2f} {total_flops / 1e9:>12.1f} {lat:>14}",
    ]
    return "\n".join(lines)
