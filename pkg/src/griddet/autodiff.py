"""Manual reverse-mode differentiation for a restricted op chain (point
decoration -> shared MLP -> scatter-max -> small dense conv stack -> center
losses), finite-difference verification hooks, and a toy overfit loop.

The chain deliberately excludes sparse convolutions (no backward in scope);
the conv stack runs dense on a small grid. All gradient math is float64.
Scatter-max routes each cell/channel gradient to that cell's argmax point
only, with ties broken toward the lowest point index; ReLU gates strictly at
x > 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, iou_bev, wrap_angle
from .grids import EncoderConfig, GridSpec, assign_cells, decorate_points
from .lidar_io import BoxLabel, PointCloud


class GraphError(ValueError):
    """Shape mismatch or invalid wiring while building the tape."""


class Var:
    """Tape node: float64 value, accumulated gradient, and a closure that
    routes the node's gradient into its parents."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def backward(root: Var) -> None:
    """Reverse-mode accumulation from a scalar root."""
    if root.value.size != 1:
        raise GraphError("backward requires a scalar loss")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise GraphError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value, (a, b))
    out.backward_fn = lambda g: (a.add_grad(g), b.add_grad(g))
    return out


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise GraphError("mul shape mismatch")
    out = Var(a.value * b.value, (a, b))
    out.backward_fn = lambda g: (a.add_grad(g * b.value), b.add_grad(g * a.value))
    return out


def relu(x: Var) -> Var:
    gate = x.value > 0
    out = Var(np.where(gate, x.value, 0.0), (x,))
    out.backward_fn = lambda g: x.add_grad(g * gate)
    return out


def linear(x: Var, w: Var, b: Var) -> Var:
    """x (N, Cin) @ w (Cout, Cin)^T + b (Cout,)."""
    if x.value.shape[1] != w.value.shape[1]:
        raise GraphError(f"linear expects {w.value.shape[1]} inputs, got {x.value.shape[1]}")
    out = Var(x.value @ w.value.T + b.value, (x, w, b))

    def back(g):
        x.add_grad(g @ w.value)
        w.add_grad(g.T @ x.value)
        b.add_grad(g.sum(axis=0))
    out.backward_fn = back
    return out


def conv2d(x: Var, k: Var, b: Var) -> Var:
    """Dense 3x3-style conv on (C, H, W), stride 1, zero pad (k-1)/2."""
    ksz = k.value.shape[2]
    if k.value.shape[2] != k.value.shape[3] or ksz % 2 != 1:
        raise GraphError("conv2d expects an odd square kernel")
    if x.value.shape[0] != k.value.shape[1]:
        raise GraphError(f"conv2d expects {k.value.shape[1]} channels, got {x.value.shape[0]}")
    pad = (ksz - 1) // 2
    h, w_dim = x.value.shape[1:]
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad)))
    out_val = np.zeros((k.value.shape[0], h, w_dim))
    for ty in range(ksz):
        for tx in range(ksz):
            patch = xp[:, ty:ty + h, tx:tx + w_dim]
            out_val += np.tensordot(k.value[:, :, ty, tx], patch, axes=(1, 0))
    out_val += b.value[:, None, None]
    out = Var(out_val, (x, k, b))

    def back(g):
        gx = np.zeros_like(xp)
        gk = np.zeros_like(k.value)
        for ty in range(ksz):
            for tx in range(ksz):
                patch = xp[:, ty:ty + h, tx:tx + w_dim]
                gk[:, :, ty, tx] = np.tensordot(g, patch, axes=((1, 2), (1, 2)))
                gx[:, ty:ty + h, tx:tx + w_dim] += np.tensordot(
                    k.value[:, :, ty, tx].T, g, axes=(1, 0))
        x.add_grad(gx[:, pad:pad + h, pad:pad + w_dim])
        k.add_grad(gk)
        b.add_grad(g.sum(axis=(1, 2)))
    out.backward_fn = back
    return out


def scatter_max_op(x: Var, cell_ids: np.ndarray, num_cells: int) -> tuple[Var, np.ndarray]:
    """Max-pool point rows into occupied cells.

    Returns (pooled (M, C) Var, occupied cell ids (M,)). The backward routes
    each (cell, channel) gradient to the argmax point only; ties go to the
    lowest point index, so at most one point per cell per channel receives
    gradient.
    """
    valid = (cell_ids >= 0) & (cell_ids < num_cells)
    rows = np.nonzero(valid)[0]
    if rows.size == 0:
        pooled = Var(np.zeros((0, x.value.shape[1])), (x,))
        pooled.backward_fn = lambda g: None
        return pooled, np.zeros(0, dtype=np.int64)
    occupied, inv = np.unique(cell_ids[rows], return_inverse=True)
    n_ch = x.value.shape[1]
    pooled_val = np.full((len(occupied), n_ch), -np.inf)
    argmax = np.zeros((len(occupied), n_ch), dtype=np.int64)
    for local, row in enumerate(rows):  # ascending row order fixes tie-breaks
        cell = inv[local]
        better = x.value[row] > pooled_val[cell]
        argmax[cell, better] = row
        pooled_val[cell, better] = x.value[row, better]
    out = Var(pooled_val, (x,))

    def back(g):
        gx = np.zeros_like(x.value)
        flat_rows = argmax.ravel()
        flat_cols = np.tile(np.arange(n_ch), len(occupied))
        np.add.at(gx, (flat_rows, flat_cols), g.ravel())
        x.add_grad(gx)
    out.backward_fn = back
    return out, occupied


def dense_from_cells(pooled: Var, occupied: np.ndarray, dims: tuple[int, int]) -> Var:
    """Scatter pooled cell features (M, C) onto a dense (C, H, W) map."""
    coords = np.unravel_index(occupied, dims)
    val = np.zeros((pooled.value.shape[1],) + tuple(dims))
    val[:, coords[0], coords[1]] = pooled.value.T
    out = Var(val, (pooled,))
    out.backward_fn = lambda g: pooled.add_grad(g[:, coords[0], coords[1]].T)
    return out


def gather_cells(x: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
    """Pick (C,) columns at given map positions from (C, H, W): out (K, C)."""
    out = Var(x.value[:, rows, cols].T, (x,))

    def back(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (slice(None), rows, cols), g.T)
        x.add_grad(gx)
    out.backward_fn = back
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def focal_heatmap_loss(logits: Var, target: np.ndarray) -> Var:
    """Penalty-reduced focal loss on a pre-sigmoid heatmap.

    At target == 1 cells: -(1 - p)^2 * log p; elsewhere
    -(1 - t)^4 * p^2 * log(1 - p); normalized by the positive count (>= 1).
    Stable via softplus; backward is analytic.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.value.shape:
        raise GraphError("focal loss target shape mismatch")
    z = logits.value
    p = 1.0 / (1.0 + np.exp(-z))
    pos = t >= 1.0
    npos = max(int(pos.sum()), 1)
    log_p = -_softplus(-z)
    log_1mp = -_softplus(z)
    loss_pos = (1.0 - p) ** 2 * (-log_p)
    loss_neg = (1.0 - t) ** 4 * p ** 2 * (-log_1mp)
    total = float(np.where(pos, loss_pos, loss_neg).sum() / npos)
    out = Var(total, (logits,))

    def back(g):
        # d/dz of each term, using dp/dz = p (1 - p)
        dz_pos = 2.0 * p * (1.0 - p) ** 2 * log_p - (1.0 - p) ** 3
        dz_neg = (1.0 - t) ** 4 * (-2.0 * p ** 2 * (1.0 - p) * log_1mp + p ** 3)
        logits.add_grad(float(g) * np.where(pos, dz_pos, dz_neg) / npos)
    out.backward_fn = back
    return out


def l1_loss(pred: Var, target: np.ndarray) -> Var:
    """Mean absolute error against a constant target."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.value.shape:
        raise GraphError("l1 target shape mismatch")
    diff = pred.value - t
    n = max(diff.size, 1)
    out = Var(float(np.abs(diff).sum() / n), (pred,))
    out.backward_fn = lambda g: pred.add_grad(float(g) * np.sign(diff) / n)
    return out


def smooth_l1_loss(pred: Var, target: np.ndarray, delta: float = 0.1) -> Var:
    """Huber loss (quadratic within delta of the target), mean-reduced."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.value.shape:
        raise GraphError("smooth l1 target shape mismatch")
    diff = pred.value - t
    n = max(diff.size, 1)
    near = np.abs(diff) <= delta
    vals = np.where(near, 0.5 * diff ** 2 / delta, np.abs(diff) - 0.5 * delta)
    out = Var(float(vals.sum() / n), (pred,))
    out.backward_fn = lambda g: pred.add_grad(
        float(g) * np.where(near, diff / delta, np.sign(diff)) / n)
    return out


def sigmoid_op(x: Var) -> Var:
    p = 1.0 / (1.0 + np.exp(-x.value))
    out = Var(p, (x,))
    out.backward_fn = lambda g: x.add_grad(g * p * (1.0 - p))
    return out


def scale(x: Var, c: float) -> Var:
    out = Var(x.value * c, (x,))
    out.backward_fn = lambda g: x.add_grad(g * c)
    return out


def var_sum(xs: list[Var]) -> Var:
    out = Var(sum(float(x.value) for x in xs), tuple(xs))

    def back(g):
        for x in xs:
            x.add_grad(np.full_like(x.value, float(g)))
    out.backward_fn = back
    return out


def iou_regression_loss(pred_iou: Var, decoded: list[Box3D],
                        gt: list[Box3D]) -> Var:
    """L1 between the predicted IoU at ground-truth centers and the actual
    rotated BEV IoU of the currently-decoded boxes; the IoU target is a
    constant (no gradient flows through the geometry)."""
    if len(decoded) != len(gt) or len(decoded) != pred_iou.value.shape[0]:
        raise GraphError("iou loss needs matched decoded/gt boxes per prediction")
    targets = np.array([iou_bev(d, g) for d, g in zip(decoded, gt)])
    return l1_loss(pred_iou, targets.reshape(pred_iou.value.shape))


# ---------------------------------------------------------------------------
# Toy pipeline: decorate -> MLP -> scatter-max -> conv stack -> heads
# ---------------------------------------------------------------------------

REG_TARGET_DIM = 8  # offset (2), z (1), log dims (3), sin/cos yaw (2)


@dataclass
class ToyWeights:
    """Trainable arrays of the restricted chain, keyed for gradient I/O."""

    arrays: dict[str, np.ndarray]

    @staticmethod
    def create(grid: GridSpec, encoder: EncoderConfig, hidden: int = 8,
               seed: int = 0) -> "ToyWeights":
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        in_dim = encoder.feature_dim(grid)
        heat_bias = -math.log((1.0 - 0.01) / 0.01)

        def normal(shape, fan_in):
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

        arrays = {
            "mlp.weight": normal((hidden, in_dim), in_dim),
            "mlp.bias": np.zeros(hidden),
            "conv1.kernel": normal((hidden, hidden, 3, 3), hidden * 9),
            "conv1.bias": np.zeros(hidden),
            "conv2.kernel": normal((hidden, hidden, 3, 3), hidden * 9),
            "conv2.bias": np.zeros(hidden),
            "heatmap.kernel": normal((1, hidden, 1, 1), hidden),
            "heatmap.bias": np.full(1, heat_bias),
            "reg.kernel": normal((REG_TARGET_DIM, hidden, 1, 1), hidden),
            "reg.bias": np.zeros(REG_TARGET_DIM),
            "iou.kernel": normal((1, hidden, 1, 1), hidden),
            "iou.bias": np.zeros(1),
        }
        return ToyWeights(arrays={k: v.astype(np.float64) for k, v in arrays.items()})


@dataclass
class ToyScene:
    cloud: PointCloud
    labels: list[BoxLabel]
    grid: GridSpec
    encoder: EncoderConfig


def make_toy_scene() -> ToyScene:
    """The shipped 5-point / 1-box overfit scene on an 8x8 half-meter grid."""
    grid = GridSpec("cartesian2d", mins=(-2.0, -2.0, -1.0), maxs=(2.0, 2.0, 1.0),
                    cells=(0.5, 0.5))
    encoder = EncoderConfig("pillar", mlp_channels=(8,))
    pts = np.array([
        [0.55, -0.30, 0.10, 0.80, 0.0],
        [0.30, -0.15, -0.05, 0.50, 0.0],
        [0.75, -0.45, 0.20, 0.30, 0.0],
        [0.45, -0.60, 0.00, 0.90, 0.0],
        [0.60, -0.10, -0.15, 0.60, 0.0],
    ], dtype=np.float32)
    label = BoxLabel(center=np.array([0.5, -0.3, 0.0]),
                     dims=np.array([1.2, 0.8, 0.9]), yaw=0.4,
                     class_id="vehicle", num_points=5)
    return ToyScene(cloud=PointCloud(pts, frame_id="toy"), labels=[label],
                    grid=grid, encoder=encoder)


@dataclass
class ToyTargets:
    heatmap: np.ndarray              # (1, H, W) in [0, 1], 1 at centers
    center_rows: np.ndarray          # (K,)
    center_cols: np.ndarray          # (K,)
    regression: np.ndarray           # (K, REG_TARGET_DIM)
    gt_boxes: list[Box3D]


def make_toy_targets(scene: ToyScene, sigma_cells: float = 1.0) -> ToyTargets:
    grid = scene.grid
    h, w = grid.dims
    heat = np.zeros((1, h, w))
    rows, cols, regs, boxes = [], [], [], []
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for lab in scene.labels:
        fx = (lab.center[0] - grid.mins[0]) / grid.cells[0]
        fy = (lab.center[1] - grid.mins[1]) / grid.cells[1]
        row, col = int(fx), int(fy)
        if not (0 <= row < h and 0 <= col < w):
            continue
        bump = np.exp(-((yy - row) ** 2 + (xx - col) ** 2) / (2 * sigma_cells ** 2))
        heat[0] = np.maximum(heat[0], bump)
        heat[0, row, col] = 1.0
        rows.append(row)
        cols.append(col)
        regs.append([fx - row, fy - col, lab.center[2],
                     math.log(lab.dims[0]), math.log(lab.dims[1]), math.log(lab.dims[2]),
                     math.sin(lab.yaw), math.cos(lab.yaw)])
        boxes.append(Box3D(center=lab.center, dims=lab.dims, yaw=lab.yaw))
    return ToyTargets(heatmap=heat, center_rows=np.array(rows, dtype=np.int64),
                      center_cols=np.array(cols, dtype=np.int64),
                      regression=np.array(regs, dtype=np.float64),
                      gt_boxes=boxes)


@dataclass
class LossWeights:
    heatmap: float = 1.0
    box: float = 1.0
    iou: float = 1.0


def toy_forward(weights: ToyWeights, scene: ToyScene, targets: ToyTargets,
                loss_weights: LossWeights = LossWeights()) -> tuple[Var, dict[str, Var]]:
    """Build the tape for one forward pass; returns (loss, weight Vars)."""
    w = {name: Var(arr, name=name) for name, arr in weights.arrays.items()}
    grid, enc = scene.grid, scene.encoder
    ids = assign_cells(scene.cloud, grid)
    feats = decorate_points(scene.cloud, ids, grid, enc)

    x = Var(feats)
    x = relu(linear(x, w["mlp.weight"], w["mlp.bias"]))
    pooled, occupied = scatter_max_op(x, ids, grid.num_cells)
    dense = dense_from_cells(pooled, occupied, grid.dims)
    h1 = relu(conv2d(dense, w["conv1.kernel"], w["conv1.bias"]))
    h2 = relu(conv2d(h1, w["conv2.kernel"], w["conv2.bias"]))
    heat = conv2d(h2, w["heatmap.kernel"], w["heatmap.bias"])
    reg = conv2d(h2, w["reg.kernel"], w["reg.bias"])
    iou_map = conv2d(h2, w["iou.kernel"], w["iou.bias"])

    losses = [scale(focal_heatmap_loss(heat, targets.heatmap), loss_weights.heatmap)]
    if len(targets.center_rows):
        reg_at = gather_cells(reg, targets.center_rows, targets.center_cols)
        losses.append(scale(smooth_l1_loss(reg_at, targets.regression), loss_weights.box))
        iou_pred = sigmoid_op(gather_cells(iou_map, targets.center_rows,
                                           targets.center_cols))
        decoded = _decode_toy_boxes(reg_at.value, targets, grid)
        losses.append(scale(
            iou_regression_loss(iou_pred, decoded, targets.gt_boxes), loss_weights.iou))
    return var_sum(losses), w


def _decode_toy_boxes(reg_values: np.ndarray, targets: ToyTargets,
                      grid: GridSpec) -> list[Box3D]:
    """Decode current predictions at the GT centers (values only, no tape)."""
    boxes = []
    for i in range(reg_values.shape[0]):
        row, col = targets.center_rows[i], targets.center_cols[i]
        v = reg_values[i]
        x = grid.mins[0] + (row + v[0]) * grid.cells[0]
        y = grid.mins[1] + (col + v[1]) * grid.cells[1]
        dims = np.exp(np.clip(v[3:6], -6.0, 6.0))
        yaw = math.atan2(v[6], v[7]) if (v[6] != 0.0 or v[7] != 0.0) else 0.0
        boxes.append(Box3D(center=np.array([x, y, v[2]]), dims=dims,
                           yaw=wrap_angle(yaw)))
    return boxes


def forward_backward(weights: ToyWeights, scene: ToyScene, targets: ToyTargets,
                     loss_weights: LossWeights = LossWeights()
                     ) -> tuple[float, dict[str, np.ndarray]]:
    """One reverse-mode pass: (scalar loss, gradient for every weight)."""
    loss, w_vars = toy_forward(weights, scene, targets, loss_weights)
    backward(loss)
    grads = {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for name, v in w_vars.items()}
    return float(loss.value), grads


def toy_fit(scene: ToyScene, steps: int = 500, lr: float = 0.01,
            seed: int = 0, loss_weights: LossWeights = LossWeights()
            ) -> tuple[list[float], ToyWeights]:
    """Plain gradient descent on the restricted chain; the loss trace has one
    entry per step (pre-update), deterministic given the seed."""
    targets = make_toy_targets(scene)
    weights = ToyWeights.create(scene.grid, scene.encoder, seed=seed)
    trace: list[float] = []
    for _ in range(steps):
        loss, grads = forward_backward(weights, scene, targets, loss_weights)
        trace.append(loss)
        for name, g in grads.items():
            weights.arrays[name] -= lr * g
    return trace, weights


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference_grads(f, arrays: dict[str, np.ndarray],
                            eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of named float64 arrays."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((diff / denom).max()) if diff.size else 0.0


def _gc_linear(rng):
    x = Var(rng.normal(size=(4, 3)))
    w = Var(rng.normal(size=(5, 3)))
    b = Var(rng.normal(size=5))
    return lambda: var_sum([l1_loss(linear(x, w, b), np.zeros((4, 5)))]), \
        {"x": x, "w": w, "b": b}


def _gc_relu(rng):
    # keep samples away from the kink so the difference quotient is clean
    v = rng.normal(size=(6, 4))
    v = np.where(np.abs(v) < 0.1, v + 0.2 * np.sign(v) + 0.01, v)
    x = Var(v)
    return lambda: l1_loss(relu(x), np.zeros_like(v)), {"x": x}


def _gc_conv2d(rng):
    x = Var(rng.normal(size=(3, 5, 5)))
    k = Var(rng.normal(size=(2, 3, 3, 3)))
    b = Var(rng.normal(size=2))
    return lambda: l1_loss(conv2d(x, k, b), np.zeros((2, 5, 5))), \
        {"x": x, "k": k, "b": b}


def _gc_scatter_max(rng):
    x = Var(rng.normal(size=(10, 4)))
    ids = rng.integers(0, 5, size=10).astype(np.int64)

    def f():
        pooled, _ = scatter_max_op(x, ids, 5)
        return l1_loss(pooled, np.zeros_like(pooled.value))
    return f, {"x": x}


def _gc_focal(rng):
    z = Var(rng.normal(size=(1, 4, 4)))
    t = np.zeros((1, 4, 4))
    t[0, 1, 2] = 1.0
    t[0, 3, 0] = 0.6  # soft negative exercises the (1 - t)^4 weight
    return lambda: focal_heatmap_loss(z, t), {"z": z}


def _gc_l1(rng):
    x = Var(rng.normal(size=(5, 3)) + 0.3)
    t = rng.normal(size=(5, 3))
    return lambda: l1_loss(x, t), {"x": x}


def _gc_smooth_l1(rng):
    x = Var(rng.normal(size=(5, 3)) + 0.3)
    t = rng.normal(size=(5, 3))
    # keep |pred - target| away from the delta kink
    bad = np.abs(np.abs(x.value - t) - 0.1) < 0.02
    t = np.where(bad, t + 0.05, t)
    return lambda: smooth_l1_loss(x, t), {"x": x}


def _gc_sigmoid(rng):
    x = Var(rng.normal(size=(4, 4)))
    t = rng.uniform(size=(4, 4))
    return lambda: l1_loss(sigmoid_op(x), t), {"x": x}


def _gc_gather(rng):
    x = Var(rng.normal(size=(3, 6, 6)))
    rows = rng.integers(0, 6, size=4).astype(np.int64)
    cols = rng.integers(0, 6, size=4).astype(np.int64)
    return lambda: l1_loss(gather_cells(x, rows, cols), np.zeros((4, 3))), {"x": x}


GRADCHECK_OPS = {
    "linear": _gc_linear,
    "relu": _gc_relu,
    "conv2d": _gc_conv2d,
    "scatter_max": _gc_scatter_max,
    "focal_heatmap_loss": _gc_focal,
    "l1_loss": _gc_l1,
    "smooth_l1_loss": _gc_smooth_l1,
    "sigmoid": _gc_sigmoid,
    "gather_cells": _gc_gather,
}


def gradcheck_op(op_name: str, seed: int, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences for
    one registered op at one seed."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    build = GRADCHECK_OPS[op_name]
    f, inputs = build(rng)
    loss = f()
    backward(loss)
    analytic = {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for name, v in inputs.items()}
    arrays = {name: v.value for name, v in inputs.items()}
    numeric = finite_difference_grads(lambda: float(f().value), arrays, eps=eps)
    return max(max_rel_error(analytic[name], numeric[name]) for name in inputs)
