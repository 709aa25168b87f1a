"""Dynamic-flow estimators, the bucketed flow loss, and a training loop.

Five estimator kinds share one entry point, :func:`estimate_flow`:

* ``oracle``   returns the supplied ground-truth field unchanged.
* ``zero``     always returns zeros (the EMC-only baseline).
* ``block-matching``  per-cell argmin-SSD patch search, no learning.
* ``learned-motion``  a small conv net regressing displacement directly,
  with the time offset appended as a constant input channel.
* ``learned-velocity`` the same net predicting a velocity field that is
  multiplied by the time offset afterwards, so a zero offset forces an
  exactly zero displacement and scaling the offset rescales the output.

The learned stack is deliberately compact so its gradients can be written by
hand and verified against finite differences: a 1x1 input compression to
``hidden`` channels with rectification, then two 3x3 shift-invariant layers
(hidden -> hidden rectified, hidden -> 2 linear), zero-padded.

The loss follows the bucketed scheme used for scene-flow supervision: cells
are grouped by ground-truth speed (thresholds 0.4 and 1.0 m/s), the mean
L2 distance between predicted and true flow is taken per bucket, and the
three means are summed. Background cells have speed 0 and land in the first
bucket, which penalizes hallucinated motion on static content.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .gtflow import FlowField
from .scenesim import BevFeatureMap

__all__ = [
    "FlowEstimatorSpec",
    "FlowLossReport",
    "TrainHyper",
    "TrainingDivergedError",
    "SPEED_BUCKETS",
    "estimate_flow",
    "estimate_velocity",
    "flow_loss",
    "init_learned_params",
    "train_estimator",
    "smoothed_curve",
    "gradient_check",
    "save_estimator",
    "load_estimator",
    "write_loss_curve",
]

SPEED_BUCKETS = (0.4, 1.0)  # m/s; cells bucket as <=0.4, (0.4, 1], >1

KINDS = ("oracle", "zero", "block-matching", "learned-motion", "learned-velocity")
LEARNED_KINDS = ("learned-motion", "learned-velocity")

ESTIMATOR_MAGIC = b"BFPR"
ESTIMATOR_FORMAT_VERSION = 1
_EST_HEADER = struct.Struct("<4sIBBIIIQ")
_KIND_CODES = {"learned-motion": 1, "learned-velocity": 2}
_DIR_CODES = {"forward": 0, "backward": 1}


@dataclass
class FlowEstimatorSpec:
    """Configuration (and, for learned kinds, parameters) of an estimator.

    ``direction`` tags the fields the estimator produces; a spec trained on
    backward ground truth emits backward-tagged fields.
    """

    kind: str
    direction: str = "forward"
    patch_radius: int = 2
    search_radius: int = 8
    c0: int = 2
    c1: int = 2
    hidden: int = 8
    params: np.ndarray | None = None
    _bm_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"bad direction {self.direction!r}")
        if self.kind == "block-matching" and not self.search_radius >= self.patch_radius >= 1:
            raise ValueError(
                f"need search_radius >= patch_radius >= 1, got "
                f"{self.search_radius} / {self.patch_radius}"
            )
        if self.params is not None and not np.all(np.isfinite(self.params)):
            raise ValueError("estimator parameters must be finite")

    @property
    def in_channels(self) -> int:
        extra = 1 if self.kind == "learned-motion" else 0
        return self.c0 + self.c1 + extra


@dataclass(frozen=True)
class FlowLossReport:
    bucket_means: tuple[float, float, float]
    bucket_counts: tuple[int, int, int]
    total: float


@dataclass(frozen=True)
class TrainHyper:
    """Subgradient descent settings.

    The bucketed loss is piecewise smooth with constant-magnitude gradients,
    so a decaying step (classic subgradient schedule) plus heavy-ball
    momentum is what actually converges; a constant step limit-cycles.
    """

    step_size: float = 0.1
    epochs: int = 60
    batch_size: int = 0  # 0 = full batch
    momentum: float = 0.9
    step_decay: float = 0.02  # step at epoch k is step_size / (1 + step_decay * k)
    loss_weights: tuple[float, float, float] = (1.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.step_size < 0:
            raise ValueError("epochs and step_size must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.step_decay < 0:
            raise ValueError("step_decay must be >= 0")
        if self.loss_weights[1] != 0.0 or self.loss_weights[2] != 0.0:
            # detection losses need a full detector; only the flow term trains
            raise ValueError("loss_weights[1:] must be zero in this artifact")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# bucketed flow loss


def _bucket_masks(gt_data: np.ndarray, dt: float):
    speed = np.hypot(gt_data[..., 0], gt_data[..., 1]) / dt
    b1 = speed <= SPEED_BUCKETS[0]
    b2 = (speed > SPEED_BUCKETS[0]) & (speed <= SPEED_BUCKETS[1])
    b3 = speed > SPEED_BUCKETS[1]
    return b1, b2, b3


def flow_loss(pred: FlowField, gt: FlowField, dt: float) -> FlowLossReport:
    """Sum over speed buckets of the mean L2 flow error within each bucket."""
    if pred.grid != gt.grid:
        raise ValueError("flow field grids differ")
    if pred.direction != gt.direction:
        raise ValueError(f"direction tags differ: {pred.direction} vs {gt.direction}")
    if not dt > 0:
        raise ValueError(f"dt must be positive for speed bucketing, got {dt}")
    err = np.hypot(pred.data[..., 0] - gt.data[..., 0], pred.data[..., 1] - gt.data[..., 1])
    means = []
    counts = []
    for mask in _bucket_masks(gt.data, dt):
        n = int(mask.sum())
        counts.append(n)
        means.append(float(err[mask].mean()) if n else 0.0)
    return FlowLossReport(
        bucket_means=tuple(means), bucket_counts=tuple(counts), total=float(sum(means))
    )


def _batch_bucket_masks(gts: np.ndarray, dts: np.ndarray):
    """Bucket masks for a batch; gts is (n, h, w, 2), dts is (n,)."""
    speed = np.hypot(gts[..., 0], gts[..., 1]) / dts[:, None, None]
    return (
        speed <= SPEED_BUCKETS[0],
        (speed > SPEED_BUCKETS[0]) & (speed <= SPEED_BUCKETS[1]),
        speed > SPEED_BUCKETS[1],
    )


# ---------------------------------------------------------------------------
# learned estimator: compact conv net with hand-written gradients


class _Net:
    """1x1 compression + two 3x3 layers, channels-first layout internally."""

    def __init__(self, c_in: int, hidden: int):
        self.c_in = c_in
        self.hidden = hidden
        self.shapes = [
            (hidden, c_in),
            (hidden,),
            (hidden, hidden, 3, 3),
            (hidden,),
            (2, hidden, 3, 3),
            (2,),
        ]
        self.n_params = sum(int(np.prod(s)) for s in self.shapes)

    def unpack(self, params: np.ndarray):
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        out = []
        pos = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(params[pos : pos + size].reshape(shape))
            pos += size
        return out

    def init(self, seed: int) -> np.ndarray:
        # 0.3 keeps enough feature contrast through the rectifications for the
        # box/background gradients not to cancel early in training
        rng = np.random.default_rng(seed)
        return rng.normal(0.0, 0.3, size=self.n_params)

    @staticmethod
    def _im2col(x: np.ndarray) -> np.ndarray:
        """(n, c, h, w) -> (n, 9c, h*w) with the 3x3 taps stacked tap-major."""
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((n, 9 * c, h * w))
        k = 0
        for dy in range(3):
            for dx in range(3):
                cols[:, k * c : (k + 1) * c, :] = xp[:, :, dy : dy + h, dx : dx + w].reshape(
                    n, c, h * w
                )
                k += 1
        return cols

    @staticmethod
    def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
        n, c, h, w = shape
        dxp = np.zeros((n, c, h + 2, w + 2))
        k = 0
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy : dy + h, dx : dx + w] += dcols[
                    :, k * c : (k + 1) * c, :
                ].reshape(n, c, h, w)
                k += 1
        return dxp[:, :, 1 : h + 1, 1 : w + 1]

    @staticmethod
    def _conv3(cols: np.ndarray, w: np.ndarray, b: np.ndarray, hw_shape) -> np.ndarray:
        h, wd = hw_shape
        wmat = w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)
        out = np.matmul(wmat, cols).reshape(cols.shape[0], w.shape[0], h, wd)
        return out + b[None, :, None, None]

    @staticmethod
    def _conv3_backward(cols: np.ndarray, w: np.ndarray, g: np.ndarray, in_shape):
        n, co = g.shape[:2]
        gmat = g.reshape(n, co, -1)
        dwmat = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        dw = dwmat.reshape(co, 3, 3, w.shape[1]).transpose(0, 3, 1, 2)
        wmat = w.transpose(0, 2, 3, 1).reshape(co, -1)
        dcols = np.matmul(wmat.T, gmat)
        dx = _Net._col2im(dcols, in_shape)
        return dw, g.sum(axis=(0, 2, 3)), dx

    def forward(self, params: np.ndarray, x: np.ndarray):
        """x is (n, c_in, h, w); returns (n, 2, h, w) and a cache for backward."""
        w1, b1, w2, b2, w3, b3 = self.unpack(params)
        n, _, h, wd = x.shape
        pre1 = (w1 @ x.reshape(n, self.c_in, h * wd)).reshape(n, self.hidden, h, wd)
        pre1 = pre1 + b1[None, :, None, None]
        h1 = np.maximum(pre1, 0.0)
        cols1 = self._im2col(h1)
        pre2 = self._conv3(cols1, w2, b2, (h, wd))
        h2 = np.maximum(pre2, 0.0)
        cols2 = self._im2col(h2)
        out = self._conv3(cols2, w3, b3, (h, wd))
        return out, (x, pre1, cols1, pre2, cols2)

    def backward(self, params: np.ndarray, cache, g_out: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2, w3, b3 = self.unpack(params)
        x, pre1, cols1, pre2, cols2 = cache
        n, _, h, wd = x.shape
        hidden_shape = (n, self.hidden, h, wd)
        dw3, db3, dh2 = self._conv3_backward(cols2, w3, g_out, hidden_shape)
        dpre2 = dh2 * (pre2 > 0.0)
        dw2, db2, dh1 = self._conv3_backward(cols1, w2, dpre2, hidden_shape)
        dpre1 = dh1 * (pre1 > 0.0)
        gmat = dpre1.reshape(n, self.hidden, h * wd)
        dw1 = np.matmul(gmat, x.reshape(n, self.c_in, h * wd).transpose(0, 2, 1)).sum(axis=0)
        db1 = dpre1.sum(axis=(0, 2, 3))
        return np.concatenate([a.ravel() for a in (dw1, db1, dw2, db2, dw3, db3)])


def _net_for(spec: FlowEstimatorSpec) -> _Net:
    return _Net(spec.in_channels, spec.hidden)


def _stack_inputs(spec: FlowEstimatorSpec, f0: BevFeatureMap, f1: BevFeatureMap, dt: float):
    if f0.channels != spec.c0 or f1.channels != spec.c1:
        raise ValueError(
            f"estimator expects {spec.c0}+{spec.c1} channels, "
            f"got {f0.channels}+{f1.channels}"
        )
    planes = [np.moveaxis(f0.data, 2, 0), np.moveaxis(f1.data, 2, 0)]
    if spec.kind == "learned-motion":
        planes.append(np.full((1, f0.grid.height, f0.grid.width), dt))
    return np.concatenate(planes, axis=0)


def init_learned_params(spec: FlowEstimatorSpec, seed: int = 0) -> FlowEstimatorSpec:
    """A copy of the spec with freshly initialized parameters."""
    if spec.kind not in LEARNED_KINDS:
        raise ValueError(f"{spec.kind} has no parameters to initialize")
    return replace(spec, params=_net_for(spec).init(seed))


# ---------------------------------------------------------------------------
# block matching


def _map_key(f0: BevFeatureMap, f1: BevFeatureMap) -> str:
    h = hashlib.sha1()
    h.update(f0.data.tobytes())
    h.update(f1.data.tobytes())
    return h.hexdigest()


def _window_sum_valid(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum of every full (2r+1)^2 window of ``a``, via an integral image.

    Cumulative sums keep small-integer inputs exact, so SSD ties between
    candidate offsets resolve identically to a direct per-patch summation.
    """
    size = 2 * radius + 1
    cs = np.pad(a.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
    return cs[size:, size:] - cs[:-size, size:] - cs[size:, :-size] + cs[:-size, :-size]


def _block_match_displacement(
    f0: BevFeatureMap, f1: BevFeatureMap, patch_radius: int, search_radius: int
) -> np.ndarray:
    """Per-cell displacement (cells) minimizing patch SSD, f0 against f1.

    Patches reaching past the grid compare against zero padding on both
    sides. Offsets are scanned in order of increasing magnitude (row-major
    within equal magnitude), and the first minimum wins, so flat regions
    resolve to zero displacement.
    """
    h, w = f0.grid.height, f0.grid.width
    p, rad = patch_radius, search_radius
    offsets = sorted(
        ((dy, dx) for dy in range(-rad, rad + 1) for dx in range(-rad, rad + 1)),
        key=lambda o: (o[0] * o[0] + o[1] * o[1], o[0], o[1]),
    )
    f0e = np.pad(f0.data, ((p, p), (p, p), (0, 0)))
    f1e = np.pad(f1.data, ((rad + p, rad + p), (rad + p, rad + p), (0, 0)))
    costs = np.empty((len(offsets), h, w))
    for i, (dy, dx) in enumerate(offsets):
        shifted = f1e[rad + dy : rad + dy + h + 2 * p, rad + dx : rad + dx + w + 2 * p]
        sq = ((f0e - shifted) ** 2).sum(axis=2)
        costs[i] = _window_sum_valid(sq, p)
    best = np.argmin(costs, axis=0)
    off = np.asarray(offsets)
    disp = np.empty((h, w, 2))
    disp[:, :, 0] = off[best, 1]  # dx
    disp[:, :, 1] = off[best, 0]  # dy
    return disp


# ---------------------------------------------------------------------------
# estimation entry points


def estimate_flow(
    spec: FlowEstimatorSpec,
    f0: BevFeatureMap,
    f1: BevFeatureMap,
    dt: float,
    gt: FlowField | None = None,
) -> FlowField:
    """Estimate the dynamic flow between two EMC-aligned feature maps.

    Returns a field tagged with the spec's direction, in meters. For the
    velocity formulation the result is exactly the predicted velocity field
    times ``dt``, so dt = 0 yields an exactly zero field.
    """
    if f0.grid != f1.grid:
        raise ValueError("feature map grids differ")
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    grid = f0.grid

    if spec.kind == "oracle":
        if gt is None:
            raise ValueError("oracle estimator requires the ground-truth field")
        return gt
    if spec.kind == "zero":
        return FlowField(grid, np.zeros((grid.height, grid.width, 2)), spec.direction, "m")
    if spec.kind == "block-matching":
        if dt == 0:
            return FlowField(grid, np.zeros((grid.height, grid.width, 2)), spec.direction, "m")
        key = _map_key(f0, f1)
        if key in spec._bm_cache:
            return FlowField(grid, spec._bm_cache[key] * dt, spec.direction, "m")
        disp = _block_match_displacement(f0, f1, spec.patch_radius, spec.search_radius)
        flow = disp * grid.cell
        spec._bm_cache[key] = flow / dt  # velocity, reused at other offsets
        return FlowField(grid, flow, spec.direction, "m")

    if spec.params is None:
        raise ValueError(f"{spec.kind} estimator has no parameters; train or init first")
    net = _net_for(spec)
    x = _stack_inputs(spec, f0, f1, dt)[None]
    out, _ = net.forward(spec.params, x)
    out = np.moveaxis(out[0], 0, 2)
    if spec.kind == "learned-velocity":
        out = out * dt
    return FlowField(grid, out, spec.direction, "m")


def estimate_velocity(
    spec: FlowEstimatorSpec,
    f0: BevFeatureMap,
    f1: BevFeatureMap,
    dt: float,
    gt: FlowField | None = None,
) -> FlowField:
    """Per-cell velocity field (m/s) implied by the estimator.

    The velocity formulation predicts it directly (independent of dt); other
    kinds divide their displacement by dt and therefore require dt > 0.
    """
    grid = f0.grid
    if spec.kind == "learned-velocity":
        if spec.params is None:
            raise ValueError("learned-velocity estimator has no parameters")
        net = _net_for(spec)
        out, _ = net.forward(spec.params, _stack_inputs(spec, f0, f1, dt)[None])
        return FlowField(grid, np.moveaxis(out[0], 0, 2), spec.direction, "m_per_s")
    if spec.kind == "zero":
        return FlowField(grid, np.zeros((grid.height, grid.width, 2)), spec.direction, "m_per_s")
    if not dt > 0:
        raise ValueError(f"{spec.kind} velocity needs dt > 0, got {dt}")
    flow = estimate_flow(spec, f0, f1, dt, gt)
    return FlowField(grid, flow.data / dt, flow.direction, "m_per_s")


# ---------------------------------------------------------------------------
# training


def _prepare_batch(spec: FlowEstimatorSpec, dataset):
    xs = []
    gts = []
    dts = []
    for f0, f1, dt, gt in dataset:
        if not dt > 0:
            raise ValueError("training samples need dt > 0 for speed bucketing")
        if gt.direction != spec.direction:
            raise ValueError(
                f"ground truth tagged {gt.direction!r} but estimator emits {spec.direction!r}"
            )
        xs.append(_stack_inputs(spec, f0, f1, dt))
        gts.append(gt.data)
        dts.append(dt)
    return np.stack(xs), np.stack(gts), np.asarray(dts)


def _batch_loss_and_grad(spec, net, params, xs, gts, dts, weight, want_grad=True):
    """Bucketed loss (averaged over the batch) and its parameter gradient.

    Returns (FlowLossReport, grad or None). The per-cell loss gradient is
    e / (r * n_bucket) scaled by the batch average and the loss weight; for
    the velocity formulation the chain rule adds the per-sample dt factor.
    """
    out, cache = net.forward(params, xs)
    n = xs.shape[0]
    pred = np.moveaxis(out, 1, 3)
    if spec.kind == "learned-velocity":
        pred = pred * dts[:, None, None, None]
    ex = pred[..., 0] - gts[..., 0]
    ey = pred[..., 1] - gts[..., 1]
    r = np.hypot(ex, ey)
    means = []
    counts_total = []
    scale = np.zeros_like(r)
    for mask in _batch_bucket_masks(gts, dts):
        counts = mask.sum(axis=(1, 2))
        counts_total.append(int(counts.sum()))
        denom = np.maximum(counts, 1)
        means.append(float(((r * mask).sum(axis=(1, 2)) / denom).mean()))
        scale += mask / denom[:, None, None]
    report = FlowLossReport(
        bucket_means=tuple(means),
        bucket_counts=tuple(counts_total),
        total=float(sum(means)),
    )
    if not want_grad:
        return report, None
    inv_r = np.divide(1.0, r, out=np.zeros_like(r), where=r > 0)
    coef = (weight / n) * scale * inv_r
    if spec.kind == "learned-velocity":
        coef = coef * dts[:, None, None]
    g_out = np.empty_like(out)
    g_out[:, 0] = ex * coef
    g_out[:, 1] = ey * coef
    return report, net.backward(params, cache, g_out)


def train_estimator(
    spec: FlowEstimatorSpec, dataset, hyper: TrainHyper
) -> tuple[FlowEstimatorSpec, list[FlowLossReport]]:
    """Gradient-descent training of a learned estimator on (f0, f1, dt, gt) tuples.

    Returns the trained spec and the loss curve: the full-training-set
    bucketed loss before training and after every epoch. Raises
    :class:`TrainingDivergedError` if the loss goes non-finite.
    """
    if spec.kind not in LEARNED_KINDS:
        raise ValueError(f"cannot train estimator kind {spec.kind!r}")
    if not dataset:
        raise ValueError("training dataset is empty")
    net = _net_for(spec)
    params = spec.params.copy() if spec.params is not None else net.init(hyper.seed)
    xs, gts, dts = _prepare_batch(spec, dataset)
    n = xs.shape[0]
    weight = hyper.loss_weights[0]
    rng = np.random.default_rng(hyper.seed)

    # per-sample bucket masks are fixed by the ground truth; precompute once
    gt_speed = np.hypot(gts[..., 0], gts[..., 1]) / dts[:, None, None]
    masks = (
        gt_speed <= SPEED_BUCKETS[0],
        (gt_speed > SPEED_BUCKETS[0]) & (gt_speed <= SPEED_BUCKETS[1]),
        gt_speed > SPEED_BUCKETS[1],
    )
    mask_counts = [m.sum(axis=(1, 2)) for m in masks]
    total_counts = tuple(int(c.sum()) for c in mask_counts)

    def full_report(epoch: int) -> FlowLossReport:
        out, _ = net.forward(params, xs)
        if not np.all(np.isfinite(out)):
            raise TrainingDivergedError(epoch, float("nan"))
        pred = np.moveaxis(out, 1, 3)
        if spec.kind == "learned-velocity":
            pred = pred * dts[:, None, None, None]
        err = np.hypot(pred[..., 0] - gts[..., 0], pred[..., 1] - gts[..., 1])
        means = []
        for m, counts in zip(masks, mask_counts):
            per_sample = (err * m).sum(axis=(1, 2)) / np.maximum(counts, 1)
            means.append(float(per_sample.mean()))
        return FlowLossReport(tuple(means), total_counts, float(sum(means)))

    batch = n if hyper.batch_size in (0, None) else min(hyper.batch_size, n)
    velocity = np.zeros_like(params)
    curve = []
    if batch == n:
        # full batch: the pre-update loss of each epoch doubles as the curve
        # point, saving a second forward pass per epoch
        for epoch in range(hyper.epochs):
            step = hyper.step_size / (1.0 + hyper.step_decay * epoch)
            report, grad = _batch_loss_and_grad(spec, net, params, xs, gts, dts, weight)
            if not math.isfinite(report.total):
                raise TrainingDivergedError(epoch, report.total)
            curve.append(report)
            velocity = hyper.momentum * velocity - step * grad
            params += velocity
        curve.append(full_report(hyper.epochs))
    else:
        curve.append(full_report(0))
        for epoch in range(hyper.epochs):
            order = rng.permutation(n)
            step = hyper.step_size / (1.0 + hyper.step_decay * epoch)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                _, grad = _batch_loss_and_grad(
                    spec, net, params, xs[idx], gts[idx], dts[idx], weight
                )
                velocity = hyper.momentum * velocity - step * grad
                params += velocity
            report = full_report(epoch)
            if not math.isfinite(report.total):
                raise TrainingDivergedError(epoch, report.total)
            curve.append(report)
    return replace(spec, params=params), curve


def smoothed_curve(curve) -> list[float]:
    """Best-so-far envelope of the per-epoch loss totals (monotone nonincreasing)."""
    out = []
    best = math.inf
    for rep in curve:
        best = min(best, rep.total)
        out.append(best)
    return out


def gradient_check(spec: FlowEstimatorSpec, sample, epsilon: float) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if spec.kind not in LEARNED_KINDS:
        raise ValueError("gradient check applies to learned kinds only")
    if spec.params is None:
        raise ValueError("spec has no parameters")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    net = _net_for(spec)
    f0, f1, dt, gt = sample
    xs = _stack_inputs(spec, f0, f1, dt)[None]
    gts = gt.data[None]
    dts = np.asarray([dt])
    _, analytic = _batch_loss_and_grad(spec, net, spec.params, xs, gts, dts, 1.0)

    params = spec.params.copy()
    worst = 0.0
    for i in range(params.size):
        saved = params[i]
        params[i] = saved + epsilon
        hi, _ = _batch_loss_and_grad(spec, net, params, xs, gts, dts, 1.0, want_grad=False)
        params[i] = saved - epsilon
        lo, _ = _batch_loss_and_grad(spec, net, params, xs, gts, dts, 1.0, want_grad=False)
        params[i] = saved
        numeric = (hi.total - lo.total) / (2.0 * epsilon)
        denom = max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# persistence


def save_estimator(spec: FlowEstimatorSpec, path) -> None:
    if spec.kind not in _KIND_CODES:
        raise ValueError(f"only learned estimators are persisted, not {spec.kind!r}")
    if spec.params is None:
        raise ValueError("spec has no parameters to save")
    header = _EST_HEADER.pack(
        ESTIMATOR_MAGIC,
        ESTIMATOR_FORMAT_VERSION,
        _KIND_CODES[spec.kind],
        _DIR_CODES[spec.direction],
        spec.c0,
        spec.c1,
        spec.hidden,
        spec.params.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(spec.params.astype("<f8").tobytes())


def load_estimator(path) -> FlowEstimatorSpec:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, kind_code, dir_code, c0, c1, hidden, n = _EST_HEADER.unpack_from(raw)
    if magic != ESTIMATOR_MAGIC:
        raise ValueError(f"not an estimator file (magic {magic!r})")
    if version != ESTIMATOR_FORMAT_VERSION:
        raise ValueError(f"unsupported estimator format version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}[kind_code]
    direction = {v: k for k, v in _DIR_CODES.items()}[dir_code]
    params = np.frombuffer(raw, dtype="<f8", offset=_EST_HEADER.size, count=n).copy()
    return FlowEstimatorSpec(
        kind=kind, direction=direction, c0=c0, c1=c1, hidden=hidden, params=params
    )


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "b1", "b2", "b3"])
        for epoch, rep in enumerate(curve):
            writer.writerow([epoch, repr(rep.total), *(repr(m) for m in rep.bucket_means)])
