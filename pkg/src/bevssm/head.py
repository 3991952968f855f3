"""Query-based detection head over a fused BEV grid.

A fixed set of learned queries carries content embeddings and 2-d reference
points (kept as logits of normalized grid coordinates).  Each decoder layer:

1. mixes the queries as a sequence with a gated state-space block
   (optionally run in both directions and averaged),
2. gathers BEV features by deformable sampling around each query's
   reference point,
3. applies a feed-forward block, and
4. nudges the reference point through an inverse-sigmoid update.

Every layer emits classification logits and box regressions so auxiliary
supervision can reach intermediate layers.  Box centers come from the
reference points, sizes are exponentiated (so zero predicts a unit box),
yaw is a (sin, cos) pair and velocity is a plain linear readout.

Matching between predictions and ground truth is a minimum-cost one-to-one
assignment (Hungarian); the loss is weighted cross-entropy with a background
class plus L1 terms on the matched boxes, summed in prediction-index order
so it is exactly invariant to the ordering of the ground-truth list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Parameter, Tensor
from .bevseq import BevGrid, wrap_angle
from .errors import ConfigError, DimensionError, NumericError
from .layers import Linear, LayerNorm, Module, make_rng
from .ssd import Mamba2Block, Mamba2Config
from . import ops


# ---------------------------------------------------------------------------
# detection containers


@dataclass
class Box:
    """An axis-aligned-in-yaw box on the ground plane, velocities in m/s."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    vx: float
    vy: float
    cls: int
    score: float = 1.0


@dataclass
class DetectionSet:
    """All boxes attributed to one frame."""

    frame: int
    boxes: list

    def check_extent(self, extent: float, slack: float = 0.1) -> None:
        limit = extent * (1.0 + slack)
        for b in self.boxes:
            if abs(b.cx) > limit or abs(b.cy) > limit:
                raise DimensionError(
                    f"box center ({b.cx:.2f}, {b.cy:.2f}) outside "
                    f"+-{limit:.2f} (frame {self.frame})")


# ---------------------------------------------------------------------------
# head configuration


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int
    channels: int = 16
    num_queries: int = 32
    d_model: int = 32
    layers: int = 2
    attn_heads: int = 2
    attn_points: int = 4
    mixer_heads: int = 2
    mixer_headdim: int = 16
    mixer_statedim: int = 8
    mixer_conv_width: int = 2
    bidirectional: bool = False
    background_weight: float = 0.1
    # matching cost weights
    match_cls: float = 1.0
    match_l2: float = 5.0
    # loss term weights
    w_cls: float = 1.0
    w_center: float = 0.25
    w_size: float = 1.0
    w_yaw: float = 1.0
    w_vel: float = 0.25

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_queries < 1 or self.layers < 1:
            raise ConfigError("num_queries and layers must be >= 1")
        if self.d_model % self.attn_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by attn_heads {self.attn_heads}")
        if self.background_weight <= 0:
            raise ConfigError("background_weight must be positive")

    def mixer(self) -> Mamba2Config:
        return Mamba2Config(d_model=self.d_model, nheads=self.mixer_heads,
                            headdim=self.mixer_headdim,
                            statedim=self.mixer_statedim,
                            conv_width=self.mixer_conv_width,
                            chunk=max(self.num_queries, 1))


@dataclass
class RawPredictions:
    """Tensor-valued outputs of one decoder layer for one frame."""

    logits: Tensor        # (Q, K+1), last column is background
    center: Tensor        # (Q, 2) meters (cx, cy)
    size: Tensor          # (Q, 2) meters (length, width)
    yaw_sc: Tensor        # (Q, 2) raw (sin, cos), not normalized
    vel: Tensor           # (Q, 2) m/s

    @property
    def num_queries(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def class_probs(self) -> np.ndarray:
        z = self.logits.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def to_boxes(self) -> list:
        """One box per query; score is the best non-background probability."""
        probs = self.class_probs()
        boxes = []
        for q in range(self.num_queries):
            fg = probs[q, :-1]
            cls = int(np.argmax(fg))
            sin_r, cos_r = self.yaw_sc.data[q]
            boxes.append(Box(
                cx=float(self.center.data[q, 0]),
                cy=float(self.center.data[q, 1]),
                length=float(self.size.data[q, 0]),
                width=float(self.size.data[q, 1]),
                yaw=float(np.arctan2(sin_r, cos_r)),
                vx=float(self.vel.data[q, 0]),
                vy=float(self.vel.data[q, 1]),
                cls=cls,
                score=float(fg[cls])))
        return boxes


# ---------------------------------------------------------------------------
# decoder layer


def _xy_to_rowcol(pts_xy):
    """Swap (x, y) cell coordinates to the (row, col) order sampling wants.

    Grids store y down axis 0 and x down axis 1 while boxes and reference
    points keep the metric (x, y) order, so the two components cross over
    at every sampling site.
    """
    x = ops.narrow(pts_xy, 1, 0, 1)
    y = ops.narrow(pts_xy, 1, 1, 1)
    return ops.concat([y, x], axis=1)


class _DeformableCross(Module):
    """Single-level deformable sampling of BEV features by the queries."""

    def __init__(self, cfg: HeadConfig, rng, dtype):
        m, k, d = cfg.attn_heads, cfg.attn_points, cfg.d_model
        self.cfg = cfg
        self.offset = Linear(d, m * k * 2, rng=rng, dtype=dtype)
        self.offset.weight.data[:] = 0.0
        self.offset.bias.data[:] = self._ring_bias(m, k).astype(dtype)
        self.score = Linear(d, m * k, rng=rng, dtype=dtype)
        self.score.weight.data[:] = 0.0
        self.score.bias.data[:] = 0.0
        self.out = Linear(d, d, rng=rng, dtype=dtype)

    @staticmethod
    def _ring_bias(heads: int, points: int, reach: float = 7.0) -> np.ndarray:
        """Spiral of sample offsets out to ``reach`` cells.

        Angles rotate point-by-point as well as head-by-head so the spiral
        has no angular gaps; radii grow linearly so a query sees both its
        immediate neighborhood and the far side of its catchment basin.
        """
        bias = np.zeros((heads, points, 2))
        for h in range(heads):
            for p in range(points):
                ang = 2.0 * np.pi * (h / heads + p / (heads * points))
                r = reach * (p + 1) / points
                bias[h, p] = (r * np.sin(ang), r * np.cos(ang))
        return bias.reshape(-1)

    def __call__(self, content, ref_cells, value_map):
        """content (Q,d), ref_cells (Q,2) fractional (x, y) cells, value (H,W,d)."""
        cfg = self.cfg
        m, k, d = cfg.attn_heads, cfg.attn_points, cfg.d_model
        dm = d // m
        q = content.shape[0]
        ref_rc = _xy_to_rowcol(ref_cells)
        off = ops.reshape(self.offset(content), (q, m, k, 2))
        wts = ops.reshape(ops.softmax(ops.reshape(self.score(content),
                                                  (q * m, k))), (q, m, k, 1))
        heads = []
        for h in range(m):
            vmap = ops.narrow(value_map, 2, h * dm, dm)
            off_h = ops.reshape(ops.narrow(off, 1, h, 1), (q, k, 2))
            w_h = ops.reshape(ops.narrow(wts, 1, h, 1), (q, k, 1))
            pts = ops.reshape(ops.add(off_h, ops.reshape(ref_rc, (q, 1, 2))),
                              (q * k, 2))
            sampled = ops.reshape(ops.bilinear_sample(vmap, pts), (q, k, dm))
            heads.append(ops.sum_(ops.mul(sampled, w_h), axis=1))
        return self.out(ops.concat(heads, axis=-1))


class _DecoderLayer(Module):

    def __init__(self, cfg: HeadConfig, rng, dtype):
        d = cfg.d_model
        self.cfg = cfg
        self.mixer = Mamba2Block(cfg.mixer(), rng=rng, dtype=dtype)
        self.norm_mix = LayerNorm(d, dtype=dtype)
        self.cross = _DeformableCross(cfg, rng, dtype)
        self.norm_cross = LayerNorm(d, dtype=dtype)
        self.ffn_up = Linear(d, 2 * d, rng=rng, dtype=dtype)
        self.ffn_down = Linear(2 * d, d, rng=rng, dtype=dtype)
        self.norm_ffn = LayerNorm(d, dtype=dtype)
        self.ref_update = Linear(d, 2, rng=rng, dtype=dtype)
        self.cls_head = Linear(d, cfg.num_classes + 1, rng=rng, dtype=dtype)
        self.box_head = Linear(d, 6, rng=rng, dtype=dtype)

    def _mix(self, content):
        if not self.cfg.bidirectional:
            return self.mixer(content)
        rev = np.arange(content.shape[0])[::-1].copy()
        fwd = self.mixer(content)
        bwd = ops.take_rows(self.mixer(ops.take_rows(content, rev)), rev)
        return ops.mul(ops.add(fwd, bwd), 0.5)

    def __call__(self, content, ref_logits, value_map, grid: BevGrid):
        content = self.norm_mix(ops.add(content, self._mix(content)))
        ref_norm = ops.sigmoid(ref_logits)                     # (Q,2) in [0,1]
        ref_cells = ops.sub(ops.mul(ref_norm, float(grid.size)), 0.5)
        content = self.norm_cross(
            ops.add(content, self.cross(content, ref_cells, value_map)))
        content = self.norm_ffn(
            ops.add(content, self.ffn_down(ops.silu(self.ffn_up(content)))))
        new_ref_logits = ops.add(ref_logits, self.ref_update(content))

        span = 2.0 * grid.extent
        center = ops.sub(ops.mul(ops.sigmoid(new_ref_logits), span), grid.extent)
        box = self.box_head(content)
        raw = RawPredictions(
            logits=self.cls_head(content),
            center=center,
            size=ops.exp(ops.narrow(box, 1, 0, 2)),
            yaw_sc=ops.narrow(box, 1, 2, 2),
            vel=ops.narrow(box, 1, 4, 2))
        return content, new_ref_logits, raw


class DetectionHead(Module):
    """Stack of decoder layers over learned queries and reference points."""

    def __init__(self, cfg: HeadConfig, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        self.cfg = cfg
        d, qn = cfg.d_model, cfg.num_queries
        self.input_proj = Linear(cfg.channels, d, rng=rng, dtype=dtype)
        scale = 1.0 / np.sqrt(d)
        self.query_embed = Parameter(rng.normal(0.0, scale, (qn, d)), dtype=dtype)
        self.pos_embed = Parameter(rng.normal(0.0, scale, (qn, d)), dtype=dtype)
        init_ref = rng.uniform(0.12, 0.88, (qn, 2))
        self.ref_logits = Parameter(np.log(init_ref / (1.0 - init_ref)),
                                    dtype=dtype)
        # query preprocessing: each query reads the BEV feature under its
        # reference point, giving content a scene-dependent term from step one
        self.ref_tap = Linear(d, d, rng=rng, dtype=dtype)
        self.decoder = [_DecoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]

    def __call__(self, bev: BevGrid) -> list[RawPredictions]:
        """Decode one grid; returns per-layer predictions (last is final)."""
        if bev.channels != self.cfg.channels:
            raise DimensionError(
                f"head built for {self.cfg.channels} channels, "
                f"grid has {bev.channels}")
        n = bev.size
        feats = ops.as_tensor(bev.data)
        value_map = ops.reshape(
            self.input_proj(ops.reshape(feats, (n * n, self.cfg.channels))),
            (n, n, self.cfg.d_model))

        ref_cells = ops.sub(ops.mul(ops.sigmoid(self.ref_logits), float(n)), 0.5)
        tap = self.ref_tap(ops.bilinear_sample(value_map, _xy_to_rowcol(ref_cells)))
        content = ops.add(ops.add(self.query_embed, self.pos_embed), tap)
        ref_logits = self.ref_logits
        outputs = []
        for layer in self.decoder:
            content, ref_logits, raw = layer(content, ref_logits, value_map, bev)
            outputs.append(raw)
        return outputs


# ---------------------------------------------------------------------------
# matching and loss


def match_cost_matrix(pred: RawPredictions, gt_boxes, w_cls: float,
                      w_l2: float) -> np.ndarray:
    """cost[q, j] = w_cls * (1 - p_q(class_j)) + w_l2 * ||center_q - center_j||."""
    probs = pred.class_probs()
    centers = pred.center.data
    cost = np.zeros((pred.num_queries, len(gt_boxes)))
    for j, b in enumerate(gt_boxes):
        if not 0 <= b.cls < pred.num_classes:
            raise ConfigError(
                f"gt class {b.cls} outside [0, {pred.num_classes})")
        dist = np.hypot(centers[:, 0] - b.cx, centers[:, 1] - b.cy)
        cost[:, j] = w_cls * (1.0 - probs[:, b.cls]) + w_l2 * dist
    return cost


def hungarian_match(pred: RawPredictions, gt_boxes, w_cls: float = 1.0,
                    w_l2: float = 5.0) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ground truth to queries.

    Returns (query_index, gt_index) pairs sorted by query index.  Requires
    at least as many queries as ground-truth boxes.
    """
    if not gt_boxes:
        return []
    if len(gt_boxes) > pred.num_queries:
        raise DimensionError(
            f"{len(gt_boxes)} ground-truth boxes exceed {pred.num_queries} queries")
    cost = match_cost_matrix(pred, gt_boxes, w_cls, w_l2)
    if not np.all(np.isfinite(cost)):
        raise NumericError("non-finite entries in the matching cost matrix")
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def detection_loss(pred: RawPredictions, gt_boxes, cfg: HeadConfig,
                   assignment=None):
    """Weighted CE over all queries plus L1 box terms on matched pairs.

    Returns ``(loss, breakdown)`` where breakdown holds plain floats per
    term.  With no ground truth the loss reduces to classification against
    the background class.
    """
    if assignment is None:
        assignment = hungarian_match(pred, gt_boxes, cfg.match_cls, cfg.match_l2)
    qn, kk = pred.num_queries, pred.num_classes

    targets = np.full(qn, kk, dtype=np.int64)
    for q, j in assignment:
        targets[q] = gt_boxes[j].cls
    weights = np.where(targets == kk, cfg.background_weight, 1.0)

    logp = ops.log_softmax(pred.logits)
    nll = ops.neg(ops.take_along_last(logp, targets))
    ce = ops.div(ops.sum_(ops.mul(nll, weights)), float(weights.sum()))

    breakdown = {}
    total = ops.mul(ce, cfg.w_cls)
    breakdown["cls"] = float(ce.data)

    if assignment:
        qs = np.array([q for q, _ in assignment])
        gt_center = np.array([[gt_boxes[j].cx, gt_boxes[j].cy]
                              for _, j in assignment])
        gt_size = np.array([[gt_boxes[j].length, gt_boxes[j].width]
                            for _, j in assignment])
        gt_yaw = np.array([[np.sin(gt_boxes[j].yaw), np.cos(gt_boxes[j].yaw)]
                           for _, j in assignment])
        gt_vel = np.array([[gt_boxes[j].vx, gt_boxes[j].vy]
                           for _, j in assignment])
        terms = (("center", pred.center, gt_center, cfg.w_center),
                 ("size", pred.size, gt_size, cfg.w_size),
                 ("yaw", pred.yaw_sc, gt_yaw, cfg.w_yaw),
                 ("vel", pred.vel, gt_vel, cfg.w_vel))
        for name, tens, target, weight in terms:
            picked = ops.take_rows(tens, qs)
            term = ops.mean_(ops.absolute(ops.sub(picked, target)))
            breakdown[name] = float(term.data)
            total = ops.add(total, ops.mul(term, weight))
    else:
        for name in ("center", "size", "yaw", "vel"):
            breakdown[name] = 0.0

    breakdown["total"] = float(total.data)
    breakdown["matches"] = len(assignment)
    return total, breakdown
