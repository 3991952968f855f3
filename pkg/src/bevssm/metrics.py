"""Detection metrics: center-distance AP, true-positive errors, composite score.

Matching is greedy in descending score order: each prediction grabs the
nearest still-unmatched ground-truth box of its class in its frame, and the
pair counts as a true positive when the center distance is within the
threshold.  AP is the 101-point interpolated precision averaged over recalls
above 0.1 with precision clipped at 0.1 and renormalized by 0.9, so a
perfect detector scores 1.0 and anything below the operating floor scores 0.

The composite score folds the mean AP over thresholds together with the four
true-positive error means, each mapped through (1 - min(1, err)).  Two
normalizations are provided: ``nds`` divides by 9 (five parts AP, four error
terms) and ``nds_ten`` divides by 10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bevseq import wrap_angle
from .errors import ConfigError, NumericError
from .head import Box, DetectionSet

TP_METRICS = ("ate", "ase", "aoe", "ave")


def _group_by_frame(sets: list[DetectionSet]) -> dict[int, list]:
    grouped: dict[int, list] = {}
    for ds in sets:
        grouped.setdefault(ds.frame, []).extend(ds.boxes)
    return grouped


def _accumulate(preds: list[DetectionSet], gts: list[DetectionSet],
                cls: int, dist_th: float):
    """Greedy score-ordered matching of one class at one distance threshold.

    Returns (tp, fp, matched pairs in match order, npos); tp/fp are 0/1
    arrays aligned with predictions sorted by descending score.
    """
    if dist_th <= 0:
        raise ConfigError(f"distance threshold must be positive, got {dist_th}")
    pred_frames = _group_by_frame(preds)
    gt_frames = _group_by_frame(gts)

    gt_use: dict[int, list] = {}
    npos = 0
    for frame, boxes in gt_frames.items():
        keep = [b for b in boxes if b.cls == cls]
        gt_use[frame] = keep
        npos += len(keep)

    pool = []
    for frame, boxes in pred_frames.items():
        for b in boxes:
            if b.cls == cls:
                if not np.isfinite(b.score):
                    raise NumericError(f"non-finite score in frame {frame}")
                pool.append((frame, b))
    pool.sort(key=lambda fb: -fb[1].score)

    taken: dict[int, set] = {frame: set() for frame in gt_use}
    tp, fp, pairs = [], [], []
    for frame, pb in pool:
        candidates = gt_use.get(frame, [])
        best_j, best_d = -1, np.inf
        for j, gb in enumerate(candidates):
            if j in taken.get(frame, set()):
                continue
            d = np.hypot(pb.cx - gb.cx, pb.cy - gb.cy)
            if d < best_d:
                best_d, best_j = d, j
        if best_j >= 0 and best_d <= dist_th:
            taken[frame].add(best_j)
            tp.append(1)
            fp.append(0)
            pairs.append((pb, candidates[best_j]))
        else:
            tp.append(0)
            fp.append(1)
    return np.array(tp), np.array(fp), pairs, npos


def ap_by_distance(preds: list[DetectionSet], gts: list[DetectionSet],
                   cls: int, dist_th: float, min_recall: float = 0.1,
                   min_precision: float = 0.1) -> float:
    """Interpolated average precision for one class at one threshold.

    Returns NaN when the class has no ground truth (the class is then
    excluded from mean AP), and 0.0 when it has ground truth but nothing
    was predicted.
    """
    tp, fp, _, npos = _accumulate(preds, gts, cls, dist_th)
    if npos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp_c = np.cumsum(tp).astype(np.float64)
    fp_c = np.cumsum(fp).astype(np.float64)
    rec = tp_c / npos
    prec = tp_c / (tp_c + fp_c)

    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_interp = np.interp(rec_interp, rec, prec, right=0.0)
    clipped = prec_interp[round(100 * min_recall) + 1:] - min_precision
    clipped[clipped < 0.0] = 0.0
    # the mean of 90 clipped values can overshoot 1.0 by a few ulps
    return float(min(1.0, clipped.mean() / (1.0 - min_precision)))


def tp_errors(preds: list[DetectionSet], gts: list[DetectionSet],
              cls: int, dist_th: float = 2.0) -> dict[str, float]:
    """Mean translation / size / orientation / velocity errors over matches.

    Size error is one minus the IoU of the two boxes aligned at a common
    center and yaw; orientation error is the absolute wrapped yaw gap.  With
    no matched pairs every error degrades to the worst value 1.0 and
    ``matches`` reports 0 so callers can tell the difference.
    """
    _, _, pairs, _ = _accumulate(preds, gts, cls, dist_th)
    if not pairs:
        return {"ate": 1.0, "ase": 1.0, "aoe": 1.0, "ave": 1.0, "matches": 0}
    ate = ase = aoe = ave = 0.0
    for pb, gb in pairs:
        ate += np.hypot(pb.cx - gb.cx, pb.cy - gb.cy)
        inter = min(pb.length, gb.length) * min(pb.width, gb.width)
        union = pb.length * pb.width + gb.length * gb.width - inter
        ase += 1.0 - inter / union
        aoe += abs(float(wrap_angle(pb.yaw - gb.yaw)))
        ave += np.hypot(pb.vx - gb.vx, pb.vy - gb.vy)
    n = len(pairs)
    return {"ate": ate / n, "ase": ase / n, "aoe": aoe / n, "ave": ave / n,
            "matches": n}


def nds(mean_ap: float, tp: dict[str, float]) -> float:
    """Composite score with the 9-way normalization (5 AP + 4 error parts)."""
    return _composite(mean_ap, tp, 9.0)


def nds_ten(mean_ap: float, tp: dict[str, float]) -> float:
    """Composite score variant dividing by 10 instead of 9."""
    return _composite(mean_ap, tp, 10.0)


def _composite(mean_ap: float, tp: dict[str, float], divisor: float) -> float:
    if not 0.0 <= mean_ap <= 1.0:
        raise ConfigError(f"mean AP must be in [0, 1], got {mean_ap}")
    total = 5.0 * mean_ap
    for key in TP_METRICS:
        err = tp[key]
        if err < 0 or not np.isfinite(err):
            raise ConfigError(f"{key} must be finite and >= 0, got {err}")
        total += 1.0 - min(1.0, err)
    return total / divisor


@dataclass
class MetricsReport:
    """Everything the evaluation produces, as plain floats."""

    ap: dict                      # (cls, dist_th) -> AP or NaN
    mean_ap: float
    per_class_tp: dict            # cls -> {ate, ase, aoe, ave, matches}
    tp: dict                      # mean over classes with ground truth
    nds: float
    nds_ten: float
    num_pred_boxes: int
    num_gt_boxes: int
    num_frames: int
    runtime_s: float = 0.0

    def summary_rows(self) -> list[str]:
        rows = [f"mAP {self.mean_ap:.4f}"]
        rows += [f"m{k.upper()} {self.tp[k]:.4f}" for k in TP_METRICS]
        rows += [f"NDS {self.nds:.4f}", f"NDS10 {self.nds_ten:.4f}"]
        return rows

    def csv_rows(self) -> list:
        """(metric, value) pairs in a fixed order; runtime is left out so
        identical runs produce byte-identical report files."""
        rows = [("map", self.mean_ap)]
        rows += [(f"m{k}", self.tp[k]) for k in TP_METRICS]
        rows += [("nds", self.nds), ("nds10", self.nds_ten)]
        for (cls, th) in sorted(self.ap):
            rows.append((f"ap_c{cls}_d{th:g}", self.ap[(cls, th)]))
        rows += [("pred_boxes", self.num_pred_boxes),
                 ("gt_boxes", self.num_gt_boxes),
                 ("frames", self.num_frames)]
        return rows


def evaluate(preds: list[DetectionSet], gts: list[DetectionSet],
             num_classes: int, thresholds=(0.5, 1.0, 2.0, 4.0),
             tp_dist: float = 2.0) -> MetricsReport:
    """Full evaluation over frames: per-class AP sweep, TP errors, composites."""
    ap = {}
    per_class_tp = {}
    classes_with_gt = []
    for cls in range(num_classes):
        for th in thresholds:
            ap[(cls, th)] = ap_by_distance(preds, gts, cls, th)
        per_class_tp[cls] = tp_errors(preds, gts, cls, tp_dist)
        if not np.isnan(ap[(cls, thresholds[0])]):
            classes_with_gt.append(cls)

    vals = [v for v in ap.values() if not np.isnan(v)]
    mean_ap = float(np.mean(vals)) if vals else 0.0

    tp_mean = {}
    for key in TP_METRICS:
        entries = [per_class_tp[c][key] for c in classes_with_gt]
        tp_mean[key] = float(np.mean(entries)) if entries else 1.0

    return MetricsReport(
        ap=ap,
        mean_ap=mean_ap,
        per_class_tp=per_class_tp,
        tp=tp_mean,
        nds=nds(mean_ap, tp_mean),
        nds_ten=nds_ten(mean_ap, tp_mean),
        num_pred_boxes=sum(len(p.boxes) for p in preds),
        num_gt_boxes=sum(len(g.boxes) for g in gts),
        num_frames=len({g.frame for g in gts}))
