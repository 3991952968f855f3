"""Detection metrics by hand: AP by center distance, TP errors, NDS.

Builds a two-frame toy evaluation where you can follow every number, then
shows the two sanity anchors the metrics must satisfy: perfect predictions
score mAP = NDS = 1.0, and shuffling scores only reorders the curve.
"""
import numpy as np

from bevssm.head import Box, DetectionSet
from bevssm.metrics import ap_by_distance, evaluate, tp_errors

# Frame 0: two ground-truth objects of class 0.
gt = [DetectionSet(0, [Box(0.0, 0.0, 4.0, 2.0, 0.0, 1.0, 0.0, 0),
                       Box(10.0, 0.0, 4.0, 2.0, 0.0, 0.0, 0.0, 0)])]

# Three predictions: a close hit, a near miss 1.5 m off with a velocity
# half a meter per second too slow, and a duplicate.  Scores order them
# hit > miss > duplicate.
pred = [DetectionSet(0, [Box(0.2, 0.0, 4.0, 2.0, 0.0, 1.0, 0.0, 0, score=0.9),
                        Box(10.0, 1.5, 4.0, 2.0, 0.0, -0.5, 0.0, 0, score=0.8),
                        Box(0.3, 0.1, 4.0, 2.0, 0.0, 1.0, 0.0, 0, score=0.7)])]

# At a 0.5 m match radius only the first prediction is a true positive; at
# 2 m the near miss matches as well and recall reaches 1.
for th in (0.5, 1.0, 2.0, 4.0):
    ap = ap_by_distance(pred, gt, cls=0, dist_th=th)
    print(f"AP @ {th:3.1f} m: {ap:.4f}")

# TP errors are averaged over matched pairs only: here the translation
# error mixes the 0.2 m and 1.5 m offsets of the two matches at 2 m.
errs = tp_errors(pred, gt, cls=0, dist_th=2.0)
print("ATE:", round(errs["ate"], 4), " AVE:", round(errs["ave"], 4))

# Anchor 1: ground truth replayed as predictions is a perfect score.
perfect = [DetectionSet(0, [Box(b.cx, b.cy, b.length, b.width, b.yaw,
                                b.vx, b.vy, b.cls, score=1.0)
                            for b in gt[0].boxes])]
rep = evaluate(perfect, gt, num_classes=1)
print("gt as predictions:  mAP", rep.mean_ap, " NDS", rep.nds)

# Anchor 2: metrics only depend on score order, not score values.
rescored = [DetectionSet(0, [Box(b.cx, b.cy, b.length, b.width, b.yaw,
                                 b.vx, b.vy, b.cls, score=0.5 * b.score)
                             for b in pred[0].boxes])]
a = evaluate(pred, gt, num_classes=1)
b = evaluate(rescored, gt, num_classes=1)
print("score rescale changes nothing:", np.isclose(a.mean_ap, b.mean_ap))
