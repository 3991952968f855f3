"""Metrics tests.

The AP fixture values are derived by hand below (explicit precision/recall
walks over the 101-point grid), not by trusting the implementation.
"""

import numpy as np
import pytest

from bevssm.errors import ConfigError
from bevssm.head import Box, DetectionSet
from bevssm.metrics import (TP_METRICS, ap_by_distance, evaluate, nds,
                            nds_ten, tp_errors)


def boxes(frame, rows):
    """rows: (cx, cy, l, w, yaw, vx, vy, cls, score)."""
    return DetectionSet(frame, [Box(*r) for r in rows])


def interp_ap_oracle(rec, prec, min_recall=0.1, min_precision=0.1):
    """Explicit 101-point walk, written independently of the library code.

    Precision at recall level r is linearly interpolated on the raw curve,
    zero beyond the highest achieved recall; a query landing exactly on a
    recall plateau reads the last (lowest-precision) point of the plateau.
    """
    total = 0.0
    count = 0
    for i in range(101):
        if i <= round(100 * min_recall):
            continue
        r = i / 100.0
        hits = [j for j in range(len(rec)) if rec[j] == r]
        if r > rec[-1]:
            p = 0.0
        elif hits:
            p = prec[hits[-1]]
        elif r < rec[0]:
            p = prec[0]
        else:
            j = 0
            while rec[j + 1] < r:
                j += 1
            w = (r - rec[j]) / (rec[j + 1] - rec[j])
            p = prec[j] + w * (prec[j + 1] - prec[j])
        total += max(0.0, p - min_precision)
        count += 1
    return total / count / (1.0 - min_precision)


class TestApFixture:
    def test_two_gt_one_hit_one_miss(self):
        # Hand derivation.  npos = 2.  Sorted predictions:
        #   score 0.9 exactly on the first gt  -> tp   (rec 0.5, prec 1.0)
        #   score 0.8 far from everything      -> fp   (rec 0.5, prec 0.5)
        # Interpolated precision on the 101-point recall grid:
        #   recalls 0.11 .. 0.49  (39 pts)  -> 1.0, minus 0.1  -> 0.9 each
        #   recall  0.50          (1 pt)    -> 0.5, minus 0.1  -> 0.4
        #   recalls 0.51 .. 1.00  (50 pts)  -> 0.0, clipped    -> 0.0
        # AP = (39 * 0.9 + 0.4) / 90 / 0.9 = 35.5 / 81
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0),
                         (10, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 0.9),
                           (50, 50, 4, 2, 0, 0, 0, 0, 0.8)])]
        ap = ap_by_distance(preds, gts, cls=0, dist_th=2.0)
        assert abs(ap - 35.5 / 81.0) < 1e-9

    def test_perfect_detector_scores_one(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0),
                         (10, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 0.9),
                           (10, 0, 4, 2, 0, 0, 0, 0, 0.8)])]
        assert ap_by_distance(preds, gts, 0, 2.0) == pytest.approx(1.0)

    def test_no_gt_returns_nan(self):
        preds = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 0.9)])]
        assert np.isnan(ap_by_distance(preds, [], 0, 2.0))

    def test_gt_but_no_preds_returns_zero(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        assert ap_by_distance([], gts, 0, 2.0) == 0.0

    def test_matches_random_curves_against_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n_gt = int(rng.integers(2, 7))
            n_extra = int(rng.integers(0, 5))
            gt_rows, pred_rows = [], []
            for j in range(n_gt):
                x, y = 12.0 * j, 0.0
                gt_rows.append((x, y, 4, 2, 0, 0, 0, 0, 1.0))
                if rng.random() < 0.7:     # a hit near this gt
                    pred_rows.append((x + rng.normal(0, 0.3), y, 4, 2, 0,
                                      0, 0, 0, float(rng.random())))
            for _ in range(n_extra):       # far-away false positives
                pred_rows.append((500 + rng.random() * 50, 500, 4, 2, 0,
                                  0, 0, 0, float(rng.random())))
            gts = [boxes(0, gt_rows)]
            preds = [boxes(0, pred_rows)]
            got = ap_by_distance(preds, gts, 0, 2.0)

            # rebuild the raw pr curve by the matching contract
            order = sorted(pred_rows, key=lambda r: -r[-1])
            used = set()
            tp = []
            for row in order:
                best, bd = -1, np.inf
                for j, g in enumerate(gt_rows):
                    if j in used:
                        continue
                    d = np.hypot(row[0] - g[0], row[1] - g[1])
                    if d < bd:
                        bd, best = d, j
                if best >= 0 and bd <= 2.0:
                    used.add(best)
                    tp.append(1)
                else:
                    tp.append(0)
            if not tp:
                assert got == 0.0
                continue
            tpc = np.cumsum(tp)
            rec = tpc / n_gt
            prec = tpc / np.arange(1, len(tp) + 1)
            want = interp_ap_oracle(list(rec), list(prec))
            assert got == pytest.approx(want, abs=1e-12)


class TestMatchingContract:
    def test_match_at_exact_threshold_distance(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(2.0, 0, 4, 2, 0, 0, 0, 0, 0.9)])]
        assert ap_by_distance(preds, gts, 0, 2.0) == pytest.approx(1.0)
        just_out = [boxes(0, [(2.0 + 1e-9, 0, 4, 2, 0, 0, 0, 0, 0.9)])]
        assert ap_by_distance(just_out, gts, 0, 2.0) == 0.0

    def test_greedy_consumes_nearest_unmatched(self):
        # First (highest score) pred sits nearer gt A, second must fall
        # through to gt B even though A is its nearest neighbor.
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0),
                         (1, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(0.4, 0, 4, 2, 0, 0, 0, 0, 0.9),
                           (0.0, 0, 4, 2, 0, 0, 0, 0, 0.8)])]
        errs = tp_errors(preds, gts, 0, 2.0)
        assert errs["matches"] == 2
        # pairs: (pred1, A) dist 0.4 and (pred2, B) dist 1.0
        assert errs["ate"] == pytest.approx(0.7)

    def test_high_score_miss_costs_precision(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        # fp at rank 1, tp at rank 2: raw curve (0, 0) then (1, 0.5),
        # so interpolated precision at recall r is 0.5 r.  Summing
        # max(0, 0.005 i - 0.1) over i = 11..100 gives 16.2, and
        # 16.2 / 90 / 0.9 = 0.2.
        preds = [boxes(0, [(90, 0, 4, 2, 0, 0, 0, 0, 0.9),
                           (0, 0, 4, 2, 0, 0, 0, 0, 0.5)])]
        ap = ap_by_distance(preds, gts, 0, 2.0)
        assert ap == pytest.approx(0.2)

    def test_classes_do_not_cross_match(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 1, 1.0)])]
        preds = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 0.9)])]
        assert np.isnan(ap_by_distance(preds, gts, 0, 2.0))  # no cls-0 gt
        assert ap_by_distance(preds, gts, 1, 2.0) == 0.0     # cls-1 unmet

    def test_frames_do_not_cross_match(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(1, [(0, 0, 4, 2, 0, 0, 0, 0, 0.9)])]
        assert ap_by_distance(preds, gts, 0, 2.0) == 0.0

    def test_rejects_bad_threshold(self):
        with pytest.raises(ConfigError):
            ap_by_distance([], [], 0, 0.0)


class TestTpErrors:
    def test_exact_match_gives_zero_errors(self):
        rows = [(3, -2, 4.2, 1.9, 0.3, 1.0, -0.5, 0, 1.0)]
        errs = tp_errors([boxes(0, rows)], [boxes(0, rows)], 0)
        for key in TP_METRICS:
            assert errs[key] == pytest.approx(0.0, abs=1e-12)
        assert errs["matches"] == 1

    def test_hand_computed_errors(self):
        gts = [boxes(0, [(0, 0, 4, 2, np.pi / 4, 1, 0, 0, 1.0)])]
        preds = [boxes(0, [(0.6, 0.8, 2, 2, -np.pi / 4, 0, 0, 0, 0.9)])]
        errs = tp_errors(preds, gts, 0, 2.0)
        assert errs["ate"] == pytest.approx(1.0)          # hypot(.6, .8)
        # aligned iou: inter = 2*2 = 4, union = 8 + 4 - 4 = 8 -> 1 - 0.5
        assert errs["ase"] == pytest.approx(0.5)
        assert errs["aoe"] == pytest.approx(np.pi / 2)
        assert errs["ave"] == pytest.approx(1.0)          # hypot(1, 0)

    def test_orientation_error_wraps(self):
        gts = [boxes(0, [(0, 0, 4, 2, -3.0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(0, 0, 4, 2, 3.0, 0, 0, 0, 0.9)])]
        errs = tp_errors(preds, gts, 0, 2.0)
        assert errs["aoe"] == pytest.approx(2 * np.pi - 6.0)

    def test_no_matches_degrades_to_worst(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        errs = tp_errors([], gts, 0, 2.0)
        assert errs == {"ate": 1.0, "ase": 1.0, "aoe": 1.0, "ave": 1.0,
                        "matches": 0}


class TestComposite:
    def test_reference_value(self):
        tp = {k: 0.5 for k in TP_METRICS}
        # (5 * 0.4 + 4 * (1 - 0.5)) / 9 = 4 / 9
        assert nds(0.4, tp) == pytest.approx(4.0 / 9.0, abs=1e-12)
        assert nds_ten(0.4, tp) == pytest.approx(0.4, abs=1e-12)

    def test_errors_above_one_clamp(self):
        tp = {k: 3.0 for k in TP_METRICS}
        assert nds(0.0, tp) == 0.0

    def test_perfect_scores_one(self):
        tp = {k: 0.0 for k in TP_METRICS}
        assert nds(1.0, tp) == pytest.approx(1.0)

    def test_validation(self):
        tp = {k: 0.1 for k in TP_METRICS}
        with pytest.raises(ConfigError):
            nds(1.2, tp)
        tp["aoe"] = -0.5
        with pytest.raises(ConfigError):
            nds(0.5, tp)


class TestEvaluate:
    def test_end_to_end_report(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 1, 0, 0, 1.0),
                         (20, 0, 4, 2, 0, 0, 0, 1, 1.0)]),
               boxes(1, [(1, 0, 4, 2, 0, 1, 0, 0, 1.0)])]
        preds = [boxes(0, [(0.2, 0, 4, 2, 0, 1, 0, 0, 0.9),
                           (20, 0, 4, 2, 0, 0, 0, 1, 0.8)]),
                 boxes(1, [(1.0, 0, 4, 2, 0, 1, 0, 0, 0.7)])]
        rep = evaluate(preds, gts, num_classes=3)
        assert rep.num_frames == 2
        assert rep.num_pred_boxes == 3 and rep.num_gt_boxes == 3
        # class 2 has no gt anywhere: NaN APs, excluded from the mean
        assert np.isnan(rep.ap[(2, 0.5)])
        finite = [v for v in rep.ap.values() if not np.isnan(v)]
        assert rep.mean_ap == pytest.approx(float(np.mean(finite)))
        # every prediction is within 0.2 m of its gt
        assert rep.tp["ate"] <= 0.2 / 2 + 1e-9
        assert 0.0 <= rep.nds <= 1.0
        assert rep.nds_ten == pytest.approx(rep.nds * 9 / 10)
        assert len(rep.summary_rows()) == 7

    def test_mean_ap_zero_when_nothing_overlaps(self):
        gts = [boxes(0, [(0, 0, 4, 2, 0, 0, 0, 0, 1.0)])]
        preds = [boxes(0, [(400, 400, 4, 2, 0, 0, 0, 0, 0.9)])]
        rep = evaluate(preds, gts, num_classes=1)
        assert rep.mean_ap == 0.0
        assert rep.tp == {k: 1.0 for k in TP_METRICS}
