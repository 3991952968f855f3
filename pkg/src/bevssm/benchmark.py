"""Empirical scan complexity, the fusion ablation grid, and heatmap export.

bench_scan times the three scan routes over a list of sequence lengths and
fits a log-log slope per route; lengths beyond the quadratic guard are
recorded as skipped rather than crashing the sweep.  Before any timing the
routes are checked against each other once, so a broken kernel fails fast
instead of producing beautiful nonsense timings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .bevseq import BevGrid
from .errors import ConfigError, NumericError
from .fusion import FusionConfig
from .head import HeadConfig
from .ssd import MAX_QUADRATIC_T, SsmParams, run_scan
from .tensorio import write_pgm
from .training import DetectorModel, TrainConfig, evaluate_model, fit

BENCH_MODES = ("linear", "quadratic", "chunked")
BENCH_HEADER = ("mode", "t", "median_s", "status")

ABLATION_GRID = (("temporal_mamba", 4), ("temporal_mamba", 1),
                 ("concat", 4), ("concat", 1))
ABLATION_HEADER = ("fusion", "directions", "map", "mate", "mase", "maoe",
                   "mave", "nds", "nds10")


def draw_scan_inputs(t: int, nheads: int, headdim: int, statedim: int,
                     seed: int = 0, dtype=np.float32):
    """Random but stable scan parameters sized for timing runs."""
    rng = np.random.default_rng(seed)
    params = SsmParams(
        nheads=nheads, headdim=headdim, statedim=statedim,
        a_log=rng.normal(0.0, 0.5, nheads).astype(dtype),
        dt_bias=rng.normal(-0.5, 0.3, nheads).astype(dtype),
        dt_raw=rng.normal(-0.5, 0.5, (t, nheads)).astype(dtype),
        b=(rng.normal(0.0, 1.0, (t, statedim)) / np.sqrt(statedim)).astype(dtype),
        c=(rng.normal(0.0, 1.0, (t, statedim)) / np.sqrt(statedim)).astype(dtype))
    x = rng.normal(0.0, 1.0, (t, nheads, headdim)).astype(dtype)
    return params, x


@dataclass
class BenchResult:
    rows: list          # (mode, t, median seconds or nan, "ok" | "skipped")
    slopes: dict        # mode -> fitted log-log slope

    def csv_rows(self):
        return [(mode, t, sec, status) for mode, t, sec, status in self.rows]


def _agreement_check(t: int, nheads, headdim, statedim, chunk, seed):
    params, x = draw_scan_inputs(t, nheads, headdim, statedim, seed)
    outs = {"linear": run_scan(params, x, mode="linear"),
            "chunked": run_scan(params, x, mode="chunked", chunk=chunk)}
    if t <= MAX_QUADRATIC_T:
        outs["quadratic"] = run_scan(params, x, mode="quadratic")
    ref = outs["linear"].data
    for mode, out in outs.items():
        gap = float(np.max(np.abs(out.data - ref)))
        if gap > 1e-4:
            raise NumericError(
                f"scan modes disagree before timing: {mode} deviates from "
                f"linear by {gap:.3e} at T={t}")


def bench_scan(t_values=(256, 512, 1024, 2048, 4096, 8192), nheads: int = 1,
               headdim: int = 16, statedim: int = 16, repeats: int = 3,
               chunk: int = 64, seed: int = 0, warmup: int = 1) -> BenchResult:
    """Median wall time per (mode, T) plus fitted log-log slopes."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    t_values = tuple(int(t) for t in t_values)
    if any(t < 2 for t in t_values):
        raise ConfigError(f"sequence lengths must be >= 2, got {t_values}")

    _agreement_check(min(t_values), nheads, headdim, statedim, chunk, seed)

    rows = []
    for t in t_values:
        params, x = draw_scan_inputs(t, nheads, headdim, statedim, seed)
        for mode in BENCH_MODES:
            if mode == "quadratic" and t > MAX_QUADRATIC_T:
                rows.append((mode, t, float("nan"), "skipped"))
                continue
            kwargs = {"chunk": chunk} if mode == "chunked" else {}
            for _ in range(warmup):
                run_scan(params, x, mode=mode, **kwargs)
            times = []
            for _ in range(repeats):
                tic = time.perf_counter()
                run_scan(params, x, mode=mode, **kwargs)
                times.append(time.perf_counter() - tic)
            rows.append((mode, t, float(np.median(times)), "ok"))

    slopes = {}
    for mode in BENCH_MODES:
        pts = [(t, sec) for m, t, sec, status in rows
               if m == mode and status == "ok"]
        if len(pts) >= 2:
            logt = np.log([p[0] for p in pts])
            logs = np.log([max(p[1], 1e-9) for p in pts])
            slopes[mode] = float(np.polyfit(logt, logs, 1)[0])
        else:
            slopes[mode] = float("nan")
    return BenchResult(rows, slopes)


# ---------------------------------------------------------------------------
# heatmap export


def heatmap(bev: BevGrid) -> np.ndarray:
    """Per-cell channel L2 norm, min-max scaled to uint8."""
    mag = np.linalg.norm(bev.array.astype(np.float64), axis=2)
    lo, hi = float(mag.min()), float(mag.max())
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round(255.0 * (mag - lo) / (hi - lo)).astype(np.uint8)


def heatmap_export(bev: BevGrid, path) -> np.ndarray:
    """Write the grid's L2 heatmap as a binary PGM; returns the image."""
    img = heatmap(bev)
    write_pgm(path, img)
    return img


# ---------------------------------------------------------------------------
# ablation grid


def run_ablation(train_seqs, eval_seqs, fusion_base: FusionConfig,
                 head_cfg: HeadConfig, tcfg: TrainConfig,
                 grid=ABLATION_GRID):
    """Train and evaluate each (fusion mode, direction count) cell.

    Returns rows following ABLATION_HEADER, one per cell, in grid order.
    """
    rows = []
    for mode, directions in grid:
        fcfg = replace(fusion_base, mode=mode, directions=directions)
        model = DetectorModel(fcfg, head_cfg, seed=tcfg.seed)
        fit(model, train_seqs, tcfg)
        rep = evaluate_model(model, eval_seqs)
        rows.append((mode, directions, rep.mean_ap, rep.tp["ate"],
                     rep.tp["ase"], rep.tp["aoe"], rep.tp["ave"],
                     rep.nds, rep.nds_ten))
    return rows
