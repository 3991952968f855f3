"""Benchmark, heatmap and ablation-runner tests (small sizes only)."""

import numpy as np
import pytest

from bevssm.benchmark import (ABLATION_GRID, ABLATION_HEADER, BENCH_MODES,
                              bench_scan, heatmap, heatmap_export,
                              run_ablation)
from bevssm.bevseq import BevGrid
from bevssm.errors import ConfigError
from bevssm.fusion import FusionConfig
from bevssm.head import HeadConfig
from bevssm.scene import SceneConfig, gen_dataset
from bevssm.ssd import MAX_QUADRATIC_T
from bevssm.tensorio import read_pgm
from bevssm.training import TrainConfig


class TestBenchScan:
    def test_small_sweep_completes(self):
        res = bench_scan(t_values=(32, 64, 128), repeats=2, headdim=4,
                         statedim=4)
        assert len(res.rows) == 3 * len(BENCH_MODES)
        for mode, t, sec, status in res.rows:
            assert status == "ok"
            assert sec > 0
        assert set(res.slopes) == set(BENCH_MODES)
        for slope in res.slopes.values():
            assert np.isfinite(slope)

    def test_quadratic_guard_skips_not_crashes(self):
        res = bench_scan(t_values=(64, MAX_QUADRATIC_T + 4), repeats=1,
                         headdim=2, statedim=2)
        marked = [(m, t, s, st) for m, t, s, st in res.rows if st == "skipped"]
        assert marked == [("quadratic", MAX_QUADRATIC_T + 4,
                           pytest.approx(np.nan, nan_ok=True), "skipped")]
        # slope still fits from the remaining quadratic point count < 2
        assert np.isnan(res.slopes["quadratic"]) or np.isfinite(
            res.slopes["quadratic"])

    def test_validation(self):
        with pytest.raises(ConfigError):
            bench_scan(t_values=(64,), repeats=0)
        with pytest.raises(ConfigError):
            bench_scan(t_values=(1,))


class TestHeatmap:
    def test_zero_grid_is_black(self, tmp_path):
        grid = BevGrid(np.zeros((6, 6, 3), np.float32), 1.0)
        img = heatmap_export(grid, tmp_path / "z.pgm")
        assert img.dtype == np.uint8
        assert img.max() == 0
        assert np.array_equal(read_pgm(tmp_path / "z.pgm"), np.zeros((6, 6),
                                                                     np.uint8))

    def test_one_hot_cell_is_single_white_pixel(self):
        data = np.zeros((5, 5, 4), np.float32)
        data[2, 3, 1] = 7.0
        img = heatmap(BevGrid(data, 1.0))
        assert img[2, 3] == 255
        assert img.sum() == 255

    def test_golden_bytes_are_stable(self, tmp_path):
        rng = np.random.default_rng(12)
        grid = BevGrid(rng.normal(size=(8, 8, 5)).astype(np.float32), 2.0)
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        heatmap_export(grid, p1)
        heatmap_export(grid, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_bytes().startswith(b"P5\n8 8\n255\n")

    def test_scaling_spans_full_range(self):
        data = np.zeros((4, 4, 1), np.float32)
        data[:, :, 0] = np.arange(16).reshape(4, 4)
        img = heatmap(BevGrid(data, 1.0))
        assert img.min() == 0 and img.max() == 255


class TestAblation:
    def test_grid_runs_and_reports(self):
        cfg = SceneConfig(range_m=10.0, grid=10, resolution=2.0, frames=2,
                          channels=8, count_small=1, count_large=1,
                          spawn_range=6.0, noise=0.02)
        train = gen_dataset(cfg, 1, seed=0)
        evals = gen_dataset(cfg, 1, seed=1)
        fbase = FusionConfig(channels=8, d_model=16, nheads=2, headdim=8,
                             statedim=8, conv_width=2, chunk=25, dropout=0.1)
        head = HeadConfig(num_classes=2, channels=8, num_queries=8, d_model=16,
                          layers=1, attn_heads=2, attn_points=2, mixer_heads=1,
                          mixer_headdim=16, mixer_statedim=4,
                          mixer_conv_width=2)
        rows = run_ablation(train, evals, fbase, head,
                            TrainConfig(lr=1e-3, epochs=1))
        assert len(rows) == len(ABLATION_GRID)
        assert len(rows[0]) == len(ABLATION_HEADER)
        seen = {(r[0], r[1]) for r in rows}
        assert seen == set(ABLATION_GRID)
        for row in rows:
            assert 0.0 <= row[7] <= 1.0        # nds in range
