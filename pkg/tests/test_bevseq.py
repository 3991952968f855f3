"""Serialization orders, round trips, and ego alignment geometry."""

import numpy as np
import pytest

from bevssm import ops
from bevssm.autodiff import Tape, Tensor
from bevssm.bevseq import (DIRECTIONS, BevGrid, EgoPose, ego_align, rearrange,
                           remerge, serial_orders, wrap_angle)
from bevssm.errors import ConfigError, DimensionError


class TestOrders:

    def test_two_by_two_hand_example(self):
        """Cells [[a,b],[c,d]]: the four visits are abcd / acbd / dcba / dbca."""
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]   # a=1 b=2 c=3 d=4
        seqs = [s.data[:, 0] for s in rearrange(Tensor(vals))]
        np.testing.assert_array_equal(seqs[0], [1, 2, 3, 4])
        np.testing.assert_array_equal(seqs[1], [1, 3, 2, 4])
        np.testing.assert_array_equal(seqs[2], [4, 3, 2, 1])
        np.testing.assert_array_equal(seqs[3], [4, 2, 3, 1])

    def test_orders_are_permutations(self):
        for order in serial_orders(7, 7).values():
            assert sorted(order.tolist()) == list(range(49))

    def test_column_major_on_rectangle(self):
        order = serial_orders(2, 3)["fwd_u"]
        np.testing.assert_array_equal(order, [0, 3, 1, 4, 2, 5])

    def test_no_serpentine_fold(self):
        """Row-major means each row restarts at column 0; a serpentine scan
        would reverse every other row."""
        h = w = 5
        order = serial_orders(h, w)["fwd_l"]
        rows, cols = np.divmod(order, w)
        for r in range(h):
            np.testing.assert_array_equal(cols[rows == r], np.arange(w))

    def test_reversals_are_exact(self):
        orders = serial_orders(6, 6)
        np.testing.assert_array_equal(orders["rev_l"], orders["fwd_l"][::-1])
        np.testing.assert_array_equal(orders["rev_u"], orders["fwd_u"][::-1])


class TestRoundTrip:

    @pytest.mark.parametrize("n", [2, 7, 50])
    def test_bitwise_round_trip(self, n):
        rng = np.random.default_rng(n)
        grid = rng.normal(size=(n, n, 3)).astype(np.float32)
        back = remerge(rearrange(Tensor(grid)), n, n).data
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, grid)

    def test_single_direction_round_trip(self):
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(4, 4, 2)).astype(np.float32)
        back = remerge(rearrange(Tensor(grid), directions=1), 4, 4).data
        np.testing.assert_array_equal(back, grid)

    def test_remerge_averages_distinct_sequences(self):
        rng = np.random.default_rng(6)
        grid = rng.normal(size=(3, 3, 2))
        seqs = rearrange(Tensor(grid))
        bumped = [ops.add(s, float(k)) for k, s in enumerate(seqs)]
        merged = remerge(bumped, 3, 3).data
        np.testing.assert_allclose(merged, grid + np.mean([0, 1, 2, 3]), rtol=1e-12)

    def test_gradient_through_round_trip_is_identity(self):
        grid = Tensor(np.random.default_rng(7).normal(size=(4, 4, 2)))
        w = np.random.default_rng(8).normal(size=(4, 4, 2))
        with Tape() as tape:
            loss = ops.sum_(ops.mul(remerge(rearrange(grid), 4, 4), w))
        g = tape.gradients(loss, [grid])[0]
        np.testing.assert_allclose(g, w, rtol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ConfigError):
            rearrange(Tensor(np.zeros((3, 3, 1))), directions=2)
        with pytest.raises(DimensionError):
            remerge([Tensor(np.zeros((5, 1)))], 3, 3)


class TestBevGrid:

    def test_geometry_round_trip(self):
        g = BevGrid(np.zeros((50, 50, 1), dtype=np.float32), resolution=2.048)
        assert g.extent == pytest.approx(51.2)
        x, y = g.cell_to_metric(0, 0)
        assert (x, y) == pytest.approx((-50.176, -50.176))
        row, col = g.metric_to_cell(x, y)
        assert (row, col) == pytest.approx((0.0, 0.0), abs=1e-9)

    def test_validation(self):
        with pytest.raises(DimensionError):
            BevGrid(np.zeros((4, 5, 1)), resolution=1.0)
        with pytest.raises(ConfigError):
            BevGrid(np.zeros((4, 4, 1)), resolution=0.0)
        with pytest.raises(DimensionError):
            BevGrid(np.zeros((4, 4)), resolution=1.0)


class TestEgoAlign:

    def grid(self, n=8, c=2, seed=0, res=1.0):
        rng = np.random.default_rng(seed)
        return BevGrid(rng.normal(size=(n, n, c)).astype(np.float32), res)

    def test_identity_is_bitwise(self):
        g = self.grid()
        out = ego_align(g, EgoPose())
        np.testing.assert_array_equal(out.array, g.array)

    def test_forward_translation_shifts_against_motion(self):
        """Ego moves one cell along +x; a hot cell must move one column back."""
        data = np.zeros((6, 6, 1), dtype=np.float32)
        data[2, 4, 0] = 1.0
        g = BevGrid(data, resolution=2.0)
        out = ego_align(g, EgoPose(x=2.0)).array
        want = np.zeros_like(data)
        want[2, 3, 0] = 1.0
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_sideways_translation(self):
        data = np.zeros((6, 6, 1), dtype=np.float32)
        data[2, 1, 0] = 1.0
        g = BevGrid(data, resolution=2.0)
        out = ego_align(g, EgoPose(y=2.0)).array   # ego moved +y one cell
        want = np.zeros_like(data)
        want[1, 1, 0] = 1.0
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_quarter_turns_compose_to_identity(self):
        g = self.grid(n=7, seed=3)
        out = g
        for _ in range(4):
            out = ego_align(out, EgoPose(yaw=np.pi / 2))
        np.testing.assert_allclose(out.array, g.array, atol=1e-4)

    def test_rotation_and_inverse_recover_center(self):
        """A blob near the center survives yaw +t then -t almost unchanged."""
        data = np.zeros((9, 9, 1), dtype=np.float32)
        data[4, 4, 0] = 1.0
        data[4, 5, 0] = 0.5
        g = BevGrid(data, resolution=1.0)
        theta = 0.3
        back = ego_align(ego_align(g, EgoPose(yaw=theta)), EgoPose(yaw=-theta))
        # the exact-center cell maps onto itself; the off-center bump gets
        # blurred by two bilinear resamples but keeps its mass nearby
        assert back.array[4, 4, 0] == pytest.approx(1.0, abs=1e-3)
        assert back.array[3:6, 4:7, 0].sum() - 1.0 == pytest.approx(0.5, abs=0.25)
        assert abs(back.array.sum() - data.sum()) < 0.4

    def test_large_shift_fades_to_zero(self):
        g = self.grid(n=4, res=1.0)
        out = ego_align(g, EgoPose(x=100.0)).array
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_half_cell_shift_interpolates(self):
        data = np.zeros((5, 5, 1), dtype=np.float32)
        data[2, 2, 0] = 1.0
        g = BevGrid(data, resolution=1.0)
        out = ego_align(g, EgoPose(x=0.5)).array
        assert out[2, 1, 0] == pytest.approx(0.5, abs=1e-6)
        assert out[2, 2, 0] == pytest.approx(0.5, abs=1e-6)


class TestPoseAlgebra:

    def test_relative_to_matches_geometry(self):
        a = EgoPose(x=3.0, y=1.0, yaw=np.pi / 2)
        b = EgoPose(x=2.0, y=1.0, yaw=0.0)
        rel = a.relative_to(b)
        assert rel.x == pytest.approx(1.0)
        assert rel.y == pytest.approx(0.0, abs=1e-12)
        assert rel.yaw == pytest.approx(np.pi / 2)

    def test_wrap_angle(self):
        assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
        assert wrap_angle(-np.pi / 2) == pytest.approx(-np.pi / 2)
        assert wrap_angle(2 * np.pi) == pytest.approx(0.0, abs=1e-12)
