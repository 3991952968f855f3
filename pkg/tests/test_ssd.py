"""Scan routes against a loop-based oracle, plus gradient and guard tests."""

import numpy as np
import pytest

from bevssm import ops
from bevssm.autodiff import Tape, Tensor, finite_diff_check
from bevssm.errors import CapacityError, ConfigError, DimensionError, NumericError
from bevssm.ssd import (MAX_QUADRATIC_T, Mamba2Block, Mamba2Config, SsmParams,
                        discretize_zoh, quadratic_dual, run_scan, scan_chunked,
                        scan_linear)


# ---------------------------------------------------------------------------
# oracle: the recurrence written as plain python loops in float64


def naive_ssm(a_log, dt_bias, dt_raw, b, c, x):
    """y[t,h,p] = sum_n c[t,n] * h[t,h,n,p] with the stepwise recurrence."""
    t, heads = dt_raw.shape
    n = b.shape[1]
    p = x.shape[2]
    y = np.zeros((t, heads, p))
    for hh in range(heads):
        a = -np.exp(float(a_log[hh]))
        h = np.zeros((n, p))
        for step in range(t):
            dt = np.log1p(np.exp(dt_raw[step, hh] + dt_bias[hh]))
            abar = np.exp(dt * a)
            for ni in range(n):
                for pi in range(p):
                    h[ni, pi] = abar * h[ni, pi] + dt * b[step, ni] * x[step, hh, pi]
            for pi in range(p):
                y[step, hh, pi] = sum(c[step, ni] * h[ni, pi] for ni in range(n))
    return y


def draw_params(rng, t=12, heads=2, n=4, p=3, dtype=np.float64, batch=None):
    shape = (t, heads) if batch is None else (batch, t, heads)
    bc = (t, n) if batch is None else (batch, t, n)
    xs = (t, heads, p) if batch is None else (batch, t, heads, p)
    params = SsmParams(
        nheads=heads, headdim=p, statedim=n,
        a_log=rng.uniform(-1.0, 1.0, heads).astype(dtype),
        dt_bias=rng.uniform(-1.0, 0.5, heads).astype(dtype),
        dt_raw=rng.normal(size=shape).astype(dtype),
        b=rng.normal(size=bc).astype(dtype),
        c=rng.normal(size=bc).astype(dtype))
    x = Tensor(rng.normal(size=xs).astype(dtype))
    return params, x


class TestAgainstOracle:

    def test_scan_linear_matches_loops(self):
        rng = np.random.default_rng(20)
        params, x = draw_params(rng)
        want = naive_ssm(params.a_log.data, params.dt_bias.data,
                         params.dt_raw.data, params.b.data, params.c.data, x.data)
        np.testing.assert_allclose(scan_linear(params, x).data, want, rtol=1e-10)

    def test_quadratic_matches_loops(self):
        rng = np.random.default_rng(21)
        params, x = draw_params(rng, t=9, heads=3, n=2, p=2)
        want = naive_ssm(params.a_log.data, params.dt_bias.data,
                         params.dt_raw.data, params.b.data, params.c.data, x.data)
        np.testing.assert_allclose(quadratic_dual(params, x).data, want, rtol=1e-10)

    @pytest.mark.parametrize("chunk", [1, 3, 4, 5, 16, 64])
    def test_chunked_matches_loops(self, chunk):
        """Chunk sizes that do and do not divide T, including degenerate 1."""
        rng = np.random.default_rng(22)
        params, x = draw_params(rng, t=13)
        want = naive_ssm(params.a_log.data, params.dt_bias.data,
                         params.dt_raw.data, params.b.data, params.c.data, x.data)
        got = scan_chunked(params, x, chunk=chunk)
        np.testing.assert_allclose(got.data, want, rtol=1e-10)

    def test_batched_equals_stacked_singles(self):
        rng = np.random.default_rng(23)
        params, x = draw_params(rng, t=8, batch=3)
        y = scan_linear(params, x).data
        for i in range(3):
            single = SsmParams(params.nheads, params.headdim, params.statedim,
                               params.a_log.data, params.dt_bias.data,
                               params.dt_raw.data[i], params.b.data[i],
                               params.c.data[i])
            yi = scan_linear(single, Tensor(x.data[i])).data
            np.testing.assert_allclose(y[i], yi, rtol=1e-12)

    def test_discretize_zoh_ranges(self):
        rng = np.random.default_rng(24)
        params, _ = draw_params(rng)
        abar, bbar = discretize_zoh(params.a_log, params.dt_raw,
                                    params.dt_bias, params.b)
        assert abar.shape == (12, 2)
        assert bbar.shape == (12, 2, 4)
        assert np.all(abar.data > 0.0) and np.all(abar.data < 1.0)
        dt = np.logaddexp(0.0, params.dt_raw.data + params.dt_bias.data)
        np.testing.assert_allclose(
            abar.data, np.exp(dt * -np.exp(params.a_log.data)), rtol=1e-12)
        np.testing.assert_allclose(
            bbar.data, dt[..., None] * params.b.data[:, None, :], rtol=1e-12)


class TestCausality:

    @pytest.mark.parametrize("mode", ["linear", "quadratic", "chunked"])
    def test_future_inputs_do_not_leak(self, mode):
        rng = np.random.default_rng(25)
        params, x = draw_params(rng, t=10)
        y1 = run_scan(params, x, mode=mode, chunk=4).data
        x2 = x.data.copy()
        x2[6:] += 50.0
        y2 = run_scan(params, Tensor(x2), mode=mode, chunk=4).data
        np.testing.assert_allclose(y1[:6], y2[:6], rtol=1e-12)
        assert not np.allclose(y1[6:], y2[6:])


class TestDuality:
    """The three routes must agree; the full 200-config sweep lives in
    test_acceptance.py, this is the fast development version."""

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-10)])
    def test_modes_agree(self, dtype, tol):
        rng = np.random.default_rng(26)
        for trial in range(5):
            t = int(rng.integers(3, 65))
            params, x = draw_params(rng, t=t, heads=int(rng.integers(1, 4)),
                                    n=int(rng.integers(1, 6)),
                                    p=int(rng.integers(1, 5)), dtype=dtype)
            y_lin = scan_linear(params, x).data
            y_quad = quadratic_dual(params, x).data
            y_chunk = scan_chunked(params, x, chunk=8).data
            scale = max(np.abs(y_lin).max(), 1e-30)
            assert np.abs(y_quad - y_lin).max() / scale < tol
            assert np.abs(y_chunk - y_lin).max() / scale < tol


class TestGradients:

    def test_scan_linear_full_finite_difference(self):
        rng = np.random.default_rng(27)
        params, x = draw_params(rng, t=6, heads=2, n=3, p=2)
        probe = Tensor(rng.normal(size=(6, 2, 2)))

        def f():
            return ops.sum_(ops.mul(scan_linear(params, x), probe))

        leaves = [params.a_log, params.dt_bias, params.dt_raw,
                  params.b, params.c, x]
        assert finite_diff_check(f, leaves) < 1e-6

    @pytest.mark.parametrize("mode,chunk", [("quadratic", 0), ("chunked", 4)])
    def test_composite_modes_match_linear_gradients(self, mode, chunk):
        """All routes must produce the same gradients, not just outputs."""
        rng = np.random.default_rng(28)
        params, x = draw_params(rng, t=11, heads=2, n=3, p=2)
        probe = rng.normal(size=(11, 2, 2))
        leaves = [params.a_log, params.dt_bias, params.dt_raw, params.b,
                  params.c, x]

        def run(m):
            with Tape() as tape:
                y = run_scan(params, x, mode=m, chunk=chunk or 64)
                loss = ops.sum_(ops.mul(y, probe))
            return tape.gradients(loss, leaves)

        for g_ref, g_got in zip(run("linear"), run(mode)):
            np.testing.assert_allclose(g_got, g_ref, rtol=1e-8, atol=1e-10)


class TestGuards:

    def test_quadratic_capacity(self):
        rng = np.random.default_rng(29)
        params, x = draw_params(rng, t=MAX_QUADRATIC_T + 1, heads=1, n=1, p=1)
        with pytest.raises(CapacityError):
            quadratic_dual(params, x)

    def test_bad_chunk_rejected(self):
        rng = np.random.default_rng(30)
        params, x = draw_params(rng, t=5)
        with pytest.raises(ConfigError):
            scan_chunked(params, x, chunk=0)

    def test_nan_input_cites_step(self):
        rng = np.random.default_rng(31)
        params, x = draw_params(rng, t=8)
        bad = x.data.copy()
        bad[5, 0, 0] = np.nan
        with pytest.raises(NumericError, match="t=5"):
            scan_linear(params, Tensor(bad))

    def test_param_shape_mismatch(self):
        rng = np.random.default_rng(32)
        with pytest.raises(DimensionError):
            SsmParams(nheads=2, headdim=3, statedim=4,
                      a_log=np.zeros(3), dt_bias=np.zeros(2),
                      dt_raw=rng.normal(size=(5, 2)),
                      b=rng.normal(size=(5, 4)), c=rng.normal(size=(5, 4)))

    def test_x_shape_mismatch(self):
        rng = np.random.default_rng(33)
        params, x = draw_params(rng)
        with pytest.raises(DimensionError):
            scan_linear(params, Tensor(np.zeros((12, 2, 99))))

    def test_unknown_mode(self):
        rng = np.random.default_rng(34)
        params, x = draw_params(rng, t=4)
        with pytest.raises(ConfigError):
            run_scan(params, x, mode="banana")


class TestMamba2Block:

    def cfg(self, **kw):
        base = dict(d_model=10, nheads=2, headdim=4, statedim=3, conv_width=3,
                    chunk=8)
        base.update(kw)
        return Mamba2Config(**base)

    def test_output_shape_and_rank(self):
        block = Mamba2Block(self.cfg(), rng=0)
        seq = Tensor(np.random.default_rng(1).normal(size=(17, 10)).astype(np.float32))
        assert block(seq).shape == (17, 10)
        batched = Tensor(np.random.default_rng(2).normal(size=(3, 9, 10)).astype(np.float32))
        assert block(batched).shape == (3, 9, 10)

    def test_modes_agree_through_block(self):
        block = Mamba2Block(self.cfg(), rng=3)
        seq = Tensor(np.random.default_rng(4).normal(size=(33, 10)).astype(np.float32))
        y_lin = block(seq, mode="linear").data
        y_quad = block(seq, mode="quadratic").data
        y_chunk = block(seq, mode="chunked").data
        scale = np.abs(y_lin).max()
        assert np.abs(y_quad - y_lin).max() / scale < 1e-4
        assert np.abs(y_chunk - y_lin).max() / scale < 1e-4

    def test_block_is_causal(self):
        block = Mamba2Block(self.cfg(), rng=5)
        x = np.random.default_rng(6).normal(size=(14, 10)).astype(np.float32)
        y1 = block(Tensor(x)).data
        x2 = x.copy()
        x2[9:] = 7.0
        y2 = block(Tensor(x2)).data
        np.testing.assert_allclose(y1[:9], y2[:9], rtol=1e-5)

    def test_batched_matches_loop(self):
        block = Mamba2Block(self.cfg(), rng=7)
        xs = np.random.default_rng(8).normal(size=(3, 7, 10)).astype(np.float32)
        y = block(Tensor(xs)).data
        for i in range(3):
            yi = block(Tensor(xs[i])).data
            np.testing.assert_allclose(y[i], yi, rtol=1e-5, atol=1e-6)

    def test_finite_difference_through_block(self):
        """Sweep every block parameter in float64 through the chunked route."""
        cfg = Mamba2Config(d_model=4, nheads=2, headdim=2, statedim=2,
                           conv_width=2, chunk=3)
        block = Mamba2Block(cfg, rng=9, dtype=np.float64)
        x = Tensor(np.random.default_rng(10).normal(size=(5, 4)))

        def f():
            return ops.sum_(ops.mul(block(x), block(x)))

        # 1e-4 leaves room for FD rounding noise on near-zero coordinates
        assert finite_diff_check(f, block.params() + [x]) < 1e-4

    def test_rejects_wrong_width(self):
        block = Mamba2Block(self.cfg(), rng=11)
        with pytest.raises(DimensionError):
            block(Tensor(np.zeros((5, 11))))
