"""Selective state-space scans and the gated sequence-mixing block.

The same linear recurrence is exposed through three routes that must agree
numerically:

* ``scan_linear``     - sequential recurrence, O(T) state updates;
* ``quadratic_dual``  - materializes the equivalent lower-triangular mixing
                        matrix and multiplies, O(T^2) but embarrassingly
                        vectorizable (guarded against long sequences);
* ``scan_chunked``    - splits time into chunks, does the quadratic form
                        inside each chunk and carries a compressed state
                        between chunks.

All three share one discretization helper, so a disagreement can only come
from the scan algebra itself.  ``Mamba2Block`` wraps a scan with input/output
projections, a causal depthwise convolution on the data-dependent streams and
a multiplicative gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, active_tape
from .errors import CapacityError, ConfigError, DimensionError, NumericError
from .layers import Linear, Module, make_rng
from . import ops

MAX_QUADRATIC_T = 4096


# ---------------------------------------------------------------------------
# parameter bundle


@dataclass
class SsmParams:
    """Inputs of one scan: static per-head decay params plus per-step projections.

    ``dt_raw`` is (..., T, H); ``b`` and ``c`` are (..., T, N) and are shared
    across heads.  An optional leading batch axis is carried through the
    scans unchanged.
    """

    nheads: int
    headdim: int
    statedim: int
    a_log: object        # (H,) log of the positive decay rate, A = -exp(a_log)
    dt_bias: object      # (H,) added to dt_raw before the softplus
    dt_raw: object       # (..., T, H) unconstrained step sizes
    b: object            # (..., T, N) state input projection
    c: object            # (..., T, N) state readout projection

    def __post_init__(self):
        for name in ("a_log", "dt_bias", "dt_raw", "b", "c"):
            setattr(self, name, ops.as_tensor(getattr(self, name)))
        h, n = self.nheads, self.statedim
        if self.a_log.shape != (h,) or self.dt_bias.shape != (h,):
            raise DimensionError(
                f"a_log/dt_bias must be ({h},), got {self.a_log.shape} "
                f"and {self.dt_bias.shape}")
        if self.dt_raw.ndim not in (2, 3) or self.dt_raw.shape[-1] != h:
            raise DimensionError(
                f"dt_raw must be (T,{h}) or (B,T,{h}), got {self.dt_raw.shape}")
        t = self.dt_raw.shape[-2]
        lead = self.dt_raw.shape[:-2]
        for name, arr in (("b", self.b), ("c", self.c)):
            if arr.shape != lead + (t, n):
                raise DimensionError(
                    f"{name} must be {lead + (t, n)}, got {arr.shape}")
        if t < 1:
            raise DimensionError("sequence length must be >= 1")
        for name in ("a_log", "dt_bias", "dt_raw", "b", "c"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise NumericError(f"non-finite values in SsmParams.{name}")

    @property
    def seqlen(self) -> int:
        return self.dt_raw.shape[-2]

    @property
    def batched(self) -> bool:
        return self.dt_raw.ndim == 3


def discretize_zoh(a_log, dt_raw, dt_bias, b):
    """Zero-order-hold style discretization.

    Returns ``(abar, bbar)`` with ``abar = exp(dt * A)`` per head (shape
    (..., T, H), A = -exp(a_log)) and ``bbar = dt * b`` per head and state
    (shape (..., T, H, N)); ``dt = softplus(dt_raw + dt_bias)`` is positive,
    so 0 < abar < 1 whenever a_log is finite.
    """
    la, dt = _log_decay(a_log, dt_raw, dt_bias)
    return ops.exp(la), _input_scale(dt, b)


def _log_decay(a_log, dt_raw, dt_bias):
    """Shared discretization core: log-decay la = dt * A and the positive dt."""
    dt = ops.softplus(ops.add(dt_raw, dt_bias))
    rate = ops.neg(ops.exp(a_log))
    return ops.mul(dt, rate), dt


def _input_scale(dt, b):
    """bbar[..., t, h, n] = dt[..., t, h] * b[..., t, n]."""
    dt = ops.as_tensor(dt)
    b = ops.as_tensor(b)
    dte = ops.reshape(dt, dt.shape + (1,))
    be = ops.reshape(b, b.shape[:-1] + (1,) + b.shape[-1:])
    return ops.mul(dte, be)


def _check_scan_x(params: SsmParams, x) -> Tensor:
    x = ops.as_tensor(x)
    want = params.dt_raw.shape[:-1] + (params.nheads, params.headdim)
    if x.shape != want:
        raise DimensionError(f"x must be {want}, got {x.shape}")
    finite = np.isfinite(x.data)
    if not finite.all():
        steps = finite.reshape(-1, params.seqlen, params.nheads * params.headdim)
        bad = int(np.argwhere(~steps.all(axis=(0, 2)))[0, 0])
        raise NumericError(f"non-finite scan input at step t={bad}")
    return x


def _lift(params: SsmParams, x: Tensor):
    """Give every per-step array a leading batch axis; report if one was added."""
    if params.batched:
        return params.dt_raw, params.b, params.c, x, False
    dt = ops.reshape(params.dt_raw, (1,) + params.dt_raw.shape)
    b = ops.reshape(params.b, (1,) + params.b.shape)
    c = ops.reshape(params.c, (1,) + params.c.shape)
    xb = ops.reshape(x, (1,) + x.shape)
    return dt, b, c, xb, True


def _prepared(params: SsmParams, x):
    """Validate, lift to batched form and discretize once."""
    x = _check_scan_x(params, x)
    dt_raw, b, c, xb, squeeze = _lift(params, x)
    la, dt = _log_decay(params.a_log, dt_raw, params.dt_bias)
    bbar = _input_scale(dt, b)
    return la, bbar, c, xb, squeeze


def _finish(y: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# sequential scan (recorded as one primitive with a bespoke backward rule)


def _scan_linear_core(la, bbar, c, x):
    """Run the recurrence h_t = abar_t*h_{t-1} + bbar_t (x) x_t, y_t = c_t.h_t.

    Shapes: la (B,T,H), bbar (B,T,H,N), c (B,T,N), x (B,T,H,P) -> y like x.
    The whole loop is one tape entry; intermediate states are only stored
    when a tape is active.
    """
    bsz, t, heads = la.shape
    n = c.shape[-1]
    p = x.shape[-1]
    abar = np.exp(la.data)
    keep_states = active_tape() is not None
    h = np.zeros((bsz, heads, n, p), dtype=x.dtype)
    states = np.empty((bsz, t, heads, n, p), dtype=x.dtype) if keep_states else None
    y = np.empty_like(x.data)
    for step in range(t):
        h = (abar[:, step, :, None, None] * h
             + bbar.data[:, step, :, :, None] * x.data[:, step, :, None, :])
        if keep_states:
            states[:, step] = h
        y[:, step] = np.einsum("bn,bhnp->bhp", c.data[:, step], h)
    out = Tensor(y)

    def vjp(g):
        lam = np.zeros((bsz, heads, n, p), dtype=np.result_type(g.dtype, x.dtype))
        g_la = np.zeros(la.shape, dtype=la.dtype)
        g_bbar = np.zeros(bbar.shape, dtype=bbar.dtype)
        g_c = np.zeros(c.shape, dtype=c.dtype)
        g_x = np.zeros(x.shape, dtype=x.dtype)
        for step in range(t - 1, -1, -1):
            h_here = states[:, step]
            g_c[:, step] = np.einsum("bhp,bhnp->bn", g[:, step], h_here)
            lam = lam + c.data[:, step][:, None, :, None] * g[:, step][:, :, None, :]
            h_prev = states[:, step - 1] if step > 0 else np.zeros_like(h_here)
            g_la[:, step] = np.einsum("bhnp,bhnp->bh", lam, h_prev) * abar[:, step]
            g_bbar[:, step] = np.einsum("bhnp,bhp->bhn", lam, x.data[:, step])
            g_x[:, step] = np.einsum("bhnp,bhn->bhp", lam, bbar.data[:, step])
            lam = abar[:, step, :, None, None] * lam
        return g_la, g_bbar, g_c, g_x

    return ops.record_op("scan_linear", (la, bbar, c, x), out, vjp)


# ---------------------------------------------------------------------------
# quadratic dual form


def _mixing_matrix(la_bht, bbar, c):
    """Per-head lower-triangular mixing matrix M[t,i] = c_t . bbar_i * decay."""
    decay = ops.decay_matrix(la_bht)                     # (B,H,T,T)
    c_b = ops.reshape(c, (c.shape[0], 1) + c.shape[1:])  # (B,1,T,N)
    bbar_ht = ops.transpose(bbar, (0, 2, 3, 1))          # (B,H,N,T)
    overlap = ops.matmul(c_b, bbar_ht)                   # (B,H,T,T) = c_t . bbar_i
    return ops.mul(overlap, decay)


def _quadratic_core(la, bbar, c, x):
    la_bht = ops.transpose(la, (0, 2, 1))                # (B,H,T)
    m = _mixing_matrix(la_bht, bbar, c)
    y_ht = ops.matmul(m, ops.transpose(x, (0, 2, 1, 3)))
    return ops.transpose(y_ht, (0, 2, 1, 3))


# ---------------------------------------------------------------------------
# chunked scan


def _chunked_core(la, bbar, c, x, chunk: int):
    bsz, t, heads = la.shape
    n = c.shape[-1]
    la_bht = ops.transpose(la, (0, 2, 1))                # (B,H,T)

    h_carry = None                                        # (B,H,N,P) once set
    pieces = []
    for start in range(0, t, chunk):
        stop = min(start + chunk, t)
        q = stop - start
        la_c = ops.narrow(la_bht, 2, start, q)            # (B,H,Q)
        b_c = ops.narrow(bbar, 1, start, q)               # (B,Q,H,N)
        c_c = ops.narrow(c, 1, start, q)                  # (B,Q,N)
        x_c = ops.transpose(ops.narrow(x, 1, start, q), (0, 2, 1, 3))  # (B,H,Q,P)

        decay = ops.decay_matrix(la_c)                    # (B,H,Q,Q)
        c_b = ops.reshape(c_c, (bsz, 1, q, n))
        m = ops.mul(ops.matmul(c_b, ops.transpose(b_c, (0, 2, 3, 1))), decay)
        y_c = ops.matmul(m, x_c)                          # (B,H,Q,P)

        if h_carry is not None:
            prefix = ops.exp(ops.cumsum(la_c, axis=-1))   # (B,H,Q) incl. own step
            read = ops.matmul(c_b, h_carry)               # (B,H,Q,P)
            y_c = ops.add(y_c, ops.mul(read, ops.reshape(prefix, (bsz, heads, q, 1))))

        suffix = ops.narrow(decay, 2, q - 1, 1)           # (B,H,1,Q) last row
        b_ht = ops.transpose(b_c, (0, 2, 1, 3))           # (B,H,Q,N)
        b_w = ops.mul(b_ht, ops.reshape(suffix, (bsz, heads, q, 1)))
        gathered = ops.matmul(ops.transpose(b_w, (0, 1, 3, 2)), x_c)  # (B,H,N,P)
        if h_carry is None:
            h_carry = gathered
        else:
            total = ops.exp(ops.sum_(la_c, axis=-1))      # (B,H)
            scaled = ops.mul(h_carry, ops.reshape(total, (bsz, heads, 1, 1)))
            h_carry = ops.add(scaled, gathered)

        pieces.append(ops.transpose(y_c, (0, 2, 1, 3)))   # back to (B,Q,H,P)

    return pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=1)


# ---------------------------------------------------------------------------
# public entry points


def scan_linear(params: SsmParams, x):
    """Sequential reference scan; linear in T."""
    la, bbar, c, xb, squeeze = _prepared(params, x)
    return _finish(_scan_linear_core(la, bbar, c, xb), squeeze)


def quadratic_dual(params: SsmParams, x):
    """Materialize the (T, T) mixing matrix per head and multiply.

    Equivalent to ``scan_linear`` up to floating-point error.  Memory grows
    as T^2, so sequences longer than ``MAX_QUADRATIC_T`` are rejected with a
    CapacityError rather than silently thrashing.
    """
    if params.seqlen > MAX_QUADRATIC_T:
        raise CapacityError(
            f"quadratic_dual materializes a {params.seqlen}^2 matrix; "
            f"limit is {MAX_QUADRATIC_T}")
    la, bbar, c, xb, squeeze = _prepared(params, x)
    return _finish(_quadratic_core(la, bbar, c, xb), squeeze)


def scan_chunked(params: SsmParams, x, chunk: int = 64):
    """Blockwise scan: quadratic inside chunks, compressed state between them.

    Within each chunk of length Q the quadratic dual form produces the
    intra-chunk output; the state carried from earlier chunks enters through
    the inclusive decay prefix, and the outgoing state folds the chunk's
    inputs weighted by the decay suffix.  Cost is O(T*Q) time with O(Q^2)
    scratch, linear in T for fixed chunk size.
    """
    if not isinstance(chunk, int) or chunk < 1:
        raise ConfigError(f"chunk size must be a positive integer, got {chunk!r}")
    la, bbar, c, xb, squeeze = _prepared(params, x)
    return _finish(_chunked_core(la, bbar, c, xb, chunk), squeeze)


SCAN_MODES = ("linear", "quadratic", "chunked")


def run_scan(params: SsmParams, x, mode: str = "chunked", chunk: int = 64):
    """Dispatch to one of the three equivalent scan routes."""
    if mode == "linear":
        return scan_linear(params, x)
    if mode == "quadratic":
        return quadratic_dual(params, x)
    if mode == "chunked":
        return scan_chunked(params, x, chunk=chunk)
    raise ConfigError(f"unknown scan mode {mode!r}; expected one of {SCAN_MODES}")


# ---------------------------------------------------------------------------
# the gated block


def _log_grid(lo: float, hi: float, n: int):
    """n points evenly spread in log space over [lo, hi], midpoint rule."""
    frac = (np.arange(n) + 0.5) / n
    return np.exp(np.log(lo) + frac * (np.log(hi) - np.log(lo)))


@dataclass(frozen=True)
class Mamba2Config:
    """Hyperparameters of one sequence-mixing block."""

    d_model: int = 64
    nheads: int = 4
    headdim: int = 16
    statedim: int = 16
    conv_width: int = 4
    chunk: int = 64
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    a_min: float = 1.0
    a_max: float = 16.0
    gate_bias: float = 0.0
    conv_gain: float = 1.0
    out_gain: float = 1.0

    def __post_init__(self):
        for name in ("d_model", "nheads", "headdim", "statedim", "conv_width", "chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.dt_min < self.dt_max:
            raise ConfigError(f"need 0 < dt_min < dt_max, got {self.dt_min}, {self.dt_max}")
        if not 0.0 < self.a_min <= self.a_max:
            raise ConfigError(f"need 0 < a_min <= a_max, got {self.a_min}, {self.a_max}")
        if self.conv_gain <= 0.0 or self.out_gain <= 0.0:
            raise ConfigError(
                f"gains must be positive, got conv_gain={self.conv_gain}, "
                f"out_gain={self.out_gain}")

    @property
    def d_inner(self) -> int:
        return self.nheads * self.headdim


class Mamba2Block(Module):
    """Projection -> causal conv + gate -> selective scan -> projection.

    The input projection fans out into the scanned stream x, a gate z, the
    state projections b/c (shared across heads) and per-head step sizes dt.
    The causal depthwise convolution (then SiLU) runs over the concatenated
    x/b/c streams only; z bypasses it and gates the scan output as
    y * silu(z) before the output projection.
    """

    def __init__(self, cfg: Mamba2Config, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        self.cfg = cfg
        d_in, n, h = cfg.d_inner, cfg.statedim, cfg.nheads
        self.in_proj = Linear(cfg.d_model, 2 * d_in + 2 * n + h, rng=rng, dtype=dtype)
        conv_ch = d_in + 2 * n
        cb = 1.0 / np.sqrt(cfg.conv_width)
        self.conv_weight = Parameter(
            rng.uniform(-cb, cb, (cfg.conv_width, conv_ch)), dtype=dtype)
        self.conv_bias = Parameter(rng.uniform(-cb, cb, conv_ch), dtype=dtype)
        # deterministic log-spaced decay and step grids: each head starts on
        # its own timescale, so no seed can draw all-fast or all-slow heads
        # and lose either long-range accumulation or responsiveness
        self.a_log = Parameter(
            np.log(_log_grid(cfg.a_min, cfg.a_max, h)), dtype=dtype)
        dt_init = _log_grid(cfg.dt_min, cfg.dt_max, h)
        self.dt_bias = Parameter(np.log(np.expm1(dt_init)), dtype=dtype)
        self.out_proj = Linear(d_in, cfg.d_model, rng=rng, dtype=dtype)
        if cfg.conv_gain != 1.0:
            self.conv_weight.data *= cfg.conv_gain
        if cfg.out_gain != 1.0:
            self.out_proj.weight.data *= cfg.out_gain
        if cfg.gate_bias:
            # bias the gate stream open: silu of a near-zero gate attenuates
            # the scan output several-fold, which a block without a following
            # norm layer never recovers from
            self.in_proj.bias.data[d_in:2 * d_in] += cfg.gate_bias

    def __call__(self, seq, mode: str = "chunked"):
        seq = ops.as_tensor(seq)
        if seq.ndim == 2:
            return ops.reshape(
                self(ops.reshape(seq, (1,) + seq.shape), mode=mode), seq.shape)
        if seq.ndim != 3 or seq.shape[-1] != self.cfg.d_model:
            raise DimensionError(
                f"expected (L,{self.cfg.d_model}) or (B,L,{self.cfg.d_model}), "
                f"got {seq.shape}")
        cfg = self.cfg
        bsz, t, _ = seq.shape
        d_in, n, h, p = cfg.d_inner, cfg.statedim, cfg.nheads, cfg.headdim

        z_all = self.in_proj(seq)
        xbc = ops.concat([ops.narrow(z_all, 2, 0, d_in),
                          ops.narrow(z_all, 2, 2 * d_in, 2 * n)], axis=2)
        gate = ops.narrow(z_all, 2, d_in, d_in)
        dt_raw = ops.narrow(z_all, 2, 2 * d_in + 2 * n, h)

        xbc = ops.silu(ops.depthwise_causal_conv1d(
            xbc, self.conv_weight, self.conv_bias))
        x = ops.reshape(ops.narrow(xbc, 2, 0, d_in), (bsz, t, h, p))
        b = ops.narrow(xbc, 2, d_in, n)
        c = ops.narrow(xbc, 2, d_in + n, n)

        la, dt = _log_decay(self.a_log, dt_raw, self.dt_bias)
        bbar = _input_scale(dt, b)
        if mode == "linear":
            y = _scan_linear_core(la, bbar, c, x)
        elif mode == "quadratic":
            if t > MAX_QUADRATIC_T:
                raise CapacityError(
                    f"quadratic mode limited to T <= {MAX_QUADRATIC_T}, got {t}")
            y = _quadratic_core(la, bbar, c, x)
        elif mode == "chunked":
            y = _chunked_core(la, bbar, c, x, cfg.chunk)
        else:
            raise ConfigError(f"unknown scan mode {mode!r}")

        y = ops.reshape(y, (bsz, t, d_in))
        y = ops.mul(y, ops.silu(gate))
        return self.out_proj(y)
