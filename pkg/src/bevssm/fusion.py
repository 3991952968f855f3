"""Temporal fusion of the current BEV grid with an ego-aligned historical one.

``TemporalMamba`` is the main path: channel-concatenate the two grids,
compress 2C -> C with two parallel conv branches (pointwise and spatial, each
batch-normalized, concatenated, SiLU, linear mix, layer norm), serialize the
result along four directions, run every direction through one shared
sequence-mixing block, remerge, and add to the current grid through a heavy
dropout.  The dropout plus skip means the module starts close to an identity
on the current frame and has to earn its use of history.

``DeformableTsa`` (sampling-based cross-frame attention) and ``concat`` mode
(no conv compression, the doubled channels go straight into the sequence
projections) are ablation baselines; ``none`` ignores history entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor
from .bevseq import BevGrid, EgoPose, ego_align, rearrange, remerge
from .errors import ConfigError, DimensionError
from .layers import BatchNorm2d, Conv2d, Linear, LayerNorm, Module, make_rng
from .ssd import Mamba2Block, Mamba2Config
from . import ops

FUSION_MODES = ("temporal_mamba", "deformable_tsa", "concat", "none")


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for all fusion variants (unused fields are ignored per mode)."""

    channels: int = 16
    mode: str = "temporal_mamba"
    kernel: int = 3
    directions: int = 4
    dropout: float = 0.9
    d_model: int = 32
    nheads: int = 2
    headdim: int = 16
    statedim: int = 16
    conv_width: int = 4
    chunk: int = 64
    scan_mode: str = "chunked"
    attn_heads: int = 4
    attn_points: int = 4
    # scan init ranges: the fused residual has no norm layer after the
    # block, so the scan must pass O(1) amplitudes from the start; slow
    # dt ranges attenuate the whole fusion branch below the noise floor
    dt_min: float = 0.3
    dt_max: float = 1.0
    a_min: float = 0.1
    a_max: float = 1.0
    gate_bias: float = 1.0
    conv_gain: float = 2.0
    out_gain: float = 3.0

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.mode!r}; "
                              f"expected one of {FUSION_MODES}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.directions not in (1, 4):
            raise ConfigError(f"directions must be 1 or 4, got {self.directions}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def mamba(self) -> Mamba2Config:
        return Mamba2Config(d_model=self.d_model, nheads=self.nheads,
                            headdim=self.headdim, statedim=self.statedim,
                            conv_width=self.conv_width, chunk=self.chunk,
                            dt_min=self.dt_min, dt_max=self.dt_max,
                            a_min=self.a_min, a_max=self.a_max,
                            gate_bias=self.gate_bias,
                            conv_gain=self.conv_gain, out_gain=self.out_gain)


def _check_pair(cur: BevGrid, hist: BevGrid, channels: int) -> None:
    if cur.array.shape != hist.array.shape:
        raise DimensionError(
            f"current {cur.array.shape} and history {hist.array.shape} disagree")
    if cur.channels != channels:
        raise DimensionError(
            f"fusion built for {channels} channels, grids have {cur.channels}")
    if cur.resolution != hist.resolution:
        raise ConfigError(
            f"resolution mismatch: {cur.resolution} vs {hist.resolution}")


class ConvFuse(Module):
    """2C -> C compression: pointwise and spatial conv branches in parallel.

    Each branch maps the concatenated channels to C/2 and is batch
    normalized; their concatenation passes through SiLU, a linear mix and a
    layer norm.  Conv biases are omitted since the following BN would cancel
    them anyway.
    """

    def __init__(self, channels: int, kernel: int = 3, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        half = channels // 2
        self.point = Conv2d(1, 2 * channels, half, rng=rng, dtype=dtype)
        self.point_bn = BatchNorm2d(half, dtype=dtype)
        self.spatial = Conv2d(kernel, 2 * channels, half, rng=rng, dtype=dtype)
        self.spatial_bn = BatchNorm2d(half, dtype=dtype)
        self.mix = Linear(channels, channels, rng=rng, dtype=dtype)
        self.norm = LayerNorm(channels, dtype=dtype)
        # pass-through taps on top of the random init: the pointwise branch
        # folds the current frame into the first half of the output channels
        # and the spatial branch folds the history into the second half at
        # its center tap.  Keeping the two frames on separate channels means
        # a cell can report "occupied now" and "occupied last frame"
        # independently, which is what motion reading needs, and neither
        # frame has to wait for training to discover a route through the
        # random mixture.
        mid = kernel // 2
        for j in range(half):
            self.point.weight.data[0, 0, j, j] += 0.5
            self.point.weight.data[0, 0, half + j, j] += 0.5
            self.spatial.weight.data[mid, mid, channels + j, j] += 0.5
            self.spatial.weight.data[mid, mid, channels + half + j, j] += 0.5

    def __call__(self, cur, hist, train: bool):
        cat = ops.concat([cur, hist], axis=-1)
        a = self.point_bn(self.point(cat), train)
        b = self.spatial_bn(self.spatial(cat), train)
        z = ops.silu(ops.concat([a, b], axis=-1))
        return self.norm(self.mix(z))


class TemporalMamba(Module):
    """Conv-fused (or concatenated) grids mixed along four serialized orders."""

    def __init__(self, cfg: FusionConfig, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        self.cfg = cfg
        c = cfg.channels
        if cfg.mode == "concat":
            self.fuse = None
            c_in = 2 * c
        else:
            self.fuse = ConvFuse(c, cfg.kernel, rng=rng, dtype=dtype)
            c_in = c
        self.proj_in = Linear(c_in, cfg.d_model, rng=rng, dtype=dtype)
        self.block = Mamba2Block(cfg.mamba(), rng=rng, dtype=dtype)
        # damped output projection: the residual starts small relative to
        # the current frame so early detection sees mostly clean features,
        # but large enough that the two-frame content the scan carries is
        # above the scene noise floor and gradients reach the whole branch
        self.proj_out = Linear(cfg.d_model, c, rng=rng, dtype=dtype)
        self.proj_out.weight.data *= 0.4
        self.proj_out.bias.data[:] = 0.0

    def __call__(self, cur: BevGrid, hist: BevGrid, delta: EgoPose,
                 train: bool = False, seed: int = 0) -> BevGrid:
        cfg = self.cfg
        _check_pair(cur, hist, cfg.channels)
        aligned = ego_align(hist, delta)
        cur_t = ops.as_tensor(cur.data)
        hist_t = ops.as_tensor(aligned.data)
        if self.fuse is not None:
            fused = self.fuse(cur_t, hist_t, train)
        else:
            fused = ops.concat([cur_t, hist_t], axis=-1)

        n = cur.size
        seqs = rearrange(fused, cfg.directions)
        batch = ops.concat([ops.reshape(s, (1,) + s.shape) for s in seqs], axis=0)
        mixed = self.block(self.proj_in(batch), mode=cfg.scan_mode)
        y = self.proj_out(mixed)                     # (D, L, C)
        outs = [ops.reshape(ops.narrow(y, 0, d, 1), y.shape[1:])
                for d in range(y.shape[0])]
        merged = remerge(outs, n, n)
        merged = ops.dropout(merged, cfg.dropout, train, seed)
        return BevGrid(ops.add(cur_t, merged), cur.resolution)


class DeformableTsa(Module):
    """Sampling-based temporal attention baseline.

    Every cell predicts per-head offsets and softmax weights over points in
    the current and the aligned historical value maps, gathers bilinear
    samples, and adds the projected result back onto the current grid.
    Offsets start on fixed rings (zero weight matrix, ring-shaped bias) so
    early training sees a stable neighborhood.
    """

    LEVELS = 2   # current frame + aligned history

    def __init__(self, cfg: FusionConfig, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        self.cfg = cfg
        c, m, k = cfg.channels, cfg.attn_heads, cfg.attn_points
        if c % m:
            raise ConfigError(f"channels {c} not divisible by attn_heads {m}")
        self.offset = Linear(c, m * self.LEVELS * k * 2, rng=rng, dtype=dtype)
        self.offset.weight.data[:] = 0.0
        self.offset.bias.data[:] = self._ring_bias(m, k).astype(dtype)
        self.score = Linear(c, m * self.LEVELS * k, rng=rng, dtype=dtype)
        self.score.weight.data[:] = 0.0
        self.score.bias.data[:] = 0.0
        self.value_cur = Linear(c, c, rng=rng, dtype=dtype)
        self.value_hist = Linear(c, c, rng=rng, dtype=dtype)
        self.out = Linear(c, c, rng=rng, dtype=dtype)

    def _ring_bias(self, heads: int, points: int) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(heads) / heads
        bias = np.zeros((heads, self.LEVELS, points, 2))
        for h, ang in enumerate(angles):
            for p in range(points):
                r = 0.5 * (p + 1)
                bias[h, :, p] = (r * np.sin(ang), r * np.cos(ang))
        return bias.reshape(-1)

    def __call__(self, cur: BevGrid, hist: BevGrid, delta: EgoPose,
                 train: bool = False, seed: int = 0) -> BevGrid:
        cfg = self.cfg
        _check_pair(cur, hist, cfg.channels)
        aligned = ego_align(hist, delta)
        cur_t = ops.as_tensor(cur.data)
        hist_t = ops.as_tensor(aligned.data)
        n, c = cur.size, cfg.channels
        m, k = cfg.attn_heads, cfg.attn_points
        cm = c // m
        q = ops.reshape(cur_t, (n * n, c))

        values = [ops.reshape(self.value_cur(q), (n, n, c)),
                  ops.reshape(self.value_hist(ops.reshape(hist_t, (n * n, c))),
                              (n, n, c))]
        off = ops.reshape(self.offset(q), (n * n, m, self.LEVELS, k, 2))
        scores = ops.reshape(self.score(q), (n * n * m, self.LEVELS * k))
        wts = ops.reshape(ops.softmax(scores), (n * n, m, self.LEVELS, k, 1))

        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        base = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.float64)

        heads = []
        for h in range(m):
            acc = None
            for lvl in range(self.LEVELS):
                vmap = ops.narrow(values[lvl], 2, h * cm, cm)
                off_hl = ops.reshape(ops.narrow(ops.narrow(off, 1, h, 1), 2, lvl, 1),
                                     (n * n, k, 2))
                w_hl = ops.reshape(ops.narrow(ops.narrow(wts, 1, h, 1), 2, lvl, 1),
                                   (n * n, k, 1))
                pts = ops.reshape(ops.add(off_hl, base[:, None, :]), (n * n * k, 2))
                sampled = ops.reshape(ops.bilinear_sample(vmap, pts), (n * n, k, cm))
                contrib = ops.sum_(ops.mul(sampled, w_hl), axis=1)
                acc = contrib if acc is None else ops.add(acc, contrib)
            heads.append(acc)
        mixed = self.out(ops.concat(heads, axis=-1))
        return BevGrid(ops.add(cur_t, ops.reshape(mixed, (n, n, c))),
                       cur.resolution)


class NoFusion(Module):
    """Ignore history; the current grid passes through untouched."""

    def __init__(self, cfg: FusionConfig, rng=None, dtype=np.float32):
        self.cfg = cfg

    def __call__(self, cur: BevGrid, hist: BevGrid, delta: EgoPose,
                 train: bool = False, seed: int = 0) -> BevGrid:
        return BevGrid(ops.as_tensor(cur.data), cur.resolution)


def build_fusion(cfg: FusionConfig, rng=None, dtype=np.float32) -> Module:
    """Instantiate the fusion module named by ``cfg.mode``."""
    if cfg.mode in ("temporal_mamba", "concat"):
        return TemporalMamba(cfg, rng=rng, dtype=dtype)
    if cfg.mode == "deformable_tsa":
        return DeformableTsa(cfg, rng=rng, dtype=dtype)
    if cfg.mode == "none":
        return NoFusion(cfg, rng=rng, dtype=dtype)
    raise ConfigError(f"unknown fusion mode {cfg.mode!r}")


def single_direction(cfg: FusionConfig) -> FusionConfig:
    """Convenience for the direction ablation."""
    return replace(cfg, directions=1)
