"""BEV grid geometry, four-direction serialization and ego-motion alignment.

A square grid of metric cells is flattened into sequences along four plain
raster orders (no serpentine folding): row-major, column-major, and their
full reversals.  ``remerge`` inverts each permutation and averages, which is
exact (bitwise) when the per-direction sequences are identical, so a
rearrange/remerge round trip reproduces the grid.

Coordinate conventions used throughout the package: grid index [row, col]
maps to metric (y, x), with cell centers at ``(idx + 0.5) * resolution -
extent``; the ego sits at the metric origin facing +x.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from . import ops

DIRECTIONS = ("fwd_l", "fwd_u", "rev_l", "rev_u")


@dataclass
class BevGrid:
    """A square BEV feature map plus the metric size of one cell."""

    data: object            # (H, W, C) ndarray or Tensor
    resolution: float

    def __post_init__(self):
        shape = self.data.shape
        if len(shape) != 3:
            raise DimensionError(f"BEV data must be (H, W, C), got {shape}")
        if shape[0] != shape[1]:
            raise DimensionError(f"BEV grid must be square, got {shape[0]}x{shape[1]}")
        if not (np.isfinite(self.resolution) and self.resolution > 0):
            raise ConfigError(f"resolution must be positive, got {self.resolution}")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> float:
        """Half the metric side length; the grid covers [-extent, extent)^2."""
        return 0.5 * self.size * self.resolution

    @property
    def array(self) -> np.ndarray:
        return self.data.data if isinstance(self.data, Tensor) else self.data

    def cell_to_metric(self, rows, cols):
        y = (np.asarray(rows) + 0.5) * self.resolution - self.extent
        x = (np.asarray(cols) + 0.5) * self.resolution - self.extent
        return x, y

    def metric_to_cell(self, x, y):
        """Fractional (row, col); integers land on cell centers."""
        row = (np.asarray(y) + self.extent) / self.resolution - 0.5
        col = (np.asarray(x) + self.extent) / self.resolution - 0.5
        return row, col


@lru_cache(maxsize=32)
def serial_orders(h: int, w: int) -> dict[str, np.ndarray]:
    """Flat visit orders (into a row-major flattening) for the four directions."""
    base = np.arange(h * w, dtype=np.int64)
    fwd_l = base
    fwd_u = base.reshape(h, w).T.reshape(-1)
    orders = {"fwd_l": fwd_l, "fwd_u": fwd_u,
              "rev_l": fwd_l[::-1].copy(), "rev_u": fwd_u[::-1].copy()}
    for arr in orders.values():
        arr.setflags(write=False)
    return orders


@lru_cache(maxsize=32)
def _inverse_orders(h: int, w: int) -> dict[str, np.ndarray]:
    inv = {}
    for name, order in serial_orders(h, w).items():
        ia = np.empty_like(order)
        ia[order] = np.arange(order.size, dtype=np.int64)
        ia.setflags(write=False)
        inv[name] = ia
    return inv


def _directions(count: int) -> tuple[str, ...]:
    if count == 4:
        return DIRECTIONS
    if count == 1:
        return DIRECTIONS[:1]
    raise ConfigError(f"direction count must be 1 or 4, got {count}")


def rearrange(grid, directions: int = 4) -> list[Tensor]:
    """Serialize an (H, W, C) map into one (H*W, C) sequence per direction."""
    grid = ops.as_tensor(grid)
    if grid.ndim != 3:
        raise DimensionError(f"expected (H, W, C), got {grid.shape}")
    h, w, c = grid.shape
    flat = ops.reshape(grid, (h * w, c))
    orders = serial_orders(h, w)
    return [ops.take_rows(flat, orders[name]) for name in _directions(directions)]


def remerge(seqs, h: int, w: int) -> Tensor:
    """Undo each direction's permutation and average back to (H, W, C).

    The average is computed pairwise, which keeps it bitwise exact when all
    four sequences carry identical values (as in a pure round trip).
    """
    names = _directions(len(seqs)) if len(seqs) in (1, 4) else None
    if names is None:
        raise ConfigError(f"expected 1 or 4 sequences, got {len(seqs)}")
    inv = _inverse_orders(h, w)
    restored = []
    for name, seq in zip(names, seqs):
        seq = ops.as_tensor(seq)
        if seq.shape[0] != h * w:
            raise DimensionError(
                f"sequence length {seq.shape[0]} != grid cells {h * w}")
        restored.append(ops.take_rows(seq, inv[name]))
    if len(restored) == 1:
        merged = restored[0]
    else:
        merged = ops.mul(ops.add(ops.add(restored[0], restored[1]),
                                 ops.add(restored[2], restored[3])), 0.25)
    return ops.reshape(merged, (h, w, merged.shape[-1]))


# ---------------------------------------------------------------------------
# ego motion


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


@dataclass(frozen=True)
class EgoPose:
    """A planar pose (x, y, yaw); yaw measured from +x toward +y."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def relative_to(self, other: "EgoPose") -> "EgoPose":
        """This pose expressed in ``other``'s frame."""
        dx = self.x - other.x
        dy = self.y - other.y
        c, s = np.cos(-other.yaw), np.sin(-other.yaw)
        return EgoPose(x=c * dx - s * dy, y=s * dx + c * dy,
                       yaw=float(wrap_angle(self.yaw - other.yaw)))


def ego_align(hist: BevGrid, delta: EgoPose) -> BevGrid:
    """Resample a historical grid into the current ego frame.

    ``delta`` is the current ego pose expressed in the historical frame.  For
    each current cell center p the sampling location in the historical grid
    is R(delta.yaw) @ p + (delta.x, delta.y); content that leaves the field
    of view fades to zero through the bilinear border handling.  An identity
    delta returns the features bitwise unchanged.
    """
    if delta.x == 0.0 and delta.y == 0.0 and delta.yaw == 0.0:
        return BevGrid(hist.data, hist.resolution)
    n = hist.size
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    px, py = hist.cell_to_metric(rows.reshape(-1), cols.reshape(-1))
    c, s = np.cos(delta.yaw), np.sin(delta.yaw)
    hx = c * px - s * py + delta.x
    hy = s * px + c * py + delta.y
    u, v = hist.metric_to_cell(hx, hy)
    pts = np.stack([u, v], axis=1)
    sampled = ops.bilinear_sample(ops.as_tensor(hist.data), Tensor(pts))
    out = ops.reshape(sampled, (n, n, hist.channels))
    if isinstance(hist.data, np.ndarray):
        return BevGrid(out.data, hist.resolution)
    return BevGrid(out, hist.resolution)
