"""Reverse-mode automatic differentiation over a recording tape.

A :class:`Tensor` is a thin wrapper around a numpy array.  While a
:class:`Tape` is active (as a context manager), every primitive operation
appends an entry holding its inputs, its output and a backward closure.
``Tape.gradients`` then walks the entries in reverse and accumulates
vector-Jacobian products into per-tensor slots.

Design rules the rest of the package relies on:

* forward functions are pure: recording never mutates inputs, and the same
  code path runs with or without an active tape;
* gradient accumulators are created fresh for every ``gradients`` call, so
  repeated backward passes over one tape do not double-count;
* a tensor that was never recorded on the tape cannot be differentiated
  (that is a :class:`~bevssm.errors.GraphError`, not a silent zero), while a
  recorded tensor that the loss does not depend on yields exact zeros.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float32/float64 array participating in tape recording."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # Arithmetic operators are installed by bevssm.ops at import time so the
    # primitive definitions live next to their backward rules.


class Parameter(Tensor):
    """A trainable tensor; optimizers collect these from layer objects."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """Return the innermost active tape, or None outside any context."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records primitive operations for later reverse-mode differentiation."""

    def __init__(self):
        self._entries: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor,
               vjp: Callable[[np.ndarray], tuple]) -> None:
        """Append one entry.  ``vjp(g)`` must return one cotangent per input
        (``None`` for inputs that need no gradient)."""
        self._entries.append((name, inputs, output, vjp))

    def gradients(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(source) for each source, walking the tape backward.

        Accumulators are fresh per call.  Raises GraphError for a non-scalar
        loss or for sources that never appeared on this tape.
        """
        if not isinstance(loss, Tensor):
            raise GraphError(f"loss must be a Tensor, got {type(loss).__name__}")
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("loss is non-finite; refusing to differentiate")

        seen: set[int] = {id(loss)}
        for _, inputs, output, _ in self._entries:
            seen.add(id(output))
            for t in inputs:
                seen.add(id(t))
        for i, src in enumerate(sources):
            if id(src) not in seen:
                raise GraphError(
                    f"source {i} (shape {src.shape}) was never recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for name, inputs, output, vjp in reversed(self._entries):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            cotangents = vjp(g_out)
            if len(cotangents) != len(inputs):
                raise GraphError(
                    f"op {name!r} returned {len(cotangents)} cotangents "
                    f"for {len(inputs)} inputs")
            for t, g in zip(inputs, cotangents):
                if g is None:
                    continue
                slot = grads.get(id(t))
                grads[id(t)] = g if slot is None else slot + g

        out = []
        for src in sources:
            g = grads.get(id(src))
            if g is None:
                g = np.zeros_like(src.data)
            out.append(np.asarray(g, dtype=src.data.dtype).reshape(src.shape))
        return out


def finite_diff_check(func: Callable[[], Tensor],
                      params: Iterable[Tensor],
                      h: float = 1e-5) -> float:
    """Compare tape gradients of ``func`` against central finite differences.

    ``func`` takes no arguments and must recompute a scalar loss from the
    current contents of ``params`` (which are perturbed in place, one
    coordinate at a time, over every coordinate).  Returns the maximum
    relative error ``|a - b| / max(|a|, |b|, 1e-8)`` across all coordinates.
    """
    params = list(params)
    with Tape() as tape:
        loss = func()
    analytic = tape.gradients(loss, params)

    worst = 0.0
    for p_idx, (p, grad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(func().data.reshape(()))
            flat[i] = orig - h
            f_minus = float(func().data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while perturbing parameter {p_idx} "
                    f"coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a, b = numeric, float(gflat[i])
            rel = abs(a - b) / max(abs(a), abs(b), 1e-8)
            if rel > worst:
                worst = rel
    return worst
