"""Block Hadamard matrices and the Random Hadamard Transform (RHT).

The quantized linear layer rotates both operands of a backward matmul with
the same signed block-Hadamard matrix before quantizing them: ``A -> A S H``
where ``S`` is a random +/-1 diagonal and ``H`` is block-diagonal with d x d
Hadamard blocks.  The rotation is orthogonal, so applying it to both
operands of a product ``A @ B.T`` leaves the product unchanged while
spreading large entries across each block, which conditions the operands
for very low-bit quantization.

Sign vectors are derived from a counter-based generator keyed by
``(seed, layer, step, side)`` so that the two operands of one matmul — and
any replay of it — see identical signs without storing them.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
from typing import Tuple

import numpy as np

from . import fpcodec
from .blockquant import as_matrix

__all__ = [
    "DEFAULT_BLOCK",
    "ApplySide",
    "RhtContext",
    "hadamard_dense",
    "rht_context",
    "rht_apply",
    "rht_pair_identity_check",
]

DEFAULT_BLOCK = 32


class ApplySide(enum.Enum):
    """Which side of the input the rotation multiplies (columns only)."""

    RIGHT = "right"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@functools.lru_cache(maxsize=None)
def hadamard_dense(d: int) -> np.ndarray:
    """Dense orthogonal Hadamard matrix of size d (power of two, >= 2).

    Built by the doubling recursion H_{2m} = (1/sqrt(2)) H_2 (x) H_m, so every
    entry is +/- 1/sqrt(d) and H @ H.T = I.  The returned array is cached and
    read-only.
    """
    if not isinstance(d, (int, np.integer)) or d < 2 or not _is_pow2(int(d)):
        raise ValueError(f"Hadamard size must be a power of two >= 2, got {d!r}")
    h2 = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)
    m = h2
    while m.shape[0] < d:
        m = np.kron(h2, m)
    m.flags.writeable = False
    return m


@dataclasses.dataclass(frozen=True, eq=False)
class RhtContext:
    """Sign flips plus block-Hadamard rotation for one matmul's contraction axis.

    ``signs`` has the padded length (``dim`` rounded up to a multiple of
    ``block``); entries beyond ``dim`` are +1 so zero padding stays zero.
    ``provenance`` records how the signs were derived, for diagnostics only.
    """

    dim: int
    block: int
    signs: np.ndarray
    provenance: Tuple = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"contraction length must be >= 1, got {self.dim}")
        if self.block < 2 or not _is_pow2(self.block):
            raise ValueError(
                f"Hadamard block must be a power of two >= 2, got {self.block}"
            )
        if self.signs.shape != (self.padded_dim,):
            raise ValueError(
                f"signs must have padded length {self.padded_dim}, "
                f"got shape {self.signs.shape}"
            )

    @property
    def padded_dim(self) -> int:
        return -(-self.dim // self.block) * self.block


def rht_context(
    dim: int,
    *,
    seed: int,
    layer: str,
    step: int,
    side: str,
    block: int = DEFAULT_BLOCK,
) -> RhtContext:
    """Create a context with signs drawn from the (seed, layer, step, side) stream."""
    if dim < 1:
        raise ValueError(f"contraction length must be >= 1, got {dim}")
    if block < 2 or not _is_pow2(block):
        raise ValueError(f"Hadamard block must be a power of two >= 2, got {block}")
    padded = -(-dim // block) * block
    rng = fpcodec.stream(seed, "rht", layer, step, side)
    signs = np.ones(padded, dtype=np.float32)
    signs[:dim] = np.where(rng.random(dim) < 0.5, -1.0, 1.0)
    signs.flags.writeable = False
    return RhtContext(
        dim=dim,
        block=block,
        signs=signs,
        provenance=(seed, layer, step, side),
    )


_GEMM_MAX_BLOCK = 128


@functools.lru_cache(maxsize=None)
def _hadamard_pm1(d: int) -> np.ndarray:
    """Unnormalized +/-1 Hadamard matrix of size d, float32, read-only."""
    h = np.ones((1, 1), dtype=np.float32)
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    h.flags.writeable = False
    return h


def _fwht_last_axis(blocks: np.ndarray, d: int) -> np.ndarray:
    """Multiply each length-d vector on the last axis by the Hadamard matrix.

    Small blocks go through one BLAS product with the cached +/-1 matrix;
    large ones use the classic O(d log d) butterfly.
    """
    if d <= _GEMM_MAX_BLOCK:
        out = blocks.reshape(-1, d) @ _hadamard_pm1(d)
        out *= np.float32(1.0 / math.sqrt(d))
        return out.reshape(blocks.shape)
    y = blocks
    h = 1
    while h < d:
        y = y.reshape(y.shape[0], y.shape[1], -1, 2, h)
        top = y[..., 0, :] + y[..., 1, :]
        bot = y[..., 0, :] - y[..., 1, :]
        y = np.stack((top, bot), axis=-2)
        h *= 2
    return y.reshape(y.shape[0], y.shape[1], d) * np.float32(1.0 / math.sqrt(d))


def rht_apply(
    a,
    ctx: RhtContext,
    side: ApplySide = ApplySide.RIGHT,
    *,
    keep_padding: bool = False,
) -> np.ndarray:
    """Return ``A @ diag(signs) @ H`` computed blockwise along the columns.

    The input's column count must equal ``ctx.dim``.  Columns are zero-padded
    up to a multiple of ``ctx.block`` for the transform; by default the output
    is cropped back to ``ctx.dim`` columns.  Pass ``keep_padding=True`` to get
    the full padded width — required when the result feeds a contraction whose
    other operand is transformed with the same context, because cropping
    discards coordinates the rotation moved mass into.
    """
    if side is not ApplySide.RIGHT:
        raise ValueError(f"only right-side application is supported, got {side!r}")
    m = as_matrix(a)
    if m.shape[1] != ctx.dim:
        raise ValueError(
            f"input has {m.shape[1]} columns but context expects {ctx.dim}"
        )
    rows = m.shape[0]
    padded = ctx.padded_dim
    buf = np.zeros((rows, padded), dtype=np.float32)
    buf[:, : ctx.dim] = m
    buf *= ctx.signs
    out = _fwht_last_axis(
        buf.reshape(rows, padded // ctx.block, ctx.block), ctx.block
    ).reshape(rows, padded)
    if keep_padding or padded == ctx.dim:
        return out
    return np.ascontiguousarray(out[:, : ctx.dim])


def rht_pair_identity_check(a, b, ctx: RhtContext) -> float:
    """Max absolute deviation of ``(ASH)(BSH)^T`` from ``A @ B.T``.

    Uses padded-width transforms so the identity holds for any contraction
    length; for unit-scale binary32 inputs the deviation stays below 1e-4.
    """
    ma = as_matrix(a)
    mb = as_matrix(b)
    if ma.shape[1] != ctx.dim or mb.shape[1] != ctx.dim:
        raise ValueError(
            f"operands must both have {ctx.dim} columns, "
            f"got {ma.shape[1]} and {mb.shape[1]}"
        )
    exact = ma.astype(np.float64) @ mb.astype(np.float64).T
    ta = rht_apply(ma, ctx, keep_padding=True)
    tb = rht_apply(mb, ctx, keep_padding=True)
    got = (ta @ tb.T).astype(np.float64)
    dev = np.abs(exact - got)
    return float(dev.max()) if dev.size else 0.0
