"""Double-block matrix quantization.

A matrix is quantized in two nested levels along a group axis:

* an outer block (128 elements, a full line, or the whole tensor) carries a
  binary32 scale S_g = amax / (448 * grid_max), chosen so the rescaled block
  fits the E4M3 x element-grid product range;
* each inner block (16 consecutive elements, or a 16x16 tile) carries an
  E4M3 scale S_b = round_e4m3(amax(X / S_g) / grid_max);
* elements store low-bit codes P = round(X / (S_g * S_b)) clamped to the grid.

Zero-amax blocks take scale 1. Dimensions that don't divide the group pad
with zeros conceptually: padded positions hold code 0 and never affect any
amax. Dequantization is the float32 product P * S_b * S_g cropped back to the
logical shape, with both zero codes normalized to +0.0.

Orientation fixes the group axis: ROW_GROUPS_1X16 groups along rows,
COL_GROUPS_16X1 along columns (stored as the row-wise quantization of the
transpose, making the transpose contract exact by construction), and
SQUARE_16X16 uses 16x16 tiles with a per-tensor outer scale. Outer
granularities tile along the same axis as the groups.

Clamp events (elements pushed back inside the grid because the E4M3 scale
rounded down) are counted with a one-ulp tolerance so float32 roundoff at a
block carrier doesn't register; they are the scheme's only bias source and
are exported as a diagnostic.

File serialization for matrices lives in :mod:`nvfp4sim.matrixio`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import fastpath
from . import fpcodec as fc

__all__ = [
    "Orientation",
    "OuterGranularity",
    "QuantizedMatrix",
    "as_matrix",
    "quantize_double_block",
    "quantize_dequantize",
    "quantize_mxfp4",
    "quantize_with_scales",
    "dequantize",
    "element_block_amax",
    "requantize",
    "unpacked_codes",
]

F32 = np.float32
_SCALE_TOP = np.float32(448.0)
_CLAMP_TOL = 1 + 1e-6  # one-ulp grace before an overshoot counts as a clamp

# The fused route prefers the compiled kernel when numba is importable; the
# numpy expressions remain both the fallback and the reference the kernel is
# tested against. Tests flip this flag to pin down each route separately.
_FASTPATH_ENABLED = True


class Orientation(enum.Enum):
    ROW_GROUPS_1X16 = "row"
    COL_GROUPS_16X1 = "col"
    SQUARE_16X16 = "square"


class OuterGranularity(enum.Enum):
    BLOCK_1X128 = "1x128"
    PER_ROW = "per-row"
    PER_TENSOR = "per-tensor"


def as_matrix(m) -> np.ndarray:
    a = np.ascontiguousarray(m, dtype=F32)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


@dataclass(eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    orientation: Orientation
    outer: OuterGranularity
    element_fmt: str  # e2m1 | e3m2 | e2m3
    scale_fmt: str  # e4m3 | e8m0
    group: int  # inner block length (16, or 32 for MXFP4)
    codes: np.ndarray  # packed uint8; 4-bit formats hold two codes per byte,
    # low nibble = lower linear index in the work grid
    inner_scales: np.ndarray  # float32, one per inner block, work-grid order
    outer_scales: np.ndarray  # float32, one per outer block
    clamp_count: int

    @property
    def shape(self):
        return (self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            (self.rows, self.cols, self.orientation, self.outer) ==
            (other.rows, other.cols, other.orientation, other.outer)
            and (self.element_fmt, self.scale_fmt, self.group, self.clamp_count) ==
            (other.element_fmt, other.scale_fmt, other.group, other.clamp_count)
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.inner_scales, other.inner_scales)
            and np.array_equal(self.outer_scales, other.outer_scales)
        )


# ── geometry helpers ─────────────────────────────────────────────────────────


def _ceil_to(n: int, k: int) -> int:
    return -(-n // k) * k


def _work_dims(q: QuantizedMatrix):
    """(work_rows, padded_cols, real_cols) of the internal row-major grid."""
    if q.orientation is Orientation.SQUARE_16X16:
        return _ceil_to(q.rows, 16), _ceil_to(q.cols, 16), q.cols
    if q.orientation is Orientation.ROW_GROUPS_1X16:
        wr, real = q.rows, q.cols
    else:
        wr, real = q.cols, q.rows
    return wr, _ceil_to(real, q.group), real


def _pack(codes_grid: np.ndarray, bits: int) -> np.ndarray:
    flat = codes_grid.reshape(-1).astype(np.uint8)
    if bits != 4:
        return flat
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)


def unpacked_codes(q: QuantizedMatrix) -> np.ndarray:
    """The padded work grid of element codes (uint8), row-major."""
    wr, wc, _ = _work_dims(q)
    fmt = fc.get_format(q.element_fmt)
    if fmt.bits == 4:
        flat = np.empty(q.codes.size * 2, dtype=np.uint8)
        flat[0::2] = q.codes & 0x0F
        flat[1::2] = q.codes >> 4
    else:
        flat = q.codes
    return flat.reshape(wr, wc)


def element_block_amax(m, orientation: Orientation | str) -> np.ndarray:
    """Per-element amax of |m| over the element's inner scaling block.

    Returned in the logical layout of ``m``.  Zero padding never raises a
    block maximum, so ragged trailing blocks are exact.
    """
    m = as_matrix(m)
    orientation = Orientation(orientation)
    if orientation is Orientation.SQUARE_16X16:
        r, c = m.shape
        wr, wc = _ceil_to(r, 16), _ceil_to(c, 16)
        W = np.zeros((wr, wc), dtype=F32)
        W[:r, :c] = np.abs(m)
        a = W.reshape(wr // 16, 16, wc // 16, 16).max(axis=(1, 3))
        out = np.repeat(np.repeat(a, 16, 0), 16, 1)[:r, :c]
        return np.ascontiguousarray(out, dtype=F32)
    work = m if orientation is Orientation.ROW_GROUPS_1X16 else m.T
    wr, real = work.shape
    wc = _ceil_to(real, 16)
    W = np.zeros((wr, wc), dtype=F32)
    W[:, :real] = np.abs(work)
    a = W.reshape(wr, wc // 16, 16).max(axis=2)
    out = np.repeat(a, 16, axis=1)[:, :real]
    if orientation is Orientation.COL_GROUPS_16X1:
        out = out.T
    return np.ascontiguousarray(out, dtype=F32)


def _expand_scales(q: QuantizedMatrix):
    """Per-element (sb, sg) broadcast over the padded work grid."""
    wr, wc, _ = _work_dims(q)
    if q.orientation is Orientation.SQUARE_16X16:
        tr, tc = wr // 16, wc // 16
        sb = np.repeat(np.repeat(q.inner_scales.reshape(tr, tc), 16, 0), 16, 1)
        sg = q.outer_scales.reshape(1, 1)
        return sb, sg
    n_in = wc // q.group
    sb = np.repeat(q.inner_scales.reshape(wr, n_in), q.group, axis=1)
    if q.outer is OuterGranularity.PER_TENSOR:
        sg = q.outer_scales.reshape(1, 1)
    elif q.outer is OuterGranularity.PER_ROW:
        sg = q.outer_scales.reshape(wr, 1)
    else:
        seg_lens = _segment_lengths(wc)
        sg = np.repeat(q.outer_scales.reshape(wr, len(seg_lens)), seg_lens, axis=1)
    return sb, sg


def _segment_lengths(wc: int):
    offs = list(range(0, wc, 128))
    return [min(128, wc - o) for o in offs]


# ── core quantization ────────────────────────────────────────────────────────


def _scales_for(absW, outer, big):
    """(outer scales in storage layout, per-element broadcast view)."""
    wr, wc = absW.shape
    if outer is OuterGranularity.PER_TENSOR:
        a = np.float32(absW.max(initial=0.0))
        sg_flat = np.array([a / big if a > 0 else 1.0], dtype=F32)
        return sg_flat, sg_flat.reshape(1, 1)
    if outer is OuterGranularity.PER_ROW:
        a = absW.max(axis=1)
        sg = np.where(a > 0, a / big, F32(1.0)).astype(F32)
        return sg, sg.reshape(wr, 1)
    offs = np.arange(0, wc, 128)
    a = np.maximum.reduceat(absW, offs, axis=1)
    sg = np.where(a > 0, a / big, F32(1.0)).astype(F32)
    return sg.reshape(-1), np.repeat(sg, _segment_lengths(wc), axis=1)


def _block_scales(a_in: np.ndarray, grid_max: np.float32) -> np.ndarray:
    t = np.minimum(a_in / grid_max, _SCALE_TOP)
    pos = t > 0
    safe = np.where(pos, t, F32(1.0))
    sb = fc.round_scale_e4m3(safe)
    return np.where(pos, sb, F32(1.0)).astype(F32)


def _round_grid(ratio, fmt, mode, rng):
    if mode is fc.RoundingMode.DETERMINISTIC:
        return fc.round_codes_det(ratio, fmt)
    if rng is None:
        raise ValueError("stochastic quantization needs an rng")
    return fc.round_codes_stoch(ratio, fmt, rng)


def _grouped_ratio(work, group, outer, fmt):
    """Shared scale/ratio pipeline for grouped orientations.

    Returns (clipped ratio grid, sb storage, sg storage, per-element sb, sg
    broadcast views, clamp count). Both the code-producing route and the fused
    value route go through here so their arithmetic is identical op for op.
    """
    wr, real = work.shape
    wc = _ceil_to(real, group)
    W = np.zeros((wr, wc), dtype=F32)
    W[:, :real] = work
    grid_max = np.float32(fmt.max)
    big = _SCALE_TOP * grid_max

    absW = np.abs(W)
    sg_flat, sg_elem = _scales_for(absW, outer, big)
    Xp = W / sg_elem
    n_in = wc // group
    a_in = np.abs(Xp).reshape(wr, n_in, group).max(axis=2)
    sb = _block_scales(a_in, grid_max)
    sb_elem = np.repeat(sb, group, axis=1)
    ratio = Xp / sb_elem
    clamps = int(np.count_nonzero(np.abs(ratio) > grid_max * _CLAMP_TOL))
    np.clip(ratio, -grid_max, grid_max, out=ratio)
    return ratio, sb, sg_flat, sb_elem, sg_elem, clamps


def _square_ratio(m, fmt):
    """Shared scale/ratio pipeline for 16x16 tiles (per-tensor outer)."""
    r_real, c_real = m.shape
    wr, wc = _ceil_to(r_real, 16), _ceil_to(c_real, 16)
    W = np.zeros((wr, wc), dtype=F32)
    W[:r_real, :c_real] = m
    grid_max = np.float32(fmt.max)
    big = _SCALE_TOP * grid_max

    a = np.float32(np.abs(W).max(initial=0.0))
    sg = np.array([a / big if a > 0 else 1.0], dtype=F32)
    Xp = W / sg[0]
    tr, tc = wr // 16, wc // 16
    tiles = np.abs(Xp).reshape(tr, 16, tc, 16)
    a_in = tiles.max(axis=(1, 3))
    sb = _block_scales(a_in, grid_max)
    sb_elem = np.repeat(np.repeat(sb, 16, 0), 16, 1)
    ratio = Xp / sb_elem
    clamps = int(np.count_nonzero(np.abs(ratio) > grid_max * _CLAMP_TOL))
    np.clip(ratio, -grid_max, grid_max, out=ratio)
    return ratio, sb, sg, sb_elem, clamps


def _quantize_grouped(work, group, outer, fmt, mode, rng):
    """Quantize a row-major work array with groups along the last axis."""
    ratio, sb, sg_flat, _, _, clamps = _grouped_ratio(work, group, outer, fmt)
    codes_grid = _round_grid(ratio, fmt, mode, rng)
    return codes_grid, sb.reshape(-1), sg_flat, clamps


def _quantize_square(m, fmt, mode, rng):
    ratio, sb, sg, _, clamps = _square_ratio(m, fmt)
    codes_grid = _round_grid(ratio, fmt, mode, rng)
    return codes_grid, sb.reshape(-1), sg, clamps


def _round_values(ratio, fmt, mode, rng):
    """Grid values for a clipped ratio grid, skipping the code round-trip.

    Mirrors ``_round_grid`` followed by ``values_from_codes`` exactly: the
    same magnitude-rounding cores run on the same array, so a stochastic rng
    is consumed identically, and the sign is applied the way the code path
    applies it (select on the sign bit, so -0 ratios yield -0 values here and
    the final zero normalization equalizes both routes).
    """
    ax = np.abs(ratio)
    if mode is fc.RoundingMode.DETERMINISTIC:
        mi = fc._mag_round_det(ax, fmt)
    else:
        if rng is None:
            raise ValueError("stochastic quantization needs an rng")
        mi = fc._mag_round_stoch(ax, fmt, rng)
    v = fmt.mag[mi]
    return np.where(np.signbit(ratio), -v, v).astype(F32, copy=False)


_OUTER_MODE = {
    OuterGranularity.PER_TENSOR: fastpath.OUTER_PER_TENSOR,
    OuterGranularity.PER_ROW: fastpath.OUTER_PER_ROW,
    OuterGranularity.BLOCK_1X128: fastpath.OUTER_BLOCK_1X128,
}

_NO_DRAWS = np.zeros((1, 1), dtype=np.float64)


def _fused_grouped_fast(work, group, outer, fmt, mode, rng):
    """Compiled single-pass evaluation of the grouped fused route.

    Pads and draws exactly like the numpy route (one uniform per padded grid
    position for stochastic mode), then hands the grid to the kernel.
    """
    wr, real = work.shape
    wc = _ceil_to(real, group)
    W = np.zeros((wr, wc), dtype=F32)
    W[:, :real] = work
    grid_max = np.float32(fmt.max)
    big = _SCALE_TOP * grid_max
    if mode is fc.RoundingMode.DETERMINISTIC:
        use_stoch = False
        draws = _NO_DRAWS
    else:
        if rng is None:
            raise ValueError("stochastic quantization needs an rng")
        use_stoch = True
        draws = rng.random((wr, wc))
    e4 = fc.FP8_E4M3
    out = np.empty((wr, wc), dtype=F32)
    clamps = fastpath._grouped_values(
        W,
        group,
        _OUTER_MODE[outer],
        use_stoch,
        draws,
        fmt.mag,
        fmt._pos_mids,
        e4.mag,
        e4._pos_mids,
        grid_max,
        big,
        float(grid_max * _CLAMP_TOL),
        out,
    )
    return out, int(clamps)


def quantize_double_block(
    m,
    orientation: Orientation | str,
    outer: OuterGranularity | str | None = None,
    mode: fc.RoundingMode | str = "det",
    rng=None,
    element_fmt: str = "e2m1",
) -> QuantizedMatrix:
    """Quantize a binary32 matrix with the two-level block scheme."""
    m = as_matrix(m)
    orientation = Orientation(orientation)
    mode = fc.RoundingMode.coerce(mode)
    fmt = fc.get_format(element_fmt)
    if orientation is Orientation.SQUARE_16X16:
        if outer is not None and OuterGranularity(outer) is not OuterGranularity.PER_TENSOR:
            raise ValueError("square tiles use a per-tensor outer scale")
        outer = OuterGranularity.PER_TENSOR
        codes_grid, sb, sg, clamps = _quantize_square(m, fmt, mode, rng)
    else:
        outer = OuterGranularity(outer) if outer is not None else OuterGranularity.BLOCK_1X128
        work = m if orientation is Orientation.ROW_GROUPS_1X16 else m.T
        codes_grid, sb, sg, clamps = _quantize_grouped(work, 16, outer, fmt, mode, rng)
    return QuantizedMatrix(
        rows=m.shape[0],
        cols=m.shape[1],
        orientation=orientation,
        outer=outer,
        element_fmt=fmt.name,
        scale_fmt="e4m3",
        group=16,
        codes=_pack(codes_grid, fmt.bits),
        inner_scales=sb,
        outer_scales=sg,
        clamp_count=clamps,
    )


def quantize_dequantize(
    m,
    orientation: Orientation | str,
    outer: OuterGranularity | str | None = None,
    mode: fc.RoundingMode | str = "det",
    rng=None,
    element_fmt: str = "e2m1",
) -> tuple[np.ndarray, int]:
    """Quantize and immediately reconstruct, without materializing codes.

    Returns ``(values, clamp_count)`` where ``values`` is bit-identical to
    ``dequantize(quantize_double_block(...))`` with the same arguments — the
    training hot path uses this to skip code packing/unpacking. A stochastic
    ``rng`` is consumed exactly as the two-step route consumes it, so the two
    routes are interchangeable mid-stream.
    """
    m = as_matrix(m)
    orientation = Orientation(orientation)
    mode = fc.RoundingMode.coerce(mode)
    fmt = fc.get_format(element_fmt)
    if orientation is Orientation.SQUARE_16X16:
        if outer is not None and OuterGranularity(outer) is not OuterGranularity.PER_TENSOR:
            raise ValueError("square tiles use a per-tensor outer scale")
        ratio, _, sg, sb_elem, clamps = _square_ratio(m, fmt)
        vals = _round_values(ratio, fmt, mode, rng)
        out = (vals * sb_elem) * sg.reshape(1, 1)
        out = out[: m.shape[0], : m.shape[1]]
    else:
        work = m if orientation is Orientation.ROW_GROUPS_1X16 else m.T
        out_gran = (
            OuterGranularity(outer) if outer is not None else OuterGranularity.BLOCK_1X128
        )
        if fastpath.AVAILABLE and _FASTPATH_ENABLED:
            grid, clamps = _fused_grouped_fast(work, 16, out_gran, fmt, mode, rng)
        else:
            ratio, _, _, sb_elem, sg_elem, clamps = _grouped_ratio(work, 16, out_gran, fmt)
            vals = _round_values(ratio, fmt, mode, rng)
            grid = (vals * sb_elem) * sg_elem
        out = grid[:, : work.shape[1]]
        if orientation is Orientation.COL_GROUPS_16X1:
            out = out.T
    out = np.ascontiguousarray(out, dtype=F32)
    out[out == 0] = 0.0
    return out, clamps


def quantize_mxfp4(m, mode: fc.RoundingMode | str = "det", rng=None) -> QuantizedMatrix:
    """MX-style quantization: 1x32 groups, one E8M0 scale each, no outer level.

    The power-of-two scale is the ceiling of amax/6, so |P| <= 6 exactly and
    division by the scale is lossless in float32.
    """
    m = as_matrix(m)
    mode = fc.RoundingMode.coerce(mode)
    fmt = fc.FP4_E2M1
    group = 32
    wr, real = m.shape
    wc = _ceil_to(real, group)
    W = np.zeros((wr, wc), dtype=F32)
    W[:, :real] = m
    n_in = wc // group
    a_in = np.abs(W).reshape(wr, n_in, group).max(axis=2)
    grid_max = np.float32(fmt.max)
    pos = a_in > 0
    sb = np.where(
        pos, fc.e8m0_pow2_ceil(np.where(pos, a_in / grid_max, 1.0)), F32(1.0)
    ).astype(F32)
    ratio = W / np.repeat(sb, group, axis=1)
    clamps = int(np.count_nonzero(np.abs(ratio) > grid_max * _CLAMP_TOL))
    np.clip(ratio, -grid_max, grid_max, out=ratio)
    codes_grid = _round_grid(ratio, fmt, mode, rng)
    return QuantizedMatrix(
        rows=wr,
        cols=real,
        orientation=Orientation.ROW_GROUPS_1X16,
        outer=OuterGranularity.PER_TENSOR,
        element_fmt=fmt.name,
        scale_fmt="e8m0",
        group=group,
        codes=_pack(codes_grid, fmt.bits),
        inner_scales=sb.reshape(-1),
        outer_scales=np.ones(1, dtype=F32),
        clamp_count=clamps,
    )


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Float32 reconstruction (P * S_b) * S_g, cropped, zeros normalized to +0."""
    fmt = fc.get_format(q.element_fmt)
    vals = fc.values_from_codes(unpacked_codes(q), fmt)
    sb, sg = _expand_scales(q)
    out = (vals * sb) * sg
    _, _, real = _work_dims(q)
    if q.orientation is Orientation.SQUARE_16X16:
        out = out[: q.rows, : q.cols]
    else:
        out = out[:, :real]
        if q.orientation is Orientation.COL_GROUPS_16X1:
            out = out.T
    out = np.ascontiguousarray(out, dtype=F32)
    out[out == 0] = 0.0
    return out


def requantize(
    q: QuantizedMatrix,
    orientation: Orientation | str | None = None,
    outer: OuterGranularity | str | None = None,
    mode: fc.RoundingMode | str = "det",
    rng=None,
) -> QuantizedMatrix:
    """Dequantize and re-quantize, optionally into a different blocking."""
    orientation = q.orientation if orientation is None else Orientation(orientation)
    if outer is None and orientation is not Orientation.SQUARE_16X16:
        outer = q.outer
    return quantize_double_block(
        dequantize(q), orientation, outer=outer, mode=mode, rng=rng,
        element_fmt=q.element_fmt,
    )


def quantize_with_scales(
    m,
    ref: QuantizedMatrix,
    mode: fc.RoundingMode | str = "det",
    rng=None,
    with_mag_codes: bool = False,
):
    """Quantize-dequantize `m` under `ref`'s frozen scale chain.

    This is the live-scales quantizer view used by oscillation tracking: no
    amax is recomputed, values outside the frozen range clamp to the grid.
    Returns the dequantized values; with_mag_codes additionally returns the
    per-element magnitude code (|P| index) in the logical layout.
    """
    m = as_matrix(m)
    if m.shape != (ref.rows, ref.cols):
        raise ValueError(f"shape {m.shape} does not match reference {ref.shape}")
    fmt = fc.get_format(ref.element_fmt)
    grid_max = np.float32(fmt.max)
    mode = fc.RoundingMode.coerce(mode)

    if ref.orientation is Orientation.SQUARE_16X16:
        work = m
    elif ref.orientation is Orientation.ROW_GROUPS_1X16:
        work = m
    else:
        work = m.T
    wr, wc, real = _work_dims(ref)
    W = np.zeros((wr, wc), dtype=F32)
    if ref.orientation is Orientation.SQUARE_16X16:
        W[: m.shape[0], : m.shape[1]] = work
    else:
        W[:, :real] = work

    sb, sg = _expand_scales(ref)
    ratio = (W / sg) / sb
    np.clip(ratio, -grid_max, grid_max, out=ratio)
    codes_grid = _round_grid(ratio, fmt, mode, rng)
    vals = (fc.values_from_codes(codes_grid, fmt) * sb) * sg

    def crop(a):
        if ref.orientation is Orientation.SQUARE_16X16:
            return a[: ref.rows, : ref.cols]
        a = a[:, :real]
        return a.T if ref.orientation is Orientation.COL_GROUPS_16X1 else a

    out = np.ascontiguousarray(crop(vals), dtype=F32)
    out[out == 0] = 0.0
    if not with_mag_codes:
        return out
    half = 1 << (fmt.bits - 1)
    mags = np.ascontiguousarray(crop(codes_grid & (half - 1)))
    return out, mags

