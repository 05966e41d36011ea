"""Double-block quantizer tests.

The oracle here is `ref_quantize`: a deliberately plain, slice-at-a-time
re-implementation of the double-block scheme (outer scale -> E4M3 inner scale
-> element rounding) that shares only the already-verified rounding cores with
the production path. The vectorized implementation must match it bit for bit.
"""

import math
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvfp4sim import fpcodec as fc
from nvfp4sim import blockquant as bq

F32 = np.float32


# ── reference implementation (the oracle) ────────────────────────────────────


def ref_quantize(m, orientation, outer, element_fmt="e2m1"):
    """Returns (dequantized matrix, clamp_count, inner_scales, outer_scales)."""
    fmt = fc.get_format(element_fmt)
    G = np.float32(fmt.max)
    big = np.float32(448.0) * G

    if orientation == bq.Orientation.SQUARE_16X16:
        return _ref_quantize_square(m, fmt, G, big)

    work = m if orientation == bq.Orientation.ROW_GROUPS_1X16 else m.T
    wr, wc_real = work.shape
    wc = -(-wc_real // 16) * 16
    W = np.zeros((wr, wc), dtype=F32)
    W[:, :wc_real] = work

    # outer scale per element
    sg_elem = np.ones((wr, wc), dtype=F32)
    outer_scales = []
    if outer == bq.OuterGranularity.PER_TENSOR:
        A = np.float32(np.max(np.abs(W)))
        sg = A / big if A > 0 else np.float32(1.0)
        sg_elem[:] = sg
        outer_scales = [sg]
    elif outer == bq.OuterGranularity.PER_ROW:
        for r in range(wr):
            A = np.float32(np.max(np.abs(W[r])))
            sg = A / big if A > 0 else np.float32(1.0)
            sg_elem[r, :] = sg
            outer_scales.append(sg)
    else:
        for r in range(wr):
            for c0 in range(0, wc, 128):
                A = np.float32(np.max(np.abs(W[r, c0 : c0 + 128])))
                sg = A / big if A > 0 else np.float32(1.0)
                sg_elem[r, c0 : c0 + 128] = sg
                outer_scales.append(sg)

    out = np.zeros_like(W)
    inner_scales = []
    clamps = 0
    for r in range(wr):
        for c0 in range(0, wc, 16):
            blk = W[r, c0 : c0 + 16]
            sg = sg_elem[r, c0]
            xp = blk / sg
            a = np.float32(np.max(np.abs(xp)))
            if a > 0:
                sb = np.float32(fc.round_scale_e4m3(min(a / G, np.float32(448.0))))
            else:
                sb = np.float32(1.0)
            ratio = xp / sb
            clamps += int(np.sum(np.abs(ratio) > G * (1 + 1e-6)))
            p = fc.round_det(np.clip(ratio, -G, G), fmt)
            out[r, c0 : c0 + 16] = (p * sb) * sg
            inner_scales.append(sb)

    out = out[:, :wc_real]
    if orientation == bq.Orientation.COL_GROUPS_16X1:
        out = out.T
    out = out.copy()
    out[out == 0] = 0.0
    return out, clamps, np.array(inner_scales, F32), np.array(outer_scales, F32)


def _ref_quantize_square(m, fmt, G, big):
    r_real, c_real = m.shape
    wr = -(-r_real // 16) * 16
    wc = -(-c_real // 16) * 16
    W = np.zeros((wr, wc), dtype=F32)
    W[:r_real, :c_real] = m
    A = np.float32(np.max(np.abs(W)))
    sg = A / big if A > 0 else np.float32(1.0)
    out = np.zeros_like(W)
    inner_scales = []
    clamps = 0
    for r0 in range(0, wr, 16):
        for c0 in range(0, wc, 16):
            tile = W[r0 : r0 + 16, c0 : c0 + 16]
            xp = tile / sg
            a = np.float32(np.max(np.abs(xp)))
            if a > 0:
                sb = np.float32(fc.round_scale_e4m3(min(a / G, np.float32(448.0))))
            else:
                sb = np.float32(1.0)
            ratio = xp / sb
            clamps += int(np.sum(np.abs(ratio) > G * (1 + 1e-6)))
            p = fc.round_det(np.clip(ratio, -G, G), fmt)
            out[r0 : r0 + 16, c0 : c0 + 16] = (p * sb) * sg
            inner_scales.append(sb)
    out = out[:r_real, :c_real].copy()
    out[out == 0] = 0.0
    return out, clamps, np.array(inner_scales, F32), np.array([sg], F32)


def rnd(shape, seed, scale=1.0):
    rng = np.random.Generator(np.random.Philox(seed))
    return (rng.standard_normal(shape) * scale).astype(F32)


# ── fixed-value cases ────────────────────────────────────────────────────────


def test_zero_matrix_all_scales_one_codes_zero():
    q = bq.quantize_double_block(np.zeros((4, 32), F32), bq.Orientation.ROW_GROUPS_1X16)
    assert np.all(q.inner_scales == 1.0)
    assert np.all(q.outer_scales == 1.0)
    assert np.all(q.codes == 0)
    dq = bq.dequantize(q)
    assert dq.shape == (4, 32) and dq.dtype == F32
    assert np.all(dq == 0.0) and not np.any(np.signbit(dq))


def test_amax_2688_gives_unit_outer_scale():
    m = np.zeros((1, 128), F32)
    m[0, 0] = 2688.0
    m[0, 1:] = 1.0
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    assert q.outer_scales.tolist() == [1.0]
    assert q.inner_scales[0] == 448.0  # block carrying the outer max


def test_single_group_six_three():
    m = np.zeros((1, 16), F32)
    m[0, 0], m[0, 1] = 6.0, 3.0
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    assert q.inner_scales[0] == 448.0
    assert np.isclose(q.outer_scales[0], 6.0 / 2688.0)
    codes = bq.unpacked_codes(q)
    assert codes[0, 0] == 7 and codes[0, 1] == 5  # E2M1 codes of 6.0 and 3.0
    dq = bq.dequantize(q)
    assert np.allclose(dq[0, :2], [6.0, 3.0], rtol=1e-6)
    assert np.all(dq[0, 2:] == 0.0)


def test_negative_zero_dequantizes_to_plus_zero():
    m = np.array([[-0.1, 4.0] + [0.0] * 14], F32)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    dq = bq.dequantize(q)
    assert dq[0, 0] == 0.0 and not np.signbit(dq[0, 0])
    # but the code keeps the sign
    assert bq.unpacked_codes(q)[0, 0] == 8


def test_packed_nibble_order():
    m = np.array([[0.5, -0.5] + [0.0] * 14], F32)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    # 0.5 and -0.5 tie for block amax, so both land on the top magnitude
    # (+6.0 -> code 7, -6.0 -> code 15); low nibble holds the lower index
    assert q.codes[0] == (7 | (15 << 4))


def test_padding_codes_are_zero_and_shape_restored():
    m = rnd((5, 23), seed=1)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    grid = bq.unpacked_codes(q)
    assert grid.shape == (5, 32)
    assert np.all(grid[:, 23:] == 0)
    assert bq.dequantize(q).shape == (5, 23)


# ── vectorized path == reference oracle ──────────────────────────────────────


CASES = [
    ((45, 70), bq.Orientation.ROW_GROUPS_1X16, bq.OuterGranularity.BLOCK_1X128, 101),
    ((45, 70), bq.Orientation.COL_GROUPS_16X1, bq.OuterGranularity.BLOCK_1X128, 102),
    ((64, 256), bq.Orientation.ROW_GROUPS_1X16, bq.OuterGranularity.BLOCK_1X128, 103),
    ((64, 64), bq.Orientation.ROW_GROUPS_1X16, bq.OuterGranularity.PER_ROW, 104),
    ((64, 64), bq.Orientation.COL_GROUPS_16X1, bq.OuterGranularity.PER_TENSOR, 105),
    ((17, 18), bq.Orientation.SQUARE_16X16, bq.OuterGranularity.PER_TENSOR, 106),
    ((48, 48), bq.Orientation.SQUARE_16X16, bq.OuterGranularity.PER_TENSOR, 107),
]


@pytest.mark.parametrize("shape,orientation,outer,seed", CASES)
def test_matches_scalar_reference_bitwise(shape, orientation, outer, seed):
    m = rnd(shape, seed=seed)
    m[0, 0] = 77.0  # some dynamic range
    q = bq.quantize_double_block(m, orientation, outer=outer)
    got = bq.dequantize(q)
    want, clamps, inner, outer_s = ref_quantize(m, orientation, outer)
    np.testing.assert_array_equal(got, want)
    assert q.clamp_count == clamps
    np.testing.assert_array_equal(q.inner_scales, inner)
    np.testing.assert_array_equal(q.outer_scales, outer_s)


@pytest.mark.parametrize("element_fmt", ["e3m2", "e2m3"])
def test_fp6_elements_match_reference(element_fmt):
    m = rnd((32, 48), seed=7)
    q = bq.quantize_double_block(
        m, bq.Orientation.ROW_GROUPS_1X16, element_fmt=element_fmt
    )
    got = bq.dequantize(q)
    want, clamps, _, _ = ref_quantize(
        m, bq.Orientation.ROW_GROUPS_1X16, bq.OuterGranularity.BLOCK_1X128, element_fmt
    )
    np.testing.assert_array_equal(got, want)
    assert q.clamp_count == clamps


def test_fp6_mse_not_worse_than_fp4():
    m = rnd((64, 128), seed=11)
    d4 = bq.dequantize(bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16))
    d6 = bq.dequantize(
        bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16, element_fmt="e3m2")
    )
    assert np.mean((d6 - m) ** 2) < np.mean((d4 - m) ** 2)


# ── orientation contract ─────────────────────────────────────────────────────


def test_transpose_orientation_contract():
    m = rnd((40, 56), seed=3)
    qa = bq.quantize_double_block(m.T.copy(), bq.Orientation.ROW_GROUPS_1X16)
    qb = bq.quantize_double_block(m, bq.Orientation.COL_GROUPS_16X1)
    np.testing.assert_array_equal(qa.codes, qb.codes)
    np.testing.assert_array_equal(qa.inner_scales, qb.inner_scales)
    np.testing.assert_array_equal(qa.outer_scales, qb.outer_scales)
    np.testing.assert_array_equal(bq.dequantize(qa), bq.dequantize(qb).T)


# ── error bound ──────────────────────────────────────────────────────────────


def test_elementwise_error_bound():
    m = rnd((64, 64), seed=13, scale=3.0)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    dq = bq.dequantize(q)
    # reconstruct the per-element scale chain
    sb = np.repeat(q.inner_scales.reshape(64, 4), 16, axis=1)
    sg = np.repeat(q.outer_scales.reshape(64, 1), 64, axis=1)
    # widest E2M1 bin is 2.0 (4 -> 6); no element may be off by more than
    # half the widest bin times its scale chain, plus clamp slack
    bound = 0.5 * 2.0 * sb * sg * (1 + 2e-6)
    assert np.all(np.abs(dq - m) <= bound)


# ── MSE granularity ordering on an outlier-bearing tensor ────────────────────


def test_outer_granularity_mse_ordering():
    # Exact-grid base (+/-1 everywhere) makes every non-degraded block
    # quantize with ~zero error, so the ordering is decided purely by how
    # far the outlier's huge scale leaks: one 128-chunk for BLOCK_1X128,
    # the whole row for PER_ROW, the whole tensor for PER_TENSOR.
    g17 = np.random.Generator(np.random.Philox(17))
    m = np.where(g17.random((128, 256)) < 0.5, -1.0, 1.0).astype(F32)
    m[3, 200] = 1.0e6
    mses = {}
    for g in bq.OuterGranularity:
        q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16, outer=g)
        mses[g] = float(np.mean((bq.dequantize(q) - m) ** 2))
    assert (
        mses[bq.OuterGranularity.BLOCK_1X128]
        < mses[bq.OuterGranularity.PER_ROW]
        < mses[bq.OuterGranularity.PER_TENSOR]
    )


# ── stochastic mode ──────────────────────────────────────────────────────────


def test_stochastic_quantize_unbiased():
    # one 16-wide group per outer block pins the inner scale to exactly 448,
    # so no clamp events occur and the unbiasedness contract applies exactly
    m = rnd((8, 16), seed=23)
    n = 20_000
    draws = np.empty((n,) + m.shape, dtype=F32)
    for i in range(n):
        rng = fc.stream(1000, "sq", i)
        q = bq.quantize_double_block(
            m, bq.Orientation.ROW_GROUPS_1X16, mode="stoch", rng=rng
        )
        assert q.clamp_count == 0
        draws[i] = bq.dequantize(q)
    assert_mc_mean_close(draws, m, nsigma=5.0)


def test_clamp_event_bias_is_real_and_counted():
    # second block's max lands where the E4M3 scale rounds down (6.1 -> 6.0),
    # so its carrier clamps at the top code and dequantizes low: the one
    # documented bias source of the scheme
    m = np.zeros((1, 32), F32)
    m[0, 0] = 448.0
    m[0, 16] = 6.1
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    assert q.clamp_count >= 1
    dq = bq.dequantize(q)
    assert dq[0, 16] < 6.1
    assert np.isclose(dq[0, 16], 6.0, rtol=1e-5)


def assert_mc_mean_close(draws, target, nsigma):
    n = draws.shape[0]
    # float64 statistics: float32 accumulation over many draws invents
    # spurious deviations on constant (exactly representable) elements
    mean = draws.mean(axis=0, dtype=np.float64)
    sd = draws.astype(np.float64).std(axis=0, ddof=1)
    diff = np.abs(mean - target)
    tol = nsigma * sd / math.sqrt(n)
    exact = sd < 1e-12
    assert np.all(diff[exact] < 1e-6)
    assert np.all(diff[~exact] <= tol[~exact])


def test_stochastic_requires_rng():
    with pytest.raises(ValueError):
        bq.quantize_double_block(
            rnd((4, 16), 1), bq.Orientation.ROW_GROUPS_1X16, mode="stoch"
        )


# ── requantize ───────────────────────────────────────────────────────────────


def test_requantize_same_orientation_det_is_stable():
    # Dequantize normalizes -0.0 to +0.0, so codes that were negative zero
    # on the first pass come back as +0; magnitudes and all nonzero codes
    # survive, and from the second application onward codes are an exact
    # fixed point.
    m = rnd((32, 64), seed=29)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    q2 = bq.requantize(q, bq.Orientation.ROW_GROUPS_1X16)
    c1 = bq.unpacked_codes(q)
    c2 = bq.unpacked_codes(q2)
    np.testing.assert_array_equal(c1 & 0x7, c2 & 0x7)
    nonzero = (c1 & 0x7) != 0
    np.testing.assert_array_equal(c1[nonzero], c2[nonzero])
    np.testing.assert_allclose(
        bq.dequantize(q2), bq.dequantize(q), rtol=1e-6, atol=0.0
    )
    q3 = bq.requantize(q2, bq.Orientation.ROW_GROUPS_1X16)
    np.testing.assert_array_equal(q2.codes, q3.codes)


def test_requantize_cross_orientation_stoch_unbiased():
    # 16x16 keeps one group per outer block in both orientations: no clamps
    m = rnd((16, 16), seed=31)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    src = bq.dequantize(q)
    n = 20_000
    draws = np.empty((n,) + m.shape, dtype=F32)
    for i in range(n):
        rng = fc.stream(2000, "rq", i)
        q2 = bq.requantize(q, bq.Orientation.COL_GROUPS_16X1, mode="stoch", rng=rng)
        draws[i] = bq.dequantize(q2)
    assert_mc_mean_close(draws, src, nsigma=5.0)


# ── MXFP4 ────────────────────────────────────────────────────────────────────


def test_mxfp4_unit_group_scale_quarter():
    m = np.ones((1, 32), F32)
    q = bq.quantize_mxfp4(m)
    assert q.group == 32 and q.scale_fmt == "e8m0"
    assert q.inner_scales.tolist() == [0.25]
    assert np.all(bq.dequantize(q) == 1.0)


def test_mxfp4_zero_group():
    q = bq.quantize_mxfp4(np.zeros((2, 32), F32))
    assert np.all(q.inner_scales == 1.0)
    assert np.all(bq.dequantize(q) == 0.0)


def test_mxfp4_power_of_two_exact():
    rng = np.random.Generator(np.random.Philox(37))
    vals = np.array([0.5, 1.0, 2.0, 4.0], F32)
    m = rng.choice(vals, size=(8, 64)) * rng.choice([-1.0, 1.0], size=(8, 64))
    m = m.astype(F32)
    q = bq.quantize_mxfp4(m)
    np.testing.assert_array_equal(bq.dequantize(q), m)
    assert q.clamp_count == 0


def test_mxfp4_scales_are_powers_of_two():
    m = rnd((8, 96), seed=41, scale=10.0)
    q = bq.quantize_mxfp4(m)
    exps = np.log2(q.inner_scales.astype(np.float64))
    assert np.all(exps == np.round(exps))


# ── reuse of a frozen scale chain ────────────────────────────────────────────


def test_quantize_with_scales_matches_original():
    m = rnd((16, 48), seed=43)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    vals = bq.quantize_with_scales(m, q)
    np.testing.assert_array_equal(vals, bq.dequantize(q))


def test_quantize_with_scales_freezes_the_chain():
    m = rnd((16, 48), seed=47)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    scaled = (m * 4.0).astype(F32)
    frozen = bq.quantize_with_scales(scaled, q)
    fresh = bq.dequantize(
        bq.quantize_double_block(scaled, bq.Orientation.ROW_GROUPS_1X16)
    )
    # frozen chain clamps at the old range instead of rescaling
    assert not np.array_equal(frozen, fresh)
    sb = np.repeat(q.inner_scales.reshape(16, 3), 16, axis=1)
    sg = np.repeat(q.outer_scales.reshape(16, 1), 48, axis=1)
    assert np.all(np.abs(frozen) <= 6.0 * sb * sg * (1 + 1e-6))


def test_quantize_with_scales_returns_codes_on_request():
    m = rnd((8, 16), seed=53)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    vals, mag_codes = bq.quantize_with_scales(m, q, with_mag_codes=True)
    assert mag_codes.shape == m.shape and mag_codes.dtype == np.uint8
    carrier = np.argmax(np.abs(m[0]))
    assert mag_codes[0, carrier] == fc.FP4_E2M1.top_mag_code


# ── fused quantize→reconstruct route ─────────────────────────────────────────
#
# The oracle for `quantize_dequantize` is the two-step route itself: same
# arguments, same rng stream, bit-identical values, equal clamp counts, and
# identical stream positions afterwards.

_FUSED_CASES = [
    (bq.Orientation.ROW_GROUPS_1X16, "1x128", "e2m1", (48, 200)),
    (bq.Orientation.ROW_GROUPS_1X16, "per-row", "e3m2", (33, 130)),
    (bq.Orientation.ROW_GROUPS_1X16, "per-tensor", "e2m3", (5, 7)),
    (bq.Orientation.COL_GROUPS_16X1, "1x128", "e2m1", (130, 33)),
    (bq.Orientation.COL_GROUPS_16X1, "per-tensor", "e3m2", (21, 17)),
    (bq.Orientation.SQUARE_16X16, None, "e2m1", (40, 56)),
    (bq.Orientation.SQUARE_16X16, None, "e2m3", (16, 16)),
]


def _bits(a):
    return np.ascontiguousarray(a, dtype=np.float32).view(np.uint32)


@contextmanager
def _route(fast: bool):
    """Pin quantize_dequantize to the compiled or the numpy implementation."""
    if fast and not bq.fastpath.AVAILABLE:
        pytest.skip("compiled fused route unavailable")
    prev = bq._FASTPATH_ENABLED
    bq._FASTPATH_ENABLED = fast
    try:
        yield
    finally:
        bq._FASTPATH_ENABLED = prev


@pytest.mark.parametrize("fast", [False, True], ids=["numpy", "compiled"])
@pytest.mark.parametrize("orientation,outer,fmt,shape", _FUSED_CASES)
def test_fused_matches_two_step_route_det(orientation, outer, fmt, shape, fast):
    m = rnd(shape, seed=83) * F32(300.0)
    m[0, 0] = 0.0
    q = bq.quantize_double_block(m, orientation, outer=outer, element_fmt=fmt)
    want = bq.dequantize(q)
    with _route(fast):
        got, clamps = bq.quantize_dequantize(m, orientation, outer=outer, element_fmt=fmt)
    assert got.dtype == np.float32 and got.shape == m.shape
    np.testing.assert_array_equal(_bits(got), _bits(want))
    assert clamps == q.clamp_count


@pytest.mark.parametrize("fast", [False, True], ids=["numpy", "compiled"])
@pytest.mark.parametrize("orientation,outer,fmt,shape", _FUSED_CASES)
def test_fused_matches_two_step_route_stoch(orientation, outer, fmt, shape, fast):
    m = rnd(shape, seed=89) * F32(50.0)
    tag = f"{orientation.value}-{outer}-{fmt}"
    r1 = fc.stream(11, "fused", tag)
    r2 = fc.stream(11, "fused", tag)
    q = bq.quantize_double_block(
        m, orientation, outer=outer, mode="stoch", rng=r1, element_fmt=fmt
    )
    want = bq.dequantize(q)
    with _route(fast):
        got, clamps = bq.quantize_dequantize(
            m, orientation, outer=outer, mode="stoch", rng=r2, element_fmt=fmt
        )
    np.testing.assert_array_equal(_bits(got), _bits(want))
    assert clamps == q.clamp_count
    # both routes must leave the stream at the same position
    np.testing.assert_array_equal(r1.random(4), r2.random(4))


def test_fused_counts_clamps_on_saturating_input():
    # Gaussian data spanning many inner blocks: roughly half the block scales
    # round down in E4M3, so saturation clamps are plentiful — the count must
    # match the two-step route exactly, not just on clamp-free inputs.
    m = rnd((48, 200), seed=97) * F32(300.0)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16, outer="1x128")
    got, clamps = bq.quantize_dequantize(m, bq.Orientation.ROW_GROUPS_1X16, outer="1x128")
    assert clamps == q.clamp_count > 0
    np.testing.assert_array_equal(_bits(got), _bits(bq.dequantize(q)))


def test_fused_zero_and_negative_zero():
    m = np.zeros((3, 20), dtype=F32)
    m[1, 2] = F32(-0.0)
    for orientation in bq.Orientation:
        q = bq.quantize_double_block(m, orientation)
        got, clamps = bq.quantize_dequantize(m, orientation)
        np.testing.assert_array_equal(_bits(got), _bits(bq.dequantize(q)))
        assert clamps == 0
        assert not np.signbit(got).any()


def test_fused_rejects_bad_arguments():
    m = rnd((4, 16), seed=101)
    with pytest.raises(ValueError):
        bq.quantize_dequantize(m, bq.Orientation.SQUARE_16X16, outer="per-row")
    with pytest.raises(ValueError):
        bq.quantize_dequantize(m, bq.Orientation.ROW_GROUPS_1X16, mode="stoch")


# ── properties ───────────────────────────────────────────────────────────────


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 40),
    cols=st.integers(1, 40),
    orientation=st.sampled_from(list(bq.Orientation)),
    seed=st.integers(0, 2**20),
)
def test_prop_quantize_shape_and_finiteness(rows, cols, orientation, seed):
    m = rnd((rows, cols), seed=seed, scale=5.0)
    q = bq.quantize_double_block(m, orientation)
    dq = bq.dequantize(q)
    assert dq.shape == m.shape and dq.dtype == F32
    assert np.all(np.isfinite(dq))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_prop_det_requantize_reaches_code_fixed_point(seed):
    # magnitudes are stable immediately; full codes (sign of zero included)
    # are an exact fixed point from the second application onward
    m = rnd((8, 32), seed=seed)
    q = bq.quantize_double_block(m, bq.Orientation.ROW_GROUPS_1X16)
    q2 = bq.requantize(q, bq.Orientation.ROW_GROUPS_1X16)
    np.testing.assert_array_equal(
        bq.unpacked_codes(q) & 0x7, bq.unpacked_codes(q2) & 0x7
    )
    q3 = bq.requantize(q2, bq.Orientation.ROW_GROUPS_1X16)
    np.testing.assert_array_equal(q2.codes, q3.codes)


# ── per-element block amax ───────────────────────────────────────────────────


def _brute_block_amax(m, orientation):
    m = np.asarray(m, F32)
    out = np.zeros_like(m)
    r, c = m.shape
    if orientation is bq.Orientation.SQUARE_16X16:
        for i in range(r):
            for j in range(c):
                ti, tj = (i // 16) * 16, (j // 16) * 16
                out[i, j] = np.abs(m[ti : ti + 16, tj : tj + 16]).max()
        return out
    if orientation is bq.Orientation.ROW_GROUPS_1X16:
        for i in range(r):
            for j in range(c):
                b = (j // 16) * 16
                out[i, j] = np.abs(m[i, b : b + 16]).max()
        return out
    for i in range(r):
        for j in range(c):
            b = (i // 16) * 16
            out[i, j] = np.abs(m[b : b + 16, j]).max()
    return out


@pytest.mark.parametrize(
    "shape,orientation",
    [
        ((3, 40), bq.Orientation.ROW_GROUPS_1X16),
        ((40, 3), bq.Orientation.COL_GROUPS_16X1),
        ((20, 35), bq.Orientation.SQUARE_16X16),
        ((16, 16), bq.Orientation.SQUARE_16X16),
        ((1, 16), bq.Orientation.ROW_GROUPS_1X16),
    ],
)
def test_element_block_amax_matches_brute_force(shape, orientation):
    m = rnd(shape, seed=5150, scale=3.0)
    got = bq.element_block_amax(m, orientation)
    np.testing.assert_array_equal(got, _brute_block_amax(m, orientation))


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 40),
    cols=st.integers(1, 40),
    orientation=st.sampled_from(list(bq.Orientation)),
    outer=st.sampled_from([None, "1x128", "per-row", "per-tensor"]),
    mode=st.sampled_from(["det", "stoch"]),
    seed=st.integers(0, 2**16),
)
def test_prop_fused_equals_two_step(rows, cols, orientation, outer, mode, seed):
    if orientation is bq.Orientation.SQUARE_16X16 and outer not in (None, "per-tensor"):
        outer = None
    rng = np.random.Generator(np.random.Philox(seed + 7))
    m = (rng.standard_normal((rows, cols)) * 8.0).astype(F32)
    m[rng.random(m.shape) < 0.1] = 0.0
    m[rng.integers(rows)] *= F32(500.0)  # outlier row stresses the outer scale
    q = bq.quantize_double_block(
        m, orientation, outer=outer, mode=mode, rng=fc.stream(seed, "prop-fused")
    )
    want_bits = _bits(bq.dequantize(q))
    for fast in (False, True):
        if fast and not bq.fastpath.AVAILABLE:
            continue
        with _route(fast):
            got, clamps = bq.quantize_dequantize(
                m, orientation, outer=outer, mode=mode, rng=fc.stream(seed, "prop-fused")
            )
        assert clamps == q.clamp_count
        np.testing.assert_array_equal(_bits(got), want_bits)
