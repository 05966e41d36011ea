"""Optional compiled kernel behind the fused quantize→reconstruct route.

This module holds a single numba kernel that evaluates the grouped
double-block pipeline (outer scale → E4M3 inner scale → element rounding →
reconstruction) element by element in one pass. It must stay bit-compatible
with the vectorized numpy route in :mod:`nvfp4sim.blockquant`; the dual-route
equivalence tests in ``tests/test_blockquant.py`` pin that contract. The key
semantics mirrored here:

* every float32 operation happens in the same order and width as the numpy
  expressions (scale divides in float32, grid comparisons in float64 because
  the format tables are float64 and numpy promotes);
* deterministic rounding resolves exact midpoints to the even code;
* stochastic rounding consumes one uniform draw per padded grid position,
  pre-drawn by the caller so the random stream advances exactly as the
  two-step route advances it;
* clamp events are counted before clipping with the same one-ulp tolerance.

If numba is unavailable the module exposes ``AVAILABLE = False`` and the
caller keeps using the numpy route.
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - exercised implicitly by every fused-route test
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover
    AVAILABLE = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco


F32 = np.float32

# outer-granularity selector passed to the kernel
OUTER_PER_TENSOR = 0
OUTER_PER_ROW = 1
OUTER_BLOCK_1X128 = 2


@njit(cache=True)
def _bisect_left(arr, x):
    """First index with arr[idx] >= x (numpy searchsorted side='left')."""
    lo = 0
    hi = arr.size
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _bisect_right(arr, x):
    """First index with arr[idx] > x (numpy searchsorted side='right')."""
    lo = 0
    hi = arr.size
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def _det_mag_index(axd, mids):
    """Deterministic magnitude code: nearest grid point, ties to even code."""
    idx = _bisect_left(mids, axd)
    if idx < mids.size and axd == mids[idx] and (idx & 1) == 1:
        idx += 1
    return idx


@njit(cache=True)
def _round_scale_e4m3(t, e4_mag, e4_mids):
    """E4M3 rounding of a positive float32 scale, floor at the first code."""
    mi = _det_mag_index(np.float64(t), e4_mids)
    if mi < 1:
        mi = 1
    return np.float32(e4_mag[mi])


@njit(cache=True)
def _stoch_index(axd, draw, el_mag, n_el):
    """Stochastic magnitude code: bracketing codes, probability by distance."""
    if n_el == 8:
        lo = -1
        for k in range(8):
            lo += el_mag[k] <= axd
        if lo < 0:
            lo = 0
        elif lo > 6:
            lo = 6
    else:
        lo = _bisect_right(el_mag, axd) - 1
        if lo < 0:
            lo = 0
        elif lo > n_el - 2:
            lo = n_el - 2
    q1 = el_mag[lo]
    q2 = el_mag[lo + 1]
    p = (axd - q1) / (q2 - q1)
    return lo + 1 if draw < p else lo


@njit(cache=True)
def _det_index(axd, el_mids, n_el):
    if n_el == 8:
        idx = 0
        tie = False
        for k in range(7):
            idx += el_mids[k] < axd
            tie |= el_mids[k] == axd
        if tie and (idx & 1) == 1:
            idx += 1
        return idx
    return _det_mag_index(axd, el_mids)


@njit(cache=True)
def _grouped_values(
    W,
    group,
    outer_mode,
    use_stoch,
    draws,
    el_mag,
    el_mids,
    e4_mag,
    e4_mids,
    grid_max,
    big,
    clamp_thresh,
    out,
):
    """Fill ``out`` with reconstruction values for padded work array ``W``.

    Returns the clamp count. ``W`` and ``out`` are (rows, padded_cols)
    float32; ``draws`` is a (rows, padded_cols) float64 uniform grid when
    ``use_stoch`` (a 1x1 dummy otherwise).
    """
    wr, wc = W.shape
    n_el = el_mag.size
    clamps = 0
    rbuf = np.empty(group, dtype=np.float32)

    sg_tensor = np.float32(1.0)
    if outer_mode == OUTER_PER_TENSOR:
        a = np.float32(0.0)
        for i in range(wr):
            for j in range(wc):
                x = abs(W[i, j])
                if x > a:
                    a = x
        if a > 0:
            sg_tensor = a / big

    for i in range(wr):
        j0 = 0
        while j0 < wc:
            j1 = wc
            if outer_mode == OUTER_BLOCK_1X128:
                j1 = min(j0 + 128, wc)
            if outer_mode == OUTER_PER_TENSOR:
                sg = sg_tensor
            else:
                a = np.float32(0.0)
                for j in range(j0, j1):
                    x = abs(W[i, j])
                    if x > a:
                        a = x
                sg = a / big if a > 0 else np.float32(1.0)

            for b0 in range(j0, j1, group):
                a_in = np.float32(0.0)
                for k in range(group):
                    xp = W[i, b0 + k] / sg
                    rbuf[k] = xp
                    ax = abs(xp)
                    if ax > a_in:
                        a_in = ax
                t = a_in / grid_max
                if t > np.float32(448.0):
                    t = np.float32(448.0)
                sb = np.float32(1.0)
                if t > 0:
                    sb = _round_scale_e4m3(t, e4_mag, e4_mids)

                for k in range(group):
                    r = rbuf[k] / sb
                    if np.float64(abs(r)) > clamp_thresh:
                        clamps += 1
                    if r > grid_max:
                        r = grid_max
                    elif r < -grid_max:
                        r = -grid_max
                    axd = np.float64(abs(r))
                    if use_stoch:
                        mi = _stoch_index(axd, draws[i, b0 + k], el_mag, n_el)
                    else:
                        mi = _det_index(axd, el_mids, n_el)
                    v = np.float32(el_mag[mi])
                    if math.copysign(1.0, r) < 0.0:
                        v = -v
                    o = (v * sb) * sg
                    if o == 0.0:
                        o = np.float32(0.0)
                    out[i, b0 + k] = o
            j0 = j1
    return clamps
