"""Low-precision float codecs and rounding primitives.

Everything downstream (block quantizers, quantized linear layers, the trainer)
reduces to the operations in this file: sign-magnitude code tables for the
4/6/8-bit microscaling element formats, deterministic round-to-nearest with
ties broken toward the even code, unbiased stochastic rounding, E4M3 scale
rounding, power-of-two (E8M0) scale ceiling, and counter-based RNG streams.

Code layout is sign-magnitude: the top bit is the sign, the low bits index an
ascending magnitude table, so code order equals magnitude order within each
half. E4M3 reserves its top magnitude code (exp=15, mant=7) for NaN; inputs
are finite by contract, so that code never comes out of a rounding call.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FormatSpec",
    "RoundingMode",
    "FP4_E2M1",
    "FP8_E4M3",
    "FP6_E3M2",
    "FP6_E2M3",
    "get_format",
    "encode",
    "decode",
    "round_det",
    "round_stoch",
    "round_codes_det",
    "round_codes_stoch",
    "values_from_codes",
    "round_fp4_det",
    "round_fp4_stoch",
    "round_fp6",
    "round_scale_e4m3",
    "e8m0_pow2_ceil",
    "stream",
]


class RoundingMode(enum.Enum):
    DETERMINISTIC = "det"
    STOCHASTIC = "stoch"

    @classmethod
    def coerce(cls, v: "RoundingMode | str") -> "RoundingMode":
        return v if isinstance(v, cls) else cls(v)


@dataclass(frozen=True)
class FormatSpec:
    """A sign-magnitude minifloat format.

    mag[i] is the magnitude encoded by unsigned code i (ascending, finite
    values only); codes >= 2**(bits-1) are the negative half. num_codes
    counts all bit patterns, including reserved NaN codes if any.
    """

    name: str
    bits: int
    mag: np.ndarray  # float64, ascending, index == magnitude code
    grid: np.ndarray = field(repr=False)  # all distinct finite values, ascending
    _pos_mids: np.ndarray = field(repr=False)

    @property
    def max(self) -> float:
        return float(self.mag[-1])

    @property
    def num_codes(self) -> int:
        return 1 << self.bits

    @property
    def top_mag_code(self) -> int:
        return self.mag.size - 1


def _minifloat_magnitudes(exp_bits: int, man_bits: int, bias: int, reserve_top: bool):
    out = []
    for e in range(1 << exp_bits):
        for m in range(1 << man_bits):
            if reserve_top and e == (1 << exp_bits) - 1 and m == (1 << man_bits) - 1:
                continue  # NaN pattern
            frac = m / (1 << man_bits)
            if e == 0:
                out.append(frac * 2.0 ** (1 - bias))
            else:
                out.append((1 + frac) * 2.0 ** (e - bias))
    return out


def _make_format(name, exp_bits, man_bits, bias, reserve_top=False) -> FormatSpec:
    mag = np.array(
        _minifloat_magnitudes(exp_bits, man_bits, bias, reserve_top), dtype=np.float64
    )
    grid = np.unique(np.concatenate([-mag, mag]))
    pos_mids = (mag[:-1] + mag[1:]) / 2  # exact: dyadic rationals in float64
    for a in (mag, grid, pos_mids):
        a.setflags(write=False)
    return FormatSpec(name, 1 + exp_bits + man_bits, mag, grid, pos_mids)


FP4_E2M1 = _make_format("e2m1", 2, 1, bias=1)
FP8_E4M3 = _make_format("e4m3", 4, 3, bias=7, reserve_top=True)
FP6_E3M2 = _make_format("e3m2", 3, 2, bias=3)
FP6_E2M3 = _make_format("e2m3", 2, 3, bias=1)

_FORMATS = {
    "e2m1": FP4_E2M1,
    "e4m3": FP8_E4M3,
    "e3m2": FP6_E3M2,
    "e2m3": FP6_E2M3,
    "fp4": FP4_E2M1,
    "fp8": FP8_E4M3,
}


def get_format(name: str) -> FormatSpec:
    try:
        return _FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown format {name!r}") from None


# ── rounding cores (magnitude space) ─────────────────────────────────────────
# Rounding |x| on the magnitude table and re-applying the sign is equivalent to
# rounding on the signed grid (the grid is symmetric and tie parity mirrors),
# and it keeps the sign of zero, so -0.2 rounds to the -0 code.


def _mag_round_det(ax: np.ndarray, fmt: FormatSpec) -> np.ndarray:
    mids = fmt._pos_mids
    idx = np.searchsorted(mids, ax, side="left")
    k = np.minimum(idx, mids.size - 1)
    # exact midpoint between codes idx and idx+1: take the even code
    tie = (idx < mids.size) & (ax == mids[k]) & (idx % 2 == 1)
    return idx + tie


def _mag_round_stoch(ax: np.ndarray, fmt: FormatSpec, rng) -> np.ndarray:
    mag = fmt.mag
    lo = np.searchsorted(mag, ax, side="right") - 1
    lo = np.clip(lo, 0, mag.size - 2)
    q1 = mag[lo]
    q2 = mag[lo + 1]
    p = (ax - q1) / (q2 - q1)
    up = rng.random(ax.shape) < p
    return lo + up


def _as_float_array(x):
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def round_det(x, fmt: FormatSpec):
    """Round to the nearest representable value, ties to the even code."""
    a = _as_float_array(x)
    out = fmt.mag[_mag_round_det(np.abs(a), fmt)].astype(a.dtype, copy=False)
    return np.copysign(out, a)


def round_stoch(x, fmt: FormatSpec, rng):
    """Unbiased stochastic rounding: up with probability (x-q1)/(q2-q1)."""
    a = _as_float_array(x)
    out = fmt.mag[_mag_round_stoch(np.abs(a), fmt, rng)].astype(a.dtype, copy=False)
    return np.copysign(out, a)


def round_codes_det(x, fmt: FormatSpec) -> np.ndarray:
    """Like round_det but returns sign-magnitude codes (uint8)."""
    a = _as_float_array(x)
    mi = _mag_round_det(np.abs(a), fmt)
    sign = np.signbit(a).astype(np.uint8)
    return (mi.astype(np.uint8)) | (sign << (fmt.bits - 1))


def round_codes_stoch(x, fmt: FormatSpec, rng) -> np.ndarray:
    a = _as_float_array(x)
    mi = _mag_round_stoch(np.abs(a), fmt, rng)
    sign = np.signbit(a).astype(np.uint8)
    return (mi.astype(np.uint8)) | (sign << (fmt.bits - 1))


def values_from_codes(codes: np.ndarray, fmt: FormatSpec, dtype=np.float32):
    half = 1 << (fmt.bits - 1)
    v = fmt.mag[codes & (half - 1)]
    return np.where(codes >= half, -v, v).astype(dtype, copy=False)


# ── scalar codec surface ─────────────────────────────────────────────────────


def encode(value: float, fmt: FormatSpec) -> int:
    """Value -> code; rejects values not exactly on the format's grid."""
    v = float(value)
    if math.isnan(v):
        raise ValueError("cannot encode NaN")
    av = abs(v)
    idx = int(np.searchsorted(fmt.mag, av))
    if idx >= fmt.mag.size or fmt.mag[idx] != av:
        raise ValueError(f"{value!r} is not representable in {fmt.name}")
    sign = math.copysign(1.0, v) < 0
    return (int(sign) << (fmt.bits - 1)) | idx


def decode(code: int, fmt: FormatSpec) -> float:
    """Code -> value. Reserved codes (E4M3 NaN patterns) decode to NaN."""
    if not 0 <= code < fmt.num_codes:
        raise ValueError(f"code {code} out of range for {fmt.name}")
    half = fmt.num_codes >> 1
    mag_code = code & (half - 1)
    if mag_code >= fmt.mag.size:
        return math.nan
    v = float(fmt.mag[mag_code])
    return -v if code >= half else v


def _maybe_scalar(out, x):
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out


def round_fp4_det(x):
    """Deterministic round to the E2M1 grid. |x| <= 6 by caller contract."""
    return _maybe_scalar(round_det(x, FP4_E2M1), x)


def round_fp4_stoch(x, rng):
    """Stochastic round to the E2M1 grid; E[result] == x for |x| <= 6."""
    return _maybe_scalar(round_stoch(x, FP4_E2M1, rng), x)


def round_fp6(x, mode: RoundingMode | str, rng=None, variant: str = "e3m2"):
    fmt = get_format(variant)
    if fmt not in (FP6_E3M2, FP6_E2M3):
        raise ValueError(f"{variant!r} is not a 6-bit format")
    mode = RoundingMode.coerce(mode)
    if mode is RoundingMode.DETERMINISTIC:
        return _maybe_scalar(round_det(x, fmt), x)
    if rng is None:
        raise ValueError("stochastic rounding needs an rng")
    return _maybe_scalar(round_stoch(x, fmt, rng), x)


def round_scale_e4m3(s):
    """Round a positive scale to E4M3, ties to even code, result > 0.

    Raises OverflowError above 448 and ValueError at or below zero. Inputs
    small enough to round to zero clamp to the smallest subnormal 2**-9.
    """
    a = _as_float_array(s)
    if np.any(a <= 0):
        raise ValueError("scale must be positive")
    if np.any(a > FP8_E4M3.max):
        raise OverflowError(f"scale exceeds E4M3 max {FP8_E4M3.max}")
    mi = np.maximum(_mag_round_det(a, FP8_E4M3), 1)
    return _maybe_scalar(FP8_E4M3.mag[mi].astype(a.dtype, copy=False), s)


def e8m0_pow2_ceil(x):
    """Smallest power of two >= x, clamped to the E8M0 range [2**-127, 2**127]."""
    a = _as_float_array(x)
    m, e = np.frexp(a)  # a = m * 2**e with m in [0.5, 1)
    exp = np.where(m == 0.5, e - 1, e)
    exp = np.clip(exp, -127, 127)
    return _maybe_scalar(np.ldexp(np.ones_like(a), exp), x)


# ── seeded, counter-based RNG streams ────────────────────────────────────────

_MASK64 = (1 << 64) - 1


def stream(seed: int, *tags) -> np.random.Generator:
    """A Philox generator keyed by (seed, *tags).

    Tags may be ints (step counters) or strings (layer names, matmul side).
    Identical arguments give identical streams on every platform; any change
    to any tag decorrelates the stream.
    """
    words = [int(seed) & _MASK64]
    for t in tags:
        if isinstance(t, (int, np.integer)):
            words.append(int(t) & _MASK64)
        else:
            digest = hashlib.blake2b(str(t).encode(), digest_size=8).digest()
            words.append(int.from_bytes(digest, "little"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
