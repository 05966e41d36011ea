"""Fully-quantized linear layer: forward, input gradient, weight gradient.

The layer computes ``y = x @ w.T`` with up to six independently configurable
quantizers, one per matmul operand:

    forward   y  = Q1(x)      @ Q2(w).T        (round-to-nearest)
    backward  dx = Q3(dy)     @ Q4(w_hat)      (stochastic by default)
              dw = Q5(dy.T)   @ Q6(x_hat)      (stochastic by default)

Every operand is quantized with 1x16 groups along its contraction axis
(weights optionally in 16x16 square tiles).  Q4 and Q6 consume the cached
*dequantized* forward operands so the backward sees exactly the tensors the
forward multiplied; disabling that alignment (``align_xhat=False``) makes Q6
quantize the raw activation instead.

Backward matmuls can rotate both operands with a shared signed block-Hadamard
transform along the contraction axis before quantization (``rht_dx`` /
``rht_dw``); the rotation is skipped when neither operand of that matmul is
quantized, so disabling every site reproduces the binary32 reference layer
bit-for-bit.  Sign vectors derive from ``(rht_seed, layer_tag, step, side)``
with side tags "dx", "dw", and "fwd".

Outlier-channel retention splits the forward activation: selected columns
bypass low-bit quantization (kept in ``e4m3`` with a shared current scale,
``float16``, or ``float32``) while the complement is quantized with those
columns zeroed, and the matching weight-gradient columns are computed from
the cached activation in full precision.

The stochastic backward consumes its generator in the fixed site order
Q3, Q4, Q5, Q6 (disabled sites draw nothing), which makes runs replayable
from the generator key alone.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import blockquant as bq
from . import fpcodec as fc
from . import hadamard as hd
from .blockquant import Orientation, OuterGranularity, as_matrix

__all__ = [
    "QUANTIZER_SITES",
    "OUTLIER_PRECISIONS",
    "OutlierStyle",
    "PrecisionMode",
    "OutlierConfig",
    "LayerQuantConfig",
    "LinearCache",
    "preset",
    "set_site_enabled",
    "set_precision_mode",
    "select_outlier_channels",
    "linear_forward",
    "linear_backward",
]

F32 = np.float32

QUANTIZER_SITES = (
    "fwd_x",
    "fwd_w",
    "dy_for_dx",
    "w_for_dx",
    "dy_for_dw",
    "x_for_dw",
)

OUTLIER_PRECISIONS = ("e4m3", "float16", "float32")


class OutlierStyle(enum.Enum):
    LARGEST_NORM = "largest-norm"
    RANDOM = "random"
    NONE = "none"


class PrecisionMode(enum.Enum):
    FP4XFP4 = "fp4xfp4"
    FP6XFP4 = "fp6xfp4"
    FP6XFP6 = "fp6xfp6"


@dataclasses.dataclass(frozen=True)
class OutlierConfig:
    """Static set of activation channels kept out of the low-bit path."""

    channels: Tuple[int, ...]
    ratio: float
    precision: str = "e4m3"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.precision not in OUTLIER_PRECISIONS:
            raise ValueError(
                f"outlier precision must be one of {OUTLIER_PRECISIONS}, "
                f"got {self.precision!r}"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("outlier channels must be unique")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "ratio": self.ratio,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutlierConfig":
        return cls(
            channels=tuple(d["channels"]),
            ratio=d["ratio"],
            precision=d["precision"],
        )


@dataclasses.dataclass(frozen=True)
class LayerQuantConfig:
    """Complete quantization recipe for one linear layer."""

    quantize_fwd_x: bool = True
    quantize_fwd_w: bool = True
    quantize_dy_for_dx: bool = True
    quantize_w_for_dx: bool = True
    quantize_dy_for_dw: bool = True
    quantize_x_for_dw: bool = True
    format_fwd_x: str = "e2m1"
    format_fwd_w: str = "e2m1"
    format_dy_for_dx: str = "e2m1"
    format_w_for_dx: str = "e2m1"
    format_dy_for_dw: str = "e2m1"
    format_x_for_dw: str = "e2m1"
    rht_dx: bool = True
    rht_dw: bool = True
    rht_fwd: bool = False
    rht_block: int = hd.DEFAULT_BLOCK
    weight_block: Orientation = Orientation.ROW_GROUPS_1X16
    outer_granularity: OuterGranularity = OuterGranularity.BLOCK_1X128
    align_xhat: bool = True
    stochastic_backward: bool = True
    fp6_variant: str = "e3m2"
    outlier: Optional[OutlierConfig] = None
    layer_tag: str = "linear"
    rht_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight_block", Orientation(self.weight_block))
        object.__setattr__(
            self, "outer_granularity", OuterGranularity(self.outer_granularity)
        )
        if self.weight_block is Orientation.COL_GROUPS_16X1:
            raise ValueError(
                "weight_block must be ROW_GROUPS_1X16 or SQUARE_16X16"
            )
        for site in QUANTIZER_SITES:
            fc.get_format(getattr(self, f"format_{site}"))
        if self.fp6_variant not in ("e3m2", "e2m3"):
            raise ValueError(f"fp6_variant must be e3m2 or e2m3, got {self.fp6_variant!r}")
        if self.rht_block < 2 or (self.rht_block & (self.rht_block - 1)) != 0:
            raise ValueError(f"rht_block must be a power of two >= 2, got {self.rht_block}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weight_block"] = self.weight_block.value
        d["outer_granularity"] = self.outer_granularity.value
        d["outlier"] = self.outlier.to_dict() if self.outlier else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerQuantConfig":
        d = dict(d)
        if d.get("outlier") is not None:
            d["outlier"] = OutlierConfig.from_dict(d["outlier"])
        return cls(**d)


_PRESETS = ("fp32", "fp4-base", "fp4-full", "fp4-rtn")


def preset(name: str) -> LayerQuantConfig:
    """Named layer recipes.

    * ``fp32``     — every site bypassed: the binary32 reference layer.
    * ``fp4-base`` — all six sites in FP4, rotations on both backward
      matmuls, 1x16 weight groups, 1x128 outer scaling blocks, aligned
      backward inputs, stochastic backward rounding.
    * ``fp4-full`` — same layer recipe as ``fp4-base``; outlier retention and
      oscillation suppression attach at the training-run level.
    * ``fp4-rtn``  — the deterministic vendor-style recipe: round-to-nearest
      everywhere, 16x16 weight tiles with one per-tensor outer scale,
      unaligned weight-gradient input, rotation on the weight-gradient
      matmul only.
    """
    if name == "fp32":
        return LayerQuantConfig(
            quantize_fwd_x=False,
            quantize_fwd_w=False,
            quantize_dy_for_dx=False,
            quantize_w_for_dx=False,
            quantize_dy_for_dw=False,
            quantize_x_for_dw=False,
            rht_dx=False,
            rht_dw=False,
            stochastic_backward=False,
        )
    if name in ("fp4-base", "fp4-full"):
        return LayerQuantConfig()
    if name == "fp4-rtn":
        return LayerQuantConfig(
            rht_dx=False,
            rht_dw=True,
            weight_block=Orientation.SQUARE_16X16,
            outer_granularity=OuterGranularity.PER_TENSOR,
            align_xhat=False,
            stochastic_backward=False,
        )
    raise ValueError(f"unknown preset {name!r}; choose from {_PRESETS}")


def set_site_enabled(
    cfg: LayerQuantConfig, site: str, enabled: bool
) -> LayerQuantConfig:
    if site not in QUANTIZER_SITES:
        raise ValueError(f"unknown quantizer site {site!r}; choose from {QUANTIZER_SITES}")
    return dataclasses.replace(cfg, **{f"quantize_{site}": enabled})


def set_precision_mode(
    cfg: LayerQuantConfig, mode: PrecisionMode | str
) -> LayerQuantConfig:
    """Assign element formats for a precision mode.

    ``fp6xfp4`` lifts the activation-side operands — the forward activation,
    the output gradient feeding dx, and the activation feeding dw — to FP6
    while the weight-side operands and the output gradient feeding dw stay
    FP4; ``fp6xfp6`` lifts all six sites.
    """
    mode = PrecisionMode(mode)
    fp6 = cfg.fp6_variant
    if mode is PrecisionMode.FP4XFP4:
        fmts = dict.fromkeys(QUANTIZER_SITES, "e2m1")
    elif mode is PrecisionMode.FP6XFP4:
        fmts = dict.fromkeys(QUANTIZER_SITES, "e2m1")
        fmts["fwd_x"] = fp6
        fmts["dy_for_dx"] = fp6
        fmts["x_for_dw"] = fp6
    else:
        fmts = dict.fromkeys(QUANTIZER_SITES, fp6)
    return dataclasses.replace(
        cfg, **{f"format_{site}": fmt for site, fmt in fmts.items()}
    )


@dataclasses.dataclass
class LinearCache:
    """Forward-pass tensors the backward pass must see unchanged."""

    x_hat: np.ndarray
    w_hat: np.ndarray
    x_raw: np.ndarray
    step: int
    layer_tag: str
    n: int
    d: int
    c: int
    fwd_ctx: Optional[hd.RhtContext]
    clamp_counts: Dict[str, int]


# ── outlier helpers ──────────────────────────────────────────────────────────


def _cast_outlier(cols: np.ndarray, precision: str) -> np.ndarray:
    """High-precision passthrough for retained channels.

    ``e4m3`` uses one shared current scale (amax / 448) so values of any
    magnitude survive with FP8-relative error instead of saturating.
    """
    if precision == "float32":
        return cols.astype(F32, copy=True)
    if precision == "float16":
        return cols.astype(np.float16).astype(F32)
    amax = float(np.max(np.abs(cols))) if cols.size else 0.0
    if amax == 0.0:
        return np.zeros_like(cols)
    s = np.float32(amax / 448.0)
    return (fc.round_det(cols / s, fc.FP8_E4M3) * s).astype(F32)


def select_outlier_channels(
    calibration_acts: Sequence[np.ndarray],
    p: float,
    style: OutlierStyle | str = OutlierStyle.LARGEST_NORM,
    *,
    seed: int = 0,
    precision: str = "e4m3",
) -> OutlierConfig:
    """Pick round(p% of D) channels to retain, frozen for the run.

    ``largest-norm`` ranks channels by aggregate L2 norm over all calibration
    batches (ties broken by channel index); ``random`` samples uniformly from
    the seeded stream; ``none`` retains nothing.
    """
    style = OutlierStyle(style)
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"outlier ratio must be in [0, 100], got {p}")
    mats = [as_matrix(a) for a in calibration_acts]
    if not mats:
        raise ValueError("outlier selection needs at least one calibration batch")
    d = mats[0].shape[1]
    if any(m.shape[1] != d for m in mats):
        raise ValueError("calibration batches disagree on channel count")
    if style is OutlierStyle.NONE:
        return OutlierConfig(channels=(), ratio=p, precision=precision)
    k = int(round(p / 100.0 * d))
    if k == 0:
        return OutlierConfig(channels=(), ratio=p, precision=precision)
    if style is OutlierStyle.RANDOM:
        rng = fc.stream(seed, "outlier-select")
        chosen = rng.choice(d, size=k, replace=False)
    else:
        sq = np.zeros(d, dtype=np.float64)
        for m in mats:
            sq += np.sum(m.astype(np.float64) ** 2, axis=0)
        chosen = np.argsort(-sq, kind="stable")[:k]
    return OutlierConfig(
        channels=tuple(sorted(int(c) for c in chosen)),
        ratio=p,
        precision=precision,
    )


# ── quantizer plumbing ───────────────────────────────────────────────────────


def _site_quantize(mat, orientation, outer, fmt, mode, rng):
    return bq.quantize_dequantize(
        mat, orientation, outer=outer, mode=mode, rng=rng, element_fmt=fmt
    )


def _rht_inverse(m: np.ndarray, ctx: hd.RhtContext) -> np.ndarray:
    """Undo a right-side rotation: ``m @ (diag(signs) H).T``, cropped to dim."""
    rows = m.shape[0]
    if m.shape[1] != ctx.padded_dim:
        raise ValueError(
            f"expected padded width {ctx.padded_dim}, got {m.shape[1]}"
        )
    out = hd._fwht_last_axis(
        m.reshape(rows, ctx.padded_dim // ctx.block, ctx.block), ctx.block
    ).reshape(rows, ctx.padded_dim)
    out = out * ctx.signs
    return np.ascontiguousarray(out[:, : ctx.dim])


def _rotate_pair(first, second_rows, dim, cfg, step, side):
    """Rotate a matmul's operands along the shared contraction axis.

    ``first`` has the contraction on its last axis; ``second_rows`` on its
    first.  Both keep the padded width so the contraction stays exact.
    """
    ctx = hd.rht_context(
        dim,
        seed=cfg.rht_seed,
        layer=cfg.layer_tag,
        step=step,
        side=side,
        block=cfg.rht_block,
    )
    a = hd.rht_apply(first, ctx, keep_padding=True)
    b = hd.rht_apply(second_rows.T, ctx, keep_padding=True).T
    return a, b, ctx


# ── forward ──────────────────────────────────────────────────────────────────


def linear_forward(
    x,
    w,
    cfg: LayerQuantConfig,
    rng=None,
    step: int = 0,
) -> Tuple[np.ndarray, LinearCache]:
    """Quantized forward matmul ``y = x_hat @ w_hat.T`` returning the cache.

    Forward quantization is always round-to-nearest, so ``rng`` is unused and
    accepted only for signature symmetry with the backward pass.
    """
    x = as_matrix(x)
    w = as_matrix(w)
    n, d = x.shape
    c, dw_cols = w.shape
    if dw_cols != d:
        raise ValueError(
            f"x has {d} input channels but w has {dw_cols}"
        )
    outlier = cfg.outlier if (cfg.outlier and cfg.outlier.channels) else None
    if outlier is not None:
        a_idx = np.asarray(outlier.channels, dtype=np.intp)
        if a_idx.min() < 0 or a_idx.max() >= d:
            raise ValueError(
                f"outlier channel indices must lie in [0, {d}), got {outlier.channels}"
            )
        if cfg.rht_fwd:
            raise ValueError(
                "outlier retention indexes raw input channels and cannot be "
                "combined with a rotated forward"
            )

    clamps: Dict[str, int] = {}
    fwd_ctx = None
    x_op, w_op = x, w
    if cfg.rht_fwd and (cfg.quantize_fwd_x or cfg.quantize_fwd_w):
        fwd_ctx = hd.rht_context(
            d,
            seed=cfg.rht_seed,
            layer=cfg.layer_tag,
            step=step,
            side="fwd",
            block=cfg.rht_block,
        )
        x_op = hd.rht_apply(x, fwd_ctx, keep_padding=True)
        w_op = hd.rht_apply(w, fwd_ctx, keep_padding=True)

    if cfg.quantize_fwd_x:
        if outlier is not None:
            x_zeroed = x_op.copy()
            x_zeroed[:, a_idx] = 0.0
            x_hat, clamps["fwd_x"] = _site_quantize(
                x_zeroed,
                Orientation.ROW_GROUPS_1X16,
                cfg.outer_granularity,
                cfg.format_fwd_x,
                "det",
                None,
            )
            x_hat[:, a_idx] = _cast_outlier(x_op[:, a_idx], outlier.precision)
        else:
            x_hat, clamps["fwd_x"] = _site_quantize(
                x_op,
                Orientation.ROW_GROUPS_1X16,
                cfg.outer_granularity,
                cfg.format_fwd_x,
                "det",
                None,
            )
    else:
        x_hat = x_op

    if cfg.quantize_fwd_w:
        w_hat, clamps["fwd_w"] = _site_quantize(
            w_op,
            cfg.weight_block,
            cfg.outer_granularity,
            cfg.format_fwd_w,
            "det",
            None,
        )
    else:
        w_hat = w_op

    y = x_hat @ w_hat.T
    cache = LinearCache(
        x_hat=x_hat,
        w_hat=w_hat,
        x_raw=x_op,
        step=step,
        layer_tag=cfg.layer_tag,
        n=n,
        d=d,
        c=c,
        fwd_ctx=fwd_ctx,
        clamp_counts=clamps,
    )
    return y, cache


# ── backward ─────────────────────────────────────────────────────────────────


def linear_backward(
    dy,
    cache: LinearCache,
    cfg: LayerQuantConfig,
    rng=None,
    step: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Quantized backward pass returning ``(dx, dw)``.

    Backward sites round stochastically when ``cfg.stochastic_backward`` is
    set (requires ``rng``), deterministically otherwise.  The generator is
    consumed in the fixed order Q3, Q4, Q5, Q6.
    """
    dy = as_matrix(dy)
    if step is None:
        step = cache.step
    if step != cache.step:
        raise ValueError(
            f"cache was built at step {cache.step} but backward got step {step}"
        )
    if dy.shape != (cache.n, cache.c):
        raise ValueError(
            f"dy must have shape {(cache.n, cache.c)}, got {dy.shape}"
        )
    mode = "stoch" if cfg.stochastic_backward else "det"
    backward_sites = (
        cfg.quantize_dy_for_dx,
        cfg.quantize_w_for_dx,
        cfg.quantize_dy_for_dw,
        cfg.quantize_x_for_dw,
    )
    if mode == "stoch" and any(backward_sites) and rng is None:
        raise ValueError("stochastic backward rounding requires an rng")
    outer = cfg.outer_granularity

    # dx = Q3(dy) @ Q4(w_hat), contraction along the output channels
    a_op, b_op = dy, cache.w_hat
    if cfg.rht_dx and (cfg.quantize_dy_for_dx or cfg.quantize_w_for_dx):
        a_op, b_op, _ = _rotate_pair(dy, cache.w_hat, cache.c, cfg, step, "dx")
    if cfg.quantize_dy_for_dx:
        a_hat, cache.clamp_counts["dy_for_dx"] = _site_quantize(
            a_op, Orientation.ROW_GROUPS_1X16, outer, cfg.format_dy_for_dx, mode, rng
        )
    else:
        a_hat = a_op
    if cfg.quantize_w_for_dx:
        b_orient = (
            Orientation.SQUARE_16X16
            if cfg.weight_block is Orientation.SQUARE_16X16
            else Orientation.COL_GROUPS_16X1
        )
        b_hat, cache.clamp_counts["w_for_dx"] = _site_quantize(
            b_op, b_orient, outer, cfg.format_w_for_dx, mode, rng
        )
    else:
        b_hat = b_op
    dx = a_hat @ b_hat

    # dw = Q5(dy.T) @ Q6(x_hat or raw x), contraction along the batch
    x_src = cache.x_hat if cfg.align_xhat else cache.x_raw
    at_op, bt_op = dy.T, x_src
    if cfg.rht_dw and (cfg.quantize_dy_for_dw or cfg.quantize_x_for_dw):
        at_op, bt_op, _ = _rotate_pair(dy.T, x_src, cache.n, cfg, step, "dw")
    if cfg.quantize_dy_for_dw:
        at_hat, cache.clamp_counts["dy_for_dw"] = _site_quantize(
            at_op, Orientation.ROW_GROUPS_1X16, outer, cfg.format_dy_for_dw, mode, rng
        )
    else:
        at_hat = at_op
    if cfg.quantize_x_for_dw:
        bt_hat, cache.clamp_counts["x_for_dw"] = _site_quantize(
            bt_op, Orientation.COL_GROUPS_16X1, outer, cfg.format_x_for_dw, mode, rng
        )
    else:
        bt_hat = bt_op
    dw = at_hat @ bt_hat

    if cache.fwd_ctx is not None:
        dx = _rht_inverse(dx, cache.fwd_ctx)
        dw = _rht_inverse(dw, cache.fwd_ctx)

    if cfg.outlier and cfg.outlier.channels:
        a_idx = np.asarray(cfg.outlier.channels, dtype=np.intp)
        dw[:, a_idx] = dy.T @ cache.x_hat[:, a_idx]

    return dx, dw
