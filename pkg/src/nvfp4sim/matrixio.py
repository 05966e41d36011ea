"""Matrix exchange files: a small binary dump format plus CSV for dense data.

Binary layout (all integers little-endian):

    magic   4 bytes  b"QMXF"
    version u32      1
    kind    u8       0 = dense binary32 matrix, 1 = quantized matrix
    rows    u32
    cols    u32
    payload          kind 0: rows*cols float32, row-major
                     kind 1: the quantized-matrix fields in declaration
                             order — orientation u8, outer granularity u8,
                             element format u8, scale format u8, group u8,
                             then three length-prefixed arrays (u64 count):
                             packed codes (bytes), inner scales (float32),
                             outer scales (float32), and clamp count u64

CSV files hold dense matrices only, one row per line, values formatted with
nine significant digits so binary32 values round-trip exactly.

Malformed files raise :class:`FileFormatError` carrying the byte offset of
the offending field (for truncation, the offset where the file ended).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import blockquant as bq
from .blockquant import Orientation, OuterGranularity, QuantizedMatrix

__all__ = [
    "MAGIC",
    "VERSION",
    "FileFormatError",
    "save_dense",
    "save_csv",
    "save_quantized",
    "load_quantized",
    "load_matrix",
]

MAGIC = b"QMXF"
VERSION = 1

F32 = np.float32

_ORIENT_CODES = {
    Orientation.ROW_GROUPS_1X16: 0,
    Orientation.COL_GROUPS_16X1: 1,
    Orientation.SQUARE_16X16: 2,
}
_OUTER_CODES = {
    OuterGranularity.BLOCK_1X128: 0,
    OuterGranularity.PER_ROW: 1,
    OuterGranularity.PER_TENSOR: 2,
}
_ELEMENT_CODES = {"e2m1": 0, "e3m2": 1, "e2m3": 2}
_SCALE_CODES = {"e4m3": 0, "e8m0": 1}
_ORIENT_NAMES = {v: k for k, v in _ORIENT_CODES.items()}
_OUTER_NAMES = {v: k for k, v in _OUTER_CODES.items()}
_ELEMENT_NAMES = {v: k for k, v in _ELEMENT_CODES.items()}
_SCALE_NAMES = {v: k for k, v in _SCALE_CODES.items()}


class FileFormatError(ValueError):
    """Malformed matrix file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def _as_dense(m) -> np.ndarray:
    a = np.asarray(m, dtype=F32)
    if a.ndim != 2:
        raise ValueError(f"matrix files hold 2-D data, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return np.ascontiguousarray(a)


# ── writers ──────────────────────────────────────────────────────────────────


def save_dense(path, m) -> None:
    a = _as_dense(m)
    rows, cols = a.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBII", VERSION, 0, rows, cols))
        f.write(a.tobytes())


def save_csv(path, m) -> None:
    a = _as_dense(m)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for row in a:
            f.write(",".join(format(float(v), ".9g") for v in row))
            f.write("\n")


def save_quantized(path, q: QuantizedMatrix) -> None:
    codes = np.ascontiguousarray(q.codes, dtype=np.uint8)
    inner = np.ascontiguousarray(q.inner_scales, dtype=F32)
    outer = np.ascontiguousarray(q.outer_scales, dtype=F32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBII", VERSION, 1, q.rows, q.cols))
        f.write(
            struct.pack(
                "<BBBBB",
                _ORIENT_CODES[q.orientation],
                _OUTER_CODES[q.outer],
                _ELEMENT_CODES[q.element_fmt],
                _SCALE_CODES[q.scale_fmt],
                q.group,
            )
        )
        f.write(struct.pack("<Q", codes.size))
        f.write(codes.tobytes())
        f.write(struct.pack("<Q", inner.size))
        f.write(inner.tobytes())
        f.write(struct.pack("<Q", outer.size))
        f.write(outer.tobytes())
        f.write(struct.pack("<Q", q.clamp_count))


# ── readers ──────────────────────────────────────────────────────────────────


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FileFormatError(
                f"file ends while reading {what}", offset=len(self.data)
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, count: int, dtype, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def coded(self, table: dict, what: str):
        at = self.pos
        (c,) = self.unpack("<B", what)
        if c not in table:
            raise FileFormatError(f"unknown {what} code {c}", offset=at)
        return table[c]


def _read_header(r: _Reader):
    if r.take(4, "magic") != MAGIC:
        raise FileFormatError(f"bad magic, expected {MAGIC!r}", offset=0)
    at = r.pos
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FileFormatError(f"unsupported version {version}", offset=at)
    at = r.pos
    (kind,) = r.unpack("<B", "kind")
    if kind not in (0, 1):
        raise FileFormatError(f"unknown kind {kind}", offset=at)
    rows, cols = r.unpack("<II", "shape")
    return kind, rows, cols


def _read_quantized(r: _Reader, rows: int, cols: int) -> QuantizedMatrix:
    orientation = r.coded(_ORIENT_NAMES, "orientation")
    outer = r.coded(_OUTER_NAMES, "outer granularity")
    element_fmt = r.coded(_ELEMENT_NAMES, "element format")
    scale_fmt = r.coded(_SCALE_NAMES, "scale format")
    (group,) = r.unpack("<B", "group")
    (n_codes,) = r.unpack("<Q", "code count")
    codes = r.array(n_codes, np.uint8, "codes")
    (n_inner,) = r.unpack("<Q", "inner-scale count")
    inner = r.array(n_inner, F32, "inner scales")
    (n_outer,) = r.unpack("<Q", "outer-scale count")
    outer_scales = r.array(n_outer, F32, "outer scales")
    (clamp_count,) = r.unpack("<Q", "clamp count")
    return QuantizedMatrix(
        rows=rows,
        cols=cols,
        orientation=orientation,
        outer=outer,
        element_fmt=element_fmt,
        scale_fmt=scale_fmt,
        group=group,
        codes=codes,
        inner_scales=inner,
        outer_scales=outer_scales,
        clamp_count=clamp_count,
    )


def _load_binary(data: bytes):
    r = _Reader(data)
    kind, rows, cols = _read_header(r)
    if kind == 0:
        flat = r.array(rows * cols, F32, "dense payload")
        return flat.reshape(rows, cols)
    return _read_quantized(r, rows, cols)


def _load_csv(data: bytes) -> np.ndarray:
    rows = []
    width = None
    offset = 0
    for line in data.split(b"\n"):
        text = line.decode("ascii", errors="replace").strip()
        if text:
            values = []
            col_at = offset
            for tok in line.decode("ascii", errors="replace").split(","):
                try:
                    values.append(float(tok))
                except ValueError:
                    raise FileFormatError(
                        f"not a number: {tok.strip()!r}", offset=col_at
                    ) from None
                col_at += len(tok.encode("ascii", errors="replace")) + 1
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise FileFormatError(
                    f"row has {len(values)} columns, expected {width}",
                    offset=offset,
                )
            rows.append(values)
        offset += len(line) + 1
    if not rows:
        raise FileFormatError("no data rows", offset=0)
    return np.asarray(rows, dtype=F32)


def load_quantized(path) -> QuantizedMatrix:
    data = Path(path).read_bytes()
    out = _load_binary(data)
    if not isinstance(out, QuantizedMatrix):
        raise FileFormatError("file holds a dense matrix, not a quantized one", offset=8)
    return out


def load_matrix(path) -> np.ndarray:
    """Load a dense matrix from a binary dump or CSV file.

    Binary files are recognized by their magic; anything that looks like text
    is parsed as CSV.  Quantized dumps load as their dequantized matrix.
    """
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        out = _load_binary(data)
        return bq.dequantize(out) if isinstance(out, QuantizedMatrix) else out
    if b"\x00" not in data[:1024] and data:
        return _load_csv(data)
    raise FileFormatError(f"bad magic, expected {MAGIC!r}", offset=0)
