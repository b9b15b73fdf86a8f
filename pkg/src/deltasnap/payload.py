"""Binary shard payload format.

A shard payload is a concatenation of per-table sections:

    magic "CNR1" | table_id u32 | row_count u64 | dim u32 |
    bitwidth u8 | mode u8 | aux_flag u8 | reserved u8

followed by row_count fixed-size records:

    [row_index u64]                      only in incremental checkpoints
    mode 1: x_min f32 | x_max f32 | packed codes (ceil(dim*N/8) bytes)
    mode 0: dim f32 values
    [dim f32 aux values]                 only when aux_flag is set

Everything is little-endian. Record sizes are computable from the header
alone; a parser rejects any trailing bytes that do not form a complete
section. Mode 0 sections carry bitwidth 32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import quant
from .errors import FormatError

SECTION_MAGIC = b"CNR1"
_HEADER = struct.Struct("<4sIQIBBBB")
HEADER_SIZE = _HEADER.size
FP32_BITWIDTH_TAG = 32


@dataclass
class TableSection:
    """One table's rows inside a shard payload.

    For mode 1, codes hold the bit-packed representation exactly as stored
    on the wire; params holds (x_min, x_max) per row.
    """

    table_id: int
    dim: int
    mode: int
    bitwidth: int | None = None
    row_indices: np.ndarray | None = None  # (rows,) int64, incremental only
    values: np.ndarray | None = None       # (rows, dim) float32, mode 0
    params: np.ndarray | None = None       # (rows, 2) float32, mode 1
    codes: np.ndarray | None = None        # (rows, packed) uint8, mode 1
    aux: np.ndarray | None = None          # (rows, dim) float32

    @property
    def row_count(self) -> int:
        if self.mode == 1:
            return 0 if self.params is None else self.params.shape[0]
        return 0 if self.values is None else self.values.shape[0]

    def decode_values(self) -> np.ndarray:
        """Materialize float32 row values (dequantizing mode 1)."""
        if self.mode == 0:
            return self.values
        codes = quant.unpack_code_rows(self.codes, self.bitwidth, self.dim)
        return quant.dequantize_rows(codes, self.params[:, 0], self.params[:, 1], self.bitwidth)


def _record_size(dim: int, mode: int, bitwidth: int | None, aux: bool, incremental: bool) -> int:
    size = 8 if incremental else 0
    if mode == 1:
        size += 8 + quant.packed_size(dim, bitwidth)
    else:
        size += dim * 4
    if aux:
        size += dim * 4
    return size


def _as_byte_columns(arr: np.ndarray, dtype: str) -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=dtype)
    return a.view(np.uint8).reshape(a.shape[0], -1)


def serialize_section(section: TableSection, incremental: bool) -> bytes:
    rows = section.row_count
    aux_flag = section.aux is not None
    bitwidth_byte = FP32_BITWIDTH_TAG if section.mode == 0 else section.bitwidth
    header = _HEADER.pack(
        SECTION_MAGIC, section.table_id, rows, section.dim,
        bitwidth_byte, section.mode, int(aux_flag), 0,
    )
    if rows == 0:
        return header
    parts = []
    if incremental:
        parts.append(_as_byte_columns(section.row_indices.reshape(rows, 1), "<u8"))
    if section.mode == 1:
        parts.append(_as_byte_columns(section.params, "<f4"))
        parts.append(section.codes)
    else:
        parts.append(_as_byte_columns(section.values, "<f4"))
    if aux_flag:
        parts.append(_as_byte_columns(section.aux, "<f4"))
    return header + np.concatenate(parts, axis=1).tobytes()


def serialize_shard_payload(sections: list[TableSection], incremental: bool) -> bytes:
    return b"".join(serialize_section(s, incremental) for s in sections)


def parse_shard_payload(data: bytes, incremental: bool) -> list[TableSection]:
    """Parse a shard payload; raises FormatError on any malformed input."""
    sections = []
    view = memoryview(data)
    offset = 0
    while offset < len(view):
        if len(view) - offset < HEADER_SIZE:
            raise FormatError("truncated section header")
        magic, table_id, rows, dim, bitwidth, mode, aux_flag, reserved = _HEADER.unpack_from(view, offset)
        offset += HEADER_SIZE
        if magic != SECTION_MAGIC:
            raise FormatError(f"bad section magic {magic!r}")
        if mode not in (0, 1):
            raise FormatError(f"unknown mode {mode}")
        if mode == 1 and bitwidth not in quant.VALID_BITWIDTHS:
            raise FormatError(f"invalid bitwidth {bitwidth} for quantized section")
        if mode == 0 and bitwidth != FP32_BITWIDTH_TAG:
            raise FormatError(f"invalid bitwidth {bitwidth} for fp32 section")
        if aux_flag not in (0, 1) or reserved != 0:
            raise FormatError("malformed section header")
        if dim < 1:
            raise FormatError("dim must be positive")

        rec = _record_size(dim, mode, bitwidth if mode == 1 else None, bool(aux_flag), incremental)
        body_size = rows * rec
        if len(view) - offset < body_size:
            raise FormatError("truncated section body")
        body = np.frombuffer(view, dtype=np.uint8, count=body_size, offset=offset).reshape(rows, rec) \
            if rows else np.zeros((0, rec), dtype=np.uint8)
        offset += body_size

        col = 0
        row_indices = None
        if incremental:
            row_indices = body[:, col:col + 8].copy().view("<u8").reshape(rows).astype(np.int64)
            col += 8
        section = TableSection(
            table_id=table_id, dim=dim, mode=mode,
            bitwidth=bitwidth if mode == 1 else None,
            row_indices=row_indices,
        )
        if mode == 1:
            section.params = body[:, col:col + 8].copy().view("<f4").reshape(rows, 2)
            col += 8
            nb = quant.packed_size(dim, bitwidth)
            section.codes = body[:, col:col + nb].copy()
            col += nb
        else:
            section.values = body[:, col:col + dim * 4].copy().view("<f4").reshape(rows, dim)
            col += dim * 4
        if aux_flag:
            section.aux = body[:, col:col + dim * 4].copy().view("<f4").reshape(rows, dim)
        sections.append(section)
    return sections
