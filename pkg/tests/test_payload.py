import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deltasnap import quant
from deltasnap.errors import FormatError
from deltasnap.payload import (
    HEADER_SIZE,
    SECTION_MAGIC,
    TableSection,
    parse_shard_payload,
    serialize_section,
    serialize_shard_payload,
)


def fp32_section(table_id=1, rows=4, dim=3, seed=0, incremental=False, aux=False):
    rng = np.random.default_rng(seed)
    return TableSection(
        table_id=table_id,
        dim=dim,
        mode=0,
        values=rng.normal(0, 1, (rows, dim)).astype(np.float32),
        row_indices=(np.sort(rng.choice(10 * rows, rows, replace=False)).astype(np.int64)
                     if incremental else None),
        aux=rng.random((rows, dim)).astype(np.float32) if aux else None,
    )


def quantized_section(table_id=2, rows=5, dim=7, bitwidth=4, seed=1, incremental=False, aux=False):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, (rows, dim)).astype(np.float32)
    mins = x.min(axis=1)
    maxs = x.max(axis=1)
    codes = quant.quantize_rows(x, mins, maxs, bitwidth)
    return TableSection(
        table_id=table_id,
        dim=dim,
        mode=1,
        bitwidth=bitwidth,
        params=np.stack([mins, maxs], axis=1),
        codes=quant.pack_code_rows(codes, bitwidth),
        row_indices=(np.arange(rows, dtype=np.int64) * 3 if incremental else None),
        aux=rng.random((rows, dim)).astype(np.float32) if aux else None,
    )


def assert_sections_equal(a: TableSection, b: TableSection):
    assert a.table_id == b.table_id
    assert a.dim == b.dim
    assert a.mode == b.mode
    assert a.bitwidth == b.bitwidth
    for name in ("row_indices", "values", "params", "codes", "aux"):
        va, vb = getattr(a, name), getattr(b, name)
        assert (va is None) == (vb is None), name
        if va is not None:
            assert np.array_equal(va, vb), name


@pytest.mark.parametrize("incremental", [False, True])
@pytest.mark.parametrize("aux", [False, True])
def test_round_trip_both_modes(incremental, aux):
    sections = [
        fp32_section(table_id=0, rows=6, dim=5, incremental=incremental, aux=aux),
        quantized_section(table_id=1, rows=3, dim=5, incremental=incremental, aux=aux),
        quantized_section(table_id=2, rows=0, dim=5, incremental=incremental),
    ]
    blob = serialize_shard_payload(sections, incremental)
    back = parse_shard_payload(blob, incremental)
    assert len(back) == len(sections)
    for orig, parsed in zip(sections, back):
        assert_sections_equal(orig, parsed)


def test_serialize_parse_serialize_is_identity():
    sections = [fp32_section(), quantized_section(bitwidth=2), quantized_section(table_id=9, bitwidth=8)]
    blob = serialize_shard_payload(sections, incremental=False)
    again = serialize_shard_payload(parse_shard_payload(blob, False), incremental=False)
    assert blob == again


def test_empty_payload_parses_to_no_sections():
    assert parse_shard_payload(b"", incremental=False) == []
    assert serialize_shard_payload([], incremental=True) == b""


def test_decode_values_dequantizes():
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (8, 6)).astype(np.float32)
    mins, maxs = x.min(axis=1), x.max(axis=1)
    codes = quant.quantize_rows(x, mins, maxs, 4)
    sec = TableSection(
        table_id=0, dim=6, mode=1, bitwidth=4,
        params=np.stack([mins, maxs], axis=1),
        codes=quant.pack_code_rows(codes, 4),
    )
    expected = quant.dequantize_rows(codes, mins, maxs, 4)
    assert np.array_equal(sec.decode_values(), expected)


def test_header_layout():
    sec = fp32_section(table_id=7, rows=0, dim=2)
    sec.values = np.zeros((0, 2), dtype=np.float32)
    blob = serialize_section(sec, incremental=False)
    assert len(blob) == HEADER_SIZE == 24
    assert blob[:4] == SECTION_MAGIC == b"CNR1"
    assert int.from_bytes(blob[4:8], "little") == 7          # table id
    assert int.from_bytes(blob[8:16], "little") == 0         # row count
    assert int.from_bytes(blob[16:20], "little") == 2        # dim
    assert blob[20] == 32                                    # fp32 bitwidth tag
    assert blob[21] == 0                                     # mode
    assert blob[22] == 0                                     # aux flag
    assert blob[23] == 0                                     # reserved


def test_record_sizes_are_exact():
    # mode 1, dim 7, 4-bit: 8 params + 4 packed bytes, +8 for the row index
    sec = quantized_section(rows=5, dim=7, bitwidth=4)
    assert len(serialize_section(sec, False)) == 24 + 5 * (8 + 4)
    inc = quantized_section(rows=5, dim=7, bitwidth=4, incremental=True)
    assert len(serialize_section(inc, True)) == 24 + 5 * (8 + 8 + 4)
    fp = fp32_section(rows=4, dim=3, aux=True)
    assert len(serialize_section(fp, False)) == 24 + 4 * (12 + 12)


def test_rejects_bad_magic():
    blob = bytearray(serialize_section(fp32_section(), False))
    blob[:4] = b"XXXX"
    with pytest.raises(FormatError):
        parse_shard_payload(bytes(blob), False)


def test_rejects_truncation_at_every_length():
    blob = serialize_shard_payload(
        [fp32_section(rows=2, dim=2), quantized_section(rows=2, dim=2)], False
    )
    first_section_end = 24 + 2 * 8
    for cut in range(1, len(blob)):
        # every cut must either raise or fall on a section boundary
        try:
            parse_shard_payload(blob[:cut], False)
        except FormatError:
            continue
        assert cut == first_section_end, cut


def test_rejects_trailing_garbage():
    blob = serialize_section(fp32_section(), False)
    with pytest.raises(FormatError):
        parse_shard_payload(blob + b"\x01", False)


def test_rejects_reserved_and_bad_bitwidth():
    blob = bytearray(serialize_section(fp32_section(rows=1, dim=1), False))
    bad_reserved = bytearray(blob)
    bad_reserved[23] = 1
    with pytest.raises(FormatError):
        parse_shard_payload(bytes(bad_reserved), False)

    bad_width = bytearray(blob)
    bad_width[20] = 5     # neither a valid quantized width nor the fp32 tag
    bad_width[21] = 1     # claim quantized mode
    with pytest.raises(FormatError):
        parse_shard_payload(bytes(bad_width), False)

    bad_mode = bytearray(blob)
    bad_mode[21] = 2
    with pytest.raises(FormatError):
        parse_shard_payload(bytes(bad_mode), False)


def test_quantized_dims_1_through_65_survive():
    rng = np.random.default_rng(0)
    for bitwidth in (2, 3, 4, 8):
        for dim in (1, 2, 7, 8, 9, 31, 33, 64, 65):
            x = rng.normal(0, 1, (3, dim)).astype(np.float32)
            mins, maxs = x.min(axis=1), x.max(axis=1)
            codes = quant.quantize_rows(x, mins, maxs, bitwidth)
            sec = TableSection(
                table_id=0, dim=dim, mode=1, bitwidth=bitwidth,
                params=np.stack([mins, maxs], axis=1),
                codes=quant.pack_code_rows(codes, bitwidth),
            )
            back = parse_shard_payload(serialize_section(sec, False), False)[0]
            assert_sections_equal(sec, back)
            assert np.array_equal(
                quant.unpack_code_rows(back.codes, bitwidth, dim), codes
            )


@given(
    rows=st.integers(0, 6),
    dim=st.integers(1, 12),
    bitwidth=st.sampled_from([2, 3, 4, 8]),
    incremental=st.booleans(),
    aux=st.booleans(),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=80, deadline=None)
def test_round_trip_property(rows, dim, bitwidth, incremental, aux, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (rows, dim)).astype(np.float32)
    mins = x.min(axis=1) if rows else np.zeros(0, np.float32)
    maxs = x.max(axis=1) if rows else np.zeros(0, np.float32)
    codes = quant.quantize_rows(x, mins, maxs, bitwidth)
    sec = TableSection(
        table_id=3, dim=dim, mode=1, bitwidth=bitwidth,
        params=np.stack([mins, maxs], axis=1).astype(np.float32),
        codes=quant.pack_code_rows(codes, bitwidth),
        row_indices=np.arange(rows, dtype=np.int64) if incremental else None,
        aux=rng.random((rows, dim)).astype(np.float32) if aux else None,
    )
    blob = serialize_section(sec, incremental)
    back = parse_shard_payload(blob, incremental)[0]
    assert_sections_equal(sec, back)
    assert serialize_section(back, incremental) == blob
