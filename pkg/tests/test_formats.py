from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from opq import formats
from opq.errors import FormatError


def test_writer_reader_roundtrip():
    w = formats.SectionWriter(formats.TAG_PRUNING)
    w.add(b"hello")
    w.add_json({"a": 1, "b": [1.5, None]})
    w.add_array(np.arange(4, dtype="<i8"))
    blob = w.getvalue()
    assert blob[:8] == formats.MAGIC
    r = formats.SectionReader(blob, expect_tag=formats.TAG_PRUNING)
    assert r.next() == b"hello"
    assert r.next_json() == {"a": 1, "b": [1.5, None]}
    assert np.array_equal(r.next_array("<i8", 4), np.arange(4))
    r.expect_end()


def test_reader_rejects_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        formats.SectionReader(b"NOTMAGIC" + b"PRUN" + b"\x00" * 8)


def test_reader_rejects_wrong_tag():
    blob = formats.SectionWriter(formats.TAG_QUANT).getvalue()
    with pytest.raises(FormatError, match="tag"):
        formats.SectionReader(blob, expect_tag=formats.TAG_PRUNING)


def test_reader_rejects_truncation():
    w = formats.SectionWriter(formats.TAG_PRUNING)
    w.add(b"0123456789")
    blob = w.getvalue()
    with pytest.raises(FormatError, match="truncated"):
        formats.SectionReader(blob[:-3]).next()
    with pytest.raises(FormatError, match="truncated"):
        formats.SectionReader(blob[:14]).next()  # cut inside the length prefix


def test_reader_rejects_trailing_bytes():
    w = formats.SectionWriter(formats.TAG_PRUNING)
    w.add(b"x")
    r = formats.SectionReader(w.getvalue() + b"junk")
    r.next()
    with pytest.raises(FormatError, match="trailing"):
        r.expect_end()


def test_array_section_length_checked():
    w = formats.SectionWriter(formats.TAG_PRUNING)
    w.add_array(np.zeros(3, dtype="<f8"))
    r = formats.SectionReader(w.getvalue())
    with pytest.raises(FormatError, match="array section"):
        r.next_array("<f8", 5)


@given(
    st.lists(st.integers(min_value=0, max_value=2**20 - 1), min_size=0, max_size=200),
    st.integers(min_value=20, max_value=32),
)
def test_pack_unpack_bit_fields_roundtrip(values, width):
    data = formats.pack_bit_fields(np.array(values, dtype=np.uint64), width)
    out = formats.unpack_bit_fields(data, width, len(values))
    assert list(out) == values


@given(
    st.lists(
        st.tuples(
            st.integers(min_value=0, max_value=255),
            st.integers(min_value=0, max_value=2**10 - 1),
        ),
        min_size=0,
        max_size=150,
    )
)
def test_interleave_roundtrip(pairs):
    a = np.array([p[0] for p in pairs], dtype=np.uint64)
    b = np.array([p[1] for p in pairs], dtype=np.uint64)
    data = formats.interleave_bit_fields(a, 8, b, 10)
    assert len(data) == (len(pairs) * 18 + 7) // 8
    ra, rb = formats.deinterleave_bit_fields(data, 8, 10, len(pairs))
    assert np.array_equal(ra, a) and np.array_equal(rb, b)


def test_pack_rejects_overflow():
    with pytest.raises(ValueError, match="does not fit"):
        formats.pack_bit_fields(np.array([256], dtype=np.uint64), 8)


def test_unpack_rejects_short_stream():
    with pytest.raises(FormatError, match="bitstream"):
        formats.unpack_bit_fields(b"\x00", 8, 100)


def test_msb_first_bit_order():
    # value 1 in a 2-bit field lands in the low bit of the field, fields
    # packed from the byte's most significant end: [01][00][00][00] = 0x40
    data = formats.pack_bit_fields(np.array([1, 0, 0, 0], dtype=np.uint64), 2)
    assert data == b"\x40"
