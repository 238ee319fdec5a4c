import pytest
from hypothesis import given
from hypothesis import strategies as st

from protbox import tlv


def test_encode_layout():
    assert tlv.encode(0x0102, b"hi") == b"\x01\x02\x00\x00\x00\x02hi"


def test_encode_empty_value():
    assert tlv.encode(1, b"") == b"\x00\x01\x00\x00\x00\x00"


def test_scalar_helpers():
    assert tlv.encode_u8(1, 0xAB) == b"\x00\x01\x00\x00\x00\x01\xab"
    assert tlv.encode_u32(1, 0xDEADBEEF)[-4:] == b"\xde\xad\xbe\xef"
    assert tlv.encode_u64(1, 1)[-8:] == b"\x00" * 7 + b"\x01"
    assert tlv.encode_str(1, "é") == tlv.encode(1, "é".encode())
    assert tlv.decode_u32(b"\xde\xad\xbe\xef") == 0xDEADBEEF
    assert tlv.decode_u64(b"\x00" * 7 + b"\x2a") == 42


@given(st.lists(st.tuples(st.integers(0, 0xFFFF), st.binary(max_size=50)), max_size=20))
def test_iter_roundtrip(fields):
    blob = b"".join(tlv.encode(t, v) for t, v in fields)
    assert list(tlv.iter_tlv(blob)) == fields


def test_parse_map_repetition_order():
    blob = tlv.encode(1, b"a") + tlv.encode(2, b"x") + tlv.encode(1, b"b")
    assert tlv.parse_map(blob) == {1: [b"a", b"b"], 2: [b"x"]}


@pytest.mark.parametrize("blob", [b"\x00", b"\x00\x01\x00\x00\x00\x05ab"])
def test_truncation(blob):
    with pytest.raises(tlv.TlvError):
        list(tlv.iter_tlv(blob))
