import base64
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protbox import codec, crypto
from protbox.errors import BadPadding, InvalidName, MalformedEncoding

sys.path.insert(0, str(Path(__file__).parent))
import aes_oracle  # noqa: E402

# frozen with tests/aes_oracle.py (independent table-based AES):
# AES-256-ECB(zero key, pkcs5_pad(b"a")) -> modified base64
ZERO_KEY_NAME_A = "tKXpivaBCoO99SsUroIsNw=="


def zero_key():
    return crypto.PairKey(secret=bytes(32))


class TestEncodeBytes:
    def test_empty(self):
        assert codec.encode_bytes(b"") == ""

    def test_single_zero_byte(self):
        assert codec.encode_bytes(b"\x00") == "AA=="

    def test_slash_substitution(self):
        # standard base64 of 0xFFFFFF is "////"
        assert codec.encode_bytes(b"\xff\xff\xff") == "----"

    @given(st.binary(max_size=200))
    def test_roundtrip(self, data):
        assert codec.decode_bytes(codec.encode_bytes(data)) == data

    @given(st.binary(max_size=200))
    def test_alphabet_and_shape(self, data):
        text = codec.encode_bytes(data)
        assert not any(c in text for c in "/\\:_")
        assert len(text) % 4 == 0
        assert text.count("=") <= 2
        assert not text.startswith("_")


class TestDecodeBytes:
    def test_empty(self):
        assert codec.decode_bytes("") == b""

    def test_hyphens(self):
        assert codec.decode_bytes("----") == b"\xff\xff\xff"

    @pytest.mark.parametrize("bad", ["A!==", "AAA", "A===", "AA=A", "A/==", "_AAA"])
    def test_malformed(self, bad):
        with pytest.raises(MalformedEncoding):
            codec.decode_bytes(bad)

    def test_noncanonical_padding_bits(self):
        with pytest.raises(MalformedEncoding):
            codec.decode_bytes("AB==")  # decodes but does not re-encode to itself


class TestNameEncryption:
    def test_roundtrip(self, pair_key):
        assert codec.decrypt_name(pair_key, codec.encrypt_name(pair_key, "report.docx")) == "report.docx"

    def test_sixteen_byte_name_length(self, pair_key):
        # 16 UTF-8 bytes pad to 32 cipher bytes -> 44 base64 chars, one '='
        name = "a" * 16
        text = codec.encrypt_name(pair_key, name)
        assert len(text) == 44
        assert text.endswith("=") and not text.endswith("==")

    def test_zero_key_vector_matches_independent_oracle(self):
        key = zero_key()
        expected = base64.b64encode(
            aes_oracle.ecb_encrypt(bytes(32), aes_oracle.pkcs5_pad(b"a"))
        ).decode().replace("/", "-")
        assert expected == ZERO_KEY_NAME_A
        assert codec.encrypt_name(key, "a") == ZERO_KEY_NAME_A

    def test_deterministic(self, pair_key):
        assert codec.encrypt_name(pair_key, "x.txt") == codec.encrypt_name(pair_key, "x.txt")

    @pytest.mark.parametrize("bad", ["", "a/b", "a\\b", "a\x00b"])
    def test_invalid_names(self, pair_key, bad):
        with pytest.raises(InvalidName):
            codec.encrypt_name(pair_key, bad)

    def test_unaligned_ciphertext_is_bad_padding(self, pair_key):
        with pytest.raises(BadPadding):
            codec.decrypt_name(pair_key, codec.encode_bytes(b"123456789"))

    def test_wrong_key_rejected_with_overwhelming_probability(self):
        import random

        rnd = random.Random(1)
        failures = 0
        trials = 1000
        for _ in range(trials):
            k1 = crypto.PairKey(secret=bytes(rnd.getrandbits(8) for _ in range(32)))
            k2 = crypto.PairKey(secret=bytes(rnd.getrandbits(8) for _ in range(32)))
            name = "".join(rnd.choice("abcdefghij") for _ in range(rnd.randint(1, 24)))
            try:
                codec.decrypt_name(k2, codec.encrypt_name(k1, name))
            except BadPadding:
                failures += 1
        assert failures >= 999

    @settings(max_examples=200)
    @given(
        st.text(
            alphabet=st.characters(blacklist_characters="/\\\x00", blacklist_categories=("Cs",)),
            min_size=1,
            max_size=60,
        )
    )
    def test_roundtrip_property(self, name):
        key = zero_key()
        assert codec.decrypt_name(key, codec.encrypt_name(key, name)) == name

    def test_no_collisions_over_many_names(self, pair_key):
        import random

        rnd = random.Random(7)
        names = {f"f{rnd.getrandbits(64):x}-{i}" for i in range(10_000)}
        encoded = {codec.encrypt_name(pair_key, n) for n in names}
        assert len(encoded) == len(names)

    def test_path_helpers(self, pair_key):
        enc = codec.encrypt_path(pair_key, "a/b/c.txt")
        assert enc.count("/") == 2
        assert codec.decrypt_path(pair_key, enc) == "a/b/c.txt"
