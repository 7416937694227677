"""Key-canceling additive cipher over Z_{2^64}."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heacstore.errors import LayoutMismatch, SpanMismatch
from heacstore.heac import (MODULUS, DigestLayout, EncryptedDigest, decode_signed, encode_signed,
                            encrypt_slots, heac_add, heac_decrypt, heac_decrypt_range, heac_encrypt,
                            lm_hash, lm_hash_many)

u64 = st.integers(0, MODULUS - 1)


def digest(vals, span):
    return EncryptedDigest(np.array(vals, dtype=np.uint64), span)


class TestLmHash:
    def test_zero_secret(self):
        assert lm_hash(bytes(16)) == 0

    def test_identical_halves_cancel(self):
        h = bytes(range(8))
        assert lm_hash(h + h) == 0

    def test_direct_xor(self):
        assert lm_hash((1).to_bytes(8, "big") + (2).to_bytes(8, "big")) == 3

    @given(st.lists(st.binary(min_size=16, max_size=16), min_size=1, max_size=20))
    def test_vectorised_matches_scalar(self, secrets):
        assert [int(x) for x in lm_hash_many(b"".join(secrets))] == [lm_hash(s) for s in secrets]

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            lm_hash(bytes(15))


class TestScalarCipher:
    @pytest.mark.parametrize("m,ki,kn,c", [(0, 99, 99, 0), (5, 3, 7, 1), (1, 0, 2, MODULUS - 1)])
    def test_encrypt_examples(self, m, ki, kn, c):
        assert heac_encrypt(m, ki, kn) == c

    def test_decrypt_examples(self):
        assert heac_decrypt(1, 3, 7) == 5
        assert heac_decrypt(0, 42, 42) == 0

    def test_wrong_keys_decrypt_to_garbage(self):
        # no integrity: a wrong key silently yields a different value
        assert heac_decrypt(1, 4, 7) == 4

    @given(u64, u64, u64)
    def test_roundtrip(self, m, ki, kn):
        assert heac_decrypt(heac_encrypt(m, ki, kn), ki, kn) == m

    @given(st.integers(-(1 << 63), (1 << 63) - 1))
    def test_signed_embedding(self, v):
        assert decode_signed(encode_signed(v)) == v


class TestDigests:
    def test_additive_identity(self):
        b = digest([4, 5, 6], (1, 2))
        out = heac_add(digest([0, 0, 0], (0, 1)), b)
        assert out.span == (0, 2)
        assert out.values() == [4, 5, 6]

    def test_non_adjacent_spans(self):
        with pytest.raises(SpanMismatch):
            heac_add(digest([1], (0, 2)), digest([1], (5, 6)))

    def test_wrapping_addition(self):
        assert heac_add(digest([3], (0, 1)), digest([MODULUS - 1], (1, 2))).values() == [2]

    def test_layout_mismatch(self):
        with pytest.raises(LayoutMismatch):
            heac_add(digest([1, 2], (0, 1)), digest([1], (1, 2)))

    def test_range_decrypt_worked_example(self):
        masks = [10, 20, 5, 7]
        cs = [heac_encrypt(m, masks[i], masks[i + 1]) for i, m in enumerate([1, 2, 3])]
        assert cs == [(1 + 10 - 20) % MODULUS, 17, 1]
        agg = digest([cs[0]], (0, 1))
        for i in (1, 2):
            agg = heac_add(agg, digest([cs[i]], (i, i + 1)))
        assert agg.values() == [9]
        assert heac_decrypt_range(agg, 10, 7) == [6]

    def test_single_element_range_is_decrypt(self):
        c = heac_encrypt(77, 11, 13)
        assert heac_decrypt_range(digest([c], (4, 5)), 11, 13) == [heac_decrypt(c, 11, 13)]

    @given(st.lists(u64, min_size=2, max_size=10))
    def test_zero_plaintexts_decrypt_to_zero(self, masks):
        agg = encrypt_slots([0], masks[0], masks[1], (0, 1))
        for i in range(1, len(masks) - 1):
            agg = heac_add(agg, encrypt_slots([0], masks[i], masks[i + 1], (i, i + 1)))
        assert heac_decrypt_range(agg, masks[0], masks[-1]) == [0]

    def test_serialized_size_is_plaintext_size(self):
        d = digest(list(range(13)), (0, 1))
        assert len(d.to_bytes()) == 13 * 8
        assert EncryptedDigest.from_bytes(d.to_bytes(), (0, 1)) == d


class TestLayout:
    def test_components(self):
        lay = DigestLayout.uniform(0, 10, 3)
        assert lay.components == ("sum", "count", "sumsq", "bin0", "bin1", "bin2")
        assert len(lay) == 6

    @pytest.mark.parametrize("edges", [(1,), (0, 0), (5, 3, 9)])
    def test_rejects_bad_edges(self, edges):
        with pytest.raises(ValueError):
            DigestLayout(edges)
