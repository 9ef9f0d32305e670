"""Crypto primitives: hashing, signatures, key agreement, AEAD, DRBG."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meterfaas import crypto
from meterfaas.crypto import (
    AgreementKeyPair,
    CryptoError,
    DeterministicRng,
    SessionKey,
    SigningKeyPair,
    TamperError,
    aead_open,
    aead_seal,
    derive_session_key,
    hash_bytes,
    sign,
    verify,
)

# SHA-256 of the empty string, as published everywhere
EMPTY_SHA256 = bytes.fromhex("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


class TestHash:
    def test_deterministic(self):
        assert hash_bytes(b"abc") == hash_bytes(b"abc")

    def test_empty_string_reference_digest(self):
        assert hash_bytes(b"") == EMPTY_SHA256

    def test_single_bit_flip_changes_digest(self):
        base = b"some message for hashing"
        flipped = bytes([base[0] ^ 0x01]) + base[1:]
        assert hash_bytes(base) != hash_bytes(flipped)

    def test_digest_is_32_bytes(self):
        assert len(hash_bytes(b"x" * 1000)) == 32


class TestDeterministicRng:
    def test_same_seed_same_stream(self):
        a = DeterministicRng(7, "x")
        b = DeterministicRng(7, "x")
        assert a.bytes(100) == b.bytes(100)

    def test_label_separates_streams(self):
        assert DeterministicRng(7, "x").bytes(32) != DeterministicRng(7, "y").bytes(32)

    def test_children_independent(self):
        root = DeterministicRng(1)
        assert root.child("a").bytes(16) != root.child("b").bytes(16)


class TestSignatures:
    def setup_method(self):
        self.pair = SigningKeyPair.generate(DeterministicRng(3, "sig"))

    def test_sign_verify_roundtrip(self):
        msg = b"measurement report"
        assert verify(self.pair.public, msg, sign(self.pair.private, msg))

    def test_flipped_message_byte_rejected(self):
        msg = b"measurement report"
        sig = sign(self.pair.private, msg)
        assert not verify(self.pair.public, b"Measurement report", sig)

    def test_different_public_key_rejected(self):
        other = SigningKeyPair.generate(DeterministicRng(4, "sig"))
        msg = b"m"
        assert not verify(other.public, msg, sign(self.pair.private, msg))

    def test_malformed_signature_returns_false_not_crash(self):
        assert not verify(self.pair.public, b"m", b"garbage")
        assert not verify(self.pair.public, b"m", b"\x00" * 64)
        assert not verify(b"not-a-key", b"m", b"\x00" * 64)


class TestKeyAgreement:
    def test_commutative(self):
        a = AgreementKeyPair.generate(DeterministicRng(1, "ka"))
        b = AgreementKeyPair.generate(DeterministicRng(2, "ka"))
        assert derive_session_key(a.private, b.public) == derive_session_key(b.private, a.public)

    def test_distinct_peers_distinct_keys(self):
        a = AgreementKeyPair.generate(DeterministicRng(1, "ka"))
        b = AgreementKeyPair.generate(DeterministicRng(2, "ka"))
        c = AgreementKeyPair.generate(DeterministicRng(3, "ka"))
        assert derive_session_key(a.private, b.public) != derive_session_key(a.private, c.public)

    def test_malformed_peer_errors(self):
        a = AgreementKeyPair.generate(DeterministicRng(1, "ka"))
        with pytest.raises(CryptoError):
            derive_session_key(a.private, b"short")

    def test_symmetry_over_many_random_pairs(self):
        rng = DeterministicRng(99, "pairs")
        for _ in range(1000):
            a = AgreementKeyPair.generate(rng.child(str(rng.u64())))
            b = AgreementKeyPair.generate(rng.child(str(rng.u64())))
            assert derive_session_key(a.private, b.public) == derive_session_key(b.private, a.public)


class TestAead:
    def setup_method(self):
        self.key = SessionKey(key=DeterministicRng(5, "aead").bytes(32))

    def test_roundtrip(self):
        nonce = b"\x01" * 12
        ct = aead_seal(self.key, nonce, b"plaintext", b"aad")
        assert aead_open(self.key, nonce, ct, b"aad") == b"plaintext"

    def test_flipped_ciphertext_byte_tamper_error(self):
        nonce = b"\x01" * 12
        ct = bytearray(aead_seal(self.key, nonce, b"plaintext", b"aad"))
        ct[3] ^= 0x40
        with pytest.raises(TamperError):
            aead_open(self.key, nonce, bytes(ct), b"aad")

    def test_different_aad_tamper_error(self):
        nonce = b"\x01" * 12
        ct = aead_seal(self.key, nonce, b"plaintext", b"aad")
        with pytest.raises(TamperError):
            aead_open(self.key, nonce, ct, b"other")

    def test_bad_nonce_length_rejected(self):
        with pytest.raises(CryptoError):
            aead_seal(self.key, b"\x01" * 8, b"p", b"")

    def test_bulk_roundtrip_and_tamper_rejection(self):
        # 10,000 randomized (key, nonce, plaintext, aad) tuples
        rng = DeterministicRng(6, "bulk")
        for i in range(10_000):
            key = SessionKey(key=rng.bytes(32))
            nonce = rng.bytes(12)
            pt = rng.bytes(rng.randrange(64))
            aad = rng.bytes(rng.randrange(16))
            ct = aead_seal(key, nonce, pt, aad)
            assert aead_open(key, nonce, ct, aad) == pt
            if i % 10 == 0:
                corrupted = bytearray(ct)
                corrupted[rng.randrange(len(corrupted))] ^= 1 + rng.randrange(255)
                with pytest.raises(TamperError):
                    aead_open(key, nonce, bytes(corrupted), aad)

    @given(st.binary(max_size=128), st.binary(max_size=32))
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_property(self, plaintext, aad):
        nonce = b"\x07" * 12
        ct = aead_seal(self.key, nonce, plaintext, aad)
        assert aead_open(self.key, nonce, ct, aad) == plaintext


class TestKeyGeneration:
    def test_seeded_generation_reproducible(self):
        a = SigningKeyPair.generate(DeterministicRng(11, "s"))
        b = SigningKeyPair.generate(DeterministicRng(11, "s"))
        assert a == b

    def test_private_not_in_public(self):
        pair = SigningKeyPair.generate(DeterministicRng(12, "s"))
        assert pair.private != pair.public

    def test_session_key_not_repr_leaked(self):
        key = SessionKey(key=b"\x99" * 32)
        assert "99" not in repr(key)
