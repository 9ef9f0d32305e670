"""Deterministic cryptographic primitives shared by every protocol message.

Concrete algorithm choices (the contracts fix only sizes and behavior):
SHA-256 for hashing (32-byte digests), Ed25519 for signatures, X25519 for key
agreement, AES-256-GCM for AEAD with 96-bit nonces. All key generation takes an
explicit seed so traces and tests reproduce exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_SIZE = 32
KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 12  # 96-bit AEAD nonce


class CryptoError(Exception):
    """Key agreement or decryption failure; no partial plaintext is released."""


class TamperError(CryptoError):
    """AEAD authentication failed: key, nonce, aad, or ciphertext mismatch."""


def hash_bytes(data: bytes) -> bytes:
    """32-byte SHA-256 digest."""
    return hashlib.sha256(data).digest()


class DeterministicRng:
    """Counter-mode SHA-256 byte stream from an integer or byte seed.

    Not a secure RNG; it exists so that whole deployments (key sets, nonces,
    fuzz cases) replay byte-identically from one seed.
    """

    def __init__(self, seed: int | bytes, label: str = "") -> None:
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=False) if seed >= 0 else str(seed).encode()
        self._key = hashlib.sha256(b"meterfaas-rng|" + label.encode() + b"|" + seed).digest()
        self._counter = 0
        self._buffer = b""

    def bytes(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hashlib.sha256(self._key + self._counter.to_bytes(8, "big")).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def u64(self) -> int:
        return int.from_bytes(self.bytes(8), "big")

    def randrange(self, upper: int) -> int:
        if upper <= 0:
            raise ValueError("upper must be positive")
        return self.u64() % upper

    def child(self, label: str) -> "DeterministicRng":
        return DeterministicRng(self.bytes(32), label)


@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 pair; houses the shapes of the output and measurement keys."""

    private: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: DeterministicRng) -> "SigningKeyPair":
        priv = rng.bytes(KEY_SIZE)
        pub = Ed25519PrivateKey.from_private_bytes(priv).public_key().public_bytes_raw()
        return cls(private=priv, public=pub)


@dataclass(frozen=True)
class AgreementKeyPair:
    """X25519 pair; houses the worker key-agreement and client keys."""

    private: bytes
    public: bytes

    @classmethod
    def generate(cls, rng: DeterministicRng) -> "AgreementKeyPair":
        priv = rng.bytes(KEY_SIZE)
        pub = X25519PrivateKey.from_private_bytes(priv).public_key().public_bytes_raw()
        return cls(private=priv, public=pub)


@dataclass(frozen=True)
class SessionKey:
    """Symmetric key determined by the unordered pair of agreement key pairs."""

    key: bytes = field(repr=False)


def sign(private: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid; malformed inputs return False, never raise."""
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def derive_session_key(mine_private: bytes, peer_public: bytes) -> SessionKey:
    """X25519 exchange hashed with both public keys in sorted order.

    Sorting makes the derivation symmetric in the participants, so
    derive(a, B) == derive(b, A) holds by construction.
    """
    try:
        priv = X25519PrivateKey.from_private_bytes(mine_private)
        peer = X25519PublicKey.from_public_bytes(peer_public)
        shared = priv.exchange(peer)
    except ValueError as exc:
        raise CryptoError(f"key agreement failed: {exc}") from exc
    mine_public = priv.public_key().public_bytes_raw()
    lo, hi = sorted((mine_public, peer_public))
    return SessionKey(key=hash_bytes(b"meterfaas-session|" + shared + lo + hi))


def aead_seal(key: SessionKey, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise CryptoError(f"nonce must be {NONCE_SIZE} bytes")
    return AESGCM(key.key).encrypt(nonce, plaintext, aad)


def aead_open(key: SessionKey, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise CryptoError(f"nonce must be {NONCE_SIZE} bytes")
    try:
        return AESGCM(key.key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise TamperError("AEAD authentication failed") from exc
