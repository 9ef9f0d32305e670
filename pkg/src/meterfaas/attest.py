"""Simulated attestation root and transitive verification.

One signing authority per deployment stands in for the hardware attestation
service. Quotes bind an enclave identity to caller-chosen user data; the
transitive check lets clients trust workers while verifying only the key
distribution enclave's quote.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto
from .crypto import DIGEST_SIZE, SIGNATURE_SIZE, DeterministicRng, SigningKeyPair
from .wire import Reader, Writer

QUOTE_DOMAIN = b"meterfaas/quote/v1|"
REPORT_DOMAIN = b"meterfaas/report/v1|"


class AttestationError(Exception):
    """Verification rejection; `reason` is a stable machine-readable code."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class EnclaveIdentity:
    """Code identity, signer identity, and optional damage-containment tag.

    `parametrization` is folded into the code identity at derivation time, so
    two enclaves with different parametrization have different mrenclave.
    """

    mrenclave: bytes
    mrsigner: bytes
    parametrization: bytes | None = None

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.mrenclave, DIGEST_SIZE)
        w.fixed(self.mrsigner, DIGEST_SIZE)
        w.opt_fixed(self.parametrization, DIGEST_SIZE)
        return w.done()

    @classmethod
    def read(cls, r: Reader) -> "EnclaveIdentity":
        return cls(
            mrenclave=r.fixed(DIGEST_SIZE),
            mrsigner=r.fixed(DIGEST_SIZE),
            parametrization=r.opt_fixed(DIGEST_SIZE),
        )

    @classmethod
    def decode(cls, data: bytes) -> "EnclaveIdentity":
        r = Reader(data)
        out = cls.read(r)
        r.finish()
        return out


def derive_identity(
    code: bytes, signer: bytes, parametrization: bytes | None = None
) -> EnclaveIdentity:
    """Build an identity the way hardware would measure it: a hash of the code
    image, with any parametrization mixed into the measurement."""
    payload = b"meterfaas-mrenclave|" + code
    if parametrization is not None:
        payload += b"|param|" + parametrization
    return EnclaveIdentity(
        mrenclave=crypto.hash_bytes(payload),
        mrsigner=crypto.hash_bytes(b"meterfaas-mrsigner|" + signer),
        parametrization=parametrization,
    )


@dataclass(frozen=True)
class QuoteUserData:
    """The four items a key-publishing quote must bind, in fixed order."""

    kka_pub_hash: bytes
    kout_pub_hash: bytes
    kres_pub_hash: bytes
    worker_identity: bytes

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.kka_pub_hash, DIGEST_SIZE)
        w.fixed(self.kout_pub_hash, DIGEST_SIZE)
        w.fixed(self.kres_pub_hash, DIGEST_SIZE)
        w.fixed(self.worker_identity, DIGEST_SIZE)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "QuoteUserData":
        r = Reader(data)
        out = cls(
            kka_pub_hash=r.fixed(DIGEST_SIZE),
            kout_pub_hash=r.fixed(DIGEST_SIZE),
            kres_pub_hash=r.fixed(DIGEST_SIZE),
            worker_identity=r.fixed(DIGEST_SIZE),
        )
        r.finish()
        return out


@dataclass(frozen=True)
class Quote:
    identity: EnclaveIdentity
    user_data: bytes
    ias_signature: bytes

    def signed_payload(self) -> bytes:
        w = Writer()
        w.var(self.identity.encode())
        w.var(self.user_data)
        return QUOTE_DOMAIN + w.done()

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.identity.encode())
        w.var(self.user_data)
        w.fixed(self.ias_signature, SIGNATURE_SIZE)
        return w.done()

    @classmethod
    def read(cls, r: Reader) -> "Quote":
        return cls(
            identity=EnclaveIdentity.decode(r.var()),
            user_data=r.var(),
            ias_signature=r.fixed(SIGNATURE_SIZE),
        )

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        r = Reader(data)
        out = cls.read(r)
        r.finish()
        return out


@dataclass(frozen=True)
class WorkerReport:
    """Local attestation of a worker requesting keys: identity plus the
    ephemeral transport key the key set should be wrapped to."""

    identity: EnclaveIdentity
    transport_public: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        w = Writer()
        w.var(self.identity.encode())
        w.fixed(self.transport_public, crypto.KEY_SIZE)
        return REPORT_DOMAIN + w.done()

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.identity.encode())
        w.fixed(self.transport_public, crypto.KEY_SIZE)
        w.fixed(self.signature, SIGNATURE_SIZE)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "WorkerReport":
        r = Reader(data)
        out = cls(
            identity=EnclaveIdentity.decode(r.var()),
            transport_public=r.fixed(crypto.KEY_SIZE),
            signature=r.fixed(SIGNATURE_SIZE),
        )
        r.finish()
        return out


class AttestationRoot:
    """Per-deployment signing authority; its public key is distributed
    out-of-band, mirroring trust in the attestation service's certificate."""

    def __init__(self, seed: int | bytes) -> None:
        self._keypair = SigningKeyPair.generate(DeterministicRng(seed, "attestation-root"))

    @property
    def public_key(self) -> bytes:
        return self._keypair.public

    def issue_quote(self, identity: EnclaveIdentity, user_data: bytes) -> Quote:
        unsigned = Quote(identity=identity, user_data=user_data, ias_signature=b"\x00" * SIGNATURE_SIZE)
        sig = crypto.sign(self._keypair.private, unsigned.signed_payload())
        return Quote(identity=identity, user_data=user_data, ias_signature=sig)

    def attest_worker(self, identity: EnclaveIdentity, transport_public: bytes) -> WorkerReport:
        unsigned = WorkerReport(identity, transport_public, b"\x00" * SIGNATURE_SIZE)
        sig = crypto.sign(self._keypair.private, unsigned.signed_payload())
        return WorkerReport(identity, transport_public, sig)


def ias_verify(root_public: bytes, quote: Quote) -> tuple[EnclaveIdentity, bytes]:
    """Return the authenticated (identity, user_data) or raise AttestationError."""
    if not crypto.verify(root_public, quote.signed_payload(), quote.ias_signature):
        raise AttestationError("quote-signature", "quote not signed by the configured root")
    return quote.identity, quote.user_data


def verify_report(root_public: bytes, report: WorkerReport) -> EnclaveIdentity:
    if not crypto.verify(root_public, report.signed_payload(), report.signature):
        raise AttestationError("attestation", "worker report signature invalid")
    return report.identity


def verify_transitive(
    root_public: bytes,
    quote: Quote,
    expected_kde: bytes,
    kka_pub: bytes,
    kout_pub: bytes,
    kres_pub: bytes,
    expected_worker: bytes,
) -> QuoteUserData:
    """The relying party's entire trust decision.

    Accepts iff the quote verifies under the root, names the expected KDE
    identity, binds hashes of exactly the published public keys, and names the
    expected worker identity. No per-worker attestation happens anywhere.
    """
    identity, user_data = ias_verify(root_public, quote)
    if identity.mrenclave != expected_kde:
        raise AttestationError("kde-identity", "quote from unexpected KDE identity")
    try:
        bound = QuoteUserData.decode(user_data)
    except Exception as exc:
        raise AttestationError("user-data-format", str(exc)) from exc
    if bound.kka_pub_hash != crypto.hash_bytes(kka_pub):
        raise AttestationError("key-hash", "key agreement public key not bound by quote")
    if bound.kout_pub_hash != crypto.hash_bytes(kout_pub):
        raise AttestationError("key-hash", "output signing public key not bound by quote")
    if bound.kres_pub_hash != crypto.hash_bytes(kres_pub):
        raise AttestationError("key-hash", "measurement signing public key not bound by quote")
    if bound.worker_identity != expected_worker:
        raise AttestationError("worker-identity", "quote gates keys to a different worker identity")
    return bound
