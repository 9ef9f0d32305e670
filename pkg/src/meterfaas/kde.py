"""Key Distribution Enclave: key-set generation, quoting, gated release, sealing.

The KDE pre-generates key sets (agreement, output-signing, measurement-signing
pairs), quotes their public halves together with the worker identity allowed to
receive the private halves, and releases those private halves only to reports
attesting exactly that identity. Sealing binds data to (identity, platform).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto
from .attest import (
    AttestationError,
    AttestationRoot,
    EnclaveIdentity,
    Quote,
    QuoteUserData,
    WorkerReport,
    verify_report,
)
from .crypto import (
    DIGEST_SIZE,
    KEY_SIZE,
    NONCE_SIZE,
    AgreementKeyPair,
    DeterministicRng,
    SessionKey,
    SigningKeyPair,
)
from .wire import Reader, Writer


class KdeError(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class KeySet:
    """The three asymmetric pairs plus bookkeeping. Private halves live only
    here and inside AEAD ciphertext; nothing published ever embeds them."""

    k_ka: AgreementKeyPair
    k_out: SigningKeyPair
    k_res: SigningKeyPair
    keyset_id: bytes
    created_at: int

    @staticmethod
    def compute_id(kka_pub: bytes, kout_pub: bytes, kres_pub: bytes) -> bytes:
        w = Writer()
        w.fixed(kka_pub, KEY_SIZE)
        w.fixed(kout_pub, KEY_SIZE)
        w.fixed(kres_pub, KEY_SIZE)
        return crypto.hash_bytes(w.done())


@dataclass(frozen=True)
class PublishedKeys:
    """What clients and the function provider receive: public halves, epoch,
    and the quote binding them to the worker identity."""

    k_ka_pub: bytes
    k_out_pub: bytes
    k_res_pub: bytes
    created_at: int
    quote: Quote

    @property
    def keyset_id(self) -> bytes:
        return KeySet.compute_id(self.k_ka_pub, self.k_out_pub, self.k_res_pub)

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.k_ka_pub, KEY_SIZE)
        w.fixed(self.k_out_pub, KEY_SIZE)
        w.fixed(self.k_res_pub, KEY_SIZE)
        w.u64(self.created_at)
        w.var(self.quote.encode())
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "PublishedKeys":
        r = Reader(data)
        out = cls(
            k_ka_pub=r.fixed(KEY_SIZE),
            k_out_pub=r.fixed(KEY_SIZE),
            k_res_pub=r.fixed(KEY_SIZE),
            created_at=r.u64(),
            quote=Quote.decode(r.var()),
        )
        r.finish()
        return out


@dataclass(frozen=True)
class KeySetPayload:
    """Private halves in transit from KDE to a worker, AEAD-sealed to a session
    key derived with the worker's ephemeral transport key."""

    kde_transport_public: bytes
    nonce: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.kde_transport_public, KEY_SIZE)
        w.fixed(self.nonce, NONCE_SIZE)
        w.var(self.ciphertext)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "KeySetPayload":
        r = Reader(data)
        out = cls(
            kde_transport_public=r.fixed(KEY_SIZE),
            nonce=r.fixed(NONCE_SIZE),
            ciphertext=r.var(),
        )
        r.finish()
        return out


def encode_private_keyset(keyset: KeySet) -> bytes:
    w = Writer()
    w.fixed(keyset.k_ka.private, KEY_SIZE)
    w.fixed(keyset.k_out.private, KEY_SIZE)
    w.fixed(keyset.k_res.private, KEY_SIZE)
    w.fixed(keyset.keyset_id, DIGEST_SIZE)
    w.u64(keyset.created_at)
    return w.done()


def decode_private_keyset(data: bytes) -> KeySet:
    r = Reader(data)
    kka_priv = r.fixed(KEY_SIZE)
    kout_priv = r.fixed(KEY_SIZE)
    kres_priv = r.fixed(KEY_SIZE)
    keyset_id = r.fixed(DIGEST_SIZE)
    created_at = r.u64()
    r.finish()
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

    k_ka = AgreementKeyPair(
        private=kka_priv,
        public=X25519PrivateKey.from_private_bytes(kka_priv).public_key().public_bytes_raw(),
    )
    k_out = SigningKeyPair(
        private=kout_priv,
        public=Ed25519PrivateKey.from_private_bytes(kout_priv).public_key().public_bytes_raw(),
    )
    k_res = SigningKeyPair(
        private=kres_priv,
        public=Ed25519PrivateKey.from_private_bytes(kres_priv).public_key().public_bytes_raw(),
    )
    return KeySet(k_ka=k_ka, k_out=k_out, k_res=k_res, keyset_id=keyset_id, created_at=created_at)


@dataclass(frozen=True)
class SealedBlob:
    """Data sealed against an enclave identity on a specific platform."""

    bound_identity: EnclaveIdentity
    platform_id: bytes
    nonce: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.bound_identity.encode())
        w.var(self.platform_id)
        w.fixed(self.nonce, NONCE_SIZE)
        w.var(self.ciphertext)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "SealedBlob":
        r = Reader(data)
        out = cls(
            bound_identity=EnclaveIdentity.decode(r.var()),
            platform_id=r.var(),
            nonce=r.fixed(NONCE_SIZE),
            ciphertext=r.var(),
        )
        r.finish()
        return out


def _sealing_key(identity: EnclaveIdentity, platform_id: bytes) -> SessionKey:
    # Stand-in for the per-platform hardware sealing key: anything holding the
    # same (identity, platform) derives the same key, nothing else does.
    return SessionKey(key=crypto.hash_bytes(b"meterfaas-seal|" + identity.encode() + b"|" + platform_id))


def seal(data: bytes, identity: EnclaveIdentity, platform_id: bytes, rng: DeterministicRng) -> SealedBlob:
    nonce = rng.bytes(NONCE_SIZE)
    ct = crypto.aead_seal(_sealing_key(identity, platform_id), nonce, data, aad=b"seal")
    return SealedBlob(bound_identity=identity, platform_id=platform_id, nonce=nonce, ciphertext=ct)


def unseal(blob: SealedBlob, identity: EnclaveIdentity, platform_id: bytes) -> bytes:
    """Round-trips only when identity and platform both match; any mismatch is
    indistinguishable from ciphertext tampering."""
    return crypto.aead_open(_sealing_key(identity, platform_id), blob.nonce, blob.ciphertext, aad=b"seal")


class KeyDistributionEnclave:
    """Single logical actor holding the current key set and retired history.

    Retired key sets stay verifiable (signatures from before a rotation must
    keep checking out) but are never redistributed to workers.
    """

    def __init__(
        self,
        root: AttestationRoot,
        identity: EnclaveIdentity,
        seed: int | bytes,
        worker_identity: bytes,
        max_workers_per_keyset: int | None = None,
    ) -> None:
        self.root = root
        self.identity = identity
        self.worker_identity = worker_identity
        self.max_workers_per_keyset = max_workers_per_keyset
        self._rng = DeterministicRng(seed, "kde")
        self._distributions = 0
        self.retired: list[PublishedKeys] = []
        self.keyset, self.published = self._generate(created_at=0)

    def _generate(self, created_at: int) -> tuple[KeySet, PublishedKeys]:
        rng = self._rng.child(f"keyset-{created_at}")
        k_ka = AgreementKeyPair.generate(rng.child("ka"))
        k_out = SigningKeyPair.generate(rng.child("out"))
        k_res = SigningKeyPair.generate(rng.child("res"))
        keyset = KeySet(
            k_ka=k_ka,
            k_out=k_out,
            k_res=k_res,
            keyset_id=KeySet.compute_id(k_ka.public, k_out.public, k_res.public),
            created_at=created_at,
        )
        user_data = QuoteUserData(
            kka_pub_hash=crypto.hash_bytes(k_ka.public),
            kout_pub_hash=crypto.hash_bytes(k_out.public),
            kres_pub_hash=crypto.hash_bytes(k_res.public),
            worker_identity=self.worker_identity,
        ).encode()
        quote = self.root.issue_quote(self.identity, user_data)
        published = PublishedKeys(
            k_ka_pub=k_ka.public,
            k_out_pub=k_out.public,
            k_res_pub=k_res.public,
            created_at=created_at,
            quote=quote,
        )
        return keyset, published

    def rotate(self) -> PublishedKeys:
        """Retire the current set and mint a fresh one at the next epoch."""
        self.retired.append(self.published)
        self._distributions = 0
        self.keyset, self.published = self._generate(created_at=self.keyset.created_at + 1)
        return self.published

    def distribute(self, report: WorkerReport) -> KeySetPayload:
        """Release the current private keys to a matching, attested worker.

        On any rejection no key material leaves the KDE.
        """
        try:
            identity = verify_report(self.root.public_key, report)
        except AttestationError as exc:
            raise KdeError("attestation", str(exc)) from exc
        if identity.mrenclave != self.worker_identity:
            raise KdeError("identity", "report names an unexpected worker identity")
        if self.max_workers_per_keyset is not None and self._distributions >= self.max_workers_per_keyset:
            raise KdeError("policy", "key set already distributed to the configured maximum")
        self._distributions += 1
        eph = AgreementKeyPair.generate(self._rng.child(f"transport-{self.keyset.created_at}-{self._distributions}"))
        session = crypto.derive_session_key(eph.private, report.transport_public)
        nonce = self._rng.bytes(NONCE_SIZE)
        ct = crypto.aead_seal(session, nonce, encode_private_keyset(self.keyset), aad=eph.public)
        return KeySetPayload(kde_transport_public=eph.public, nonce=nonce, ciphertext=ct)


def open_keyset_payload(payload: KeySetPayload, transport_private: bytes) -> KeySet:
    session = crypto.derive_session_key(transport_private, payload.kde_transport_public)
    plain = crypto.aead_open(session, payload.nonce, payload.ciphertext, aad=payload.kde_transport_public)
    return decode_private_keyset(plain)
