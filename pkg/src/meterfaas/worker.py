"""Worker enclave lifecycle: key acquisition, provisioning, metered invocation.

The four entry points mirror the enclave call surface: ``ecall_setup`` obtains
or unseals a key set, ``ecall_init`` loads a function into the sandbox,
``ecall_run`` opens an encrypted request and executes the function under
metering, and ``ecall_finish`` seals the response and signs the measurement.

Request and response bodies are the repo's wire protocol:

  request plaintext  = input | function_hash | receipt_flag | want_measurement
                       | nonce(16) | optional token
  response plaintext = status | payload | nonce(16) | optional measurement
                       | optional receipt

both AEAD-sealed under the session key derived from the key-agreement pair and
the client's public key. A request that fails authentication never executes
and never produces a measurement; a request that decrypts but names the wrong
function aborts before the first sandbox instruction, with the measurement
reporting zero consumption.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto
from .attest import AttestationRoot, EnclaveIdentity
from .crypto import DIGEST_SIZE, KEY_SIZE, NONCE_SIZE, AgreementKeyPair, DeterministicRng
from .kde import (
    KeyDistributionEnclave,
    KeySet,
    SealedBlob,
    encode_private_keyset,
    decode_private_keyset,
    open_keyset_payload,
    seal,
    unseal,
)
from .kernel import ScheduleEvent, SimTrace
from .metering import (
    MeterConfig,
    MeteredOutcome,
    SignedMeasurement,
    build_signed_measurement,
    run_metered,
)
from .vm import CostTable, FunctionImage, VMLimits, vm_load
from .wire import Reader, Writer

RECEIPT_DOMAIN = b"meterfaas/receipt/v1|"
REQUEST_AAD = b"meterfaas/request/v1|"
RESPONSE_AAD = b"meterfaas/response/v1|"
CLIENT_NONCE_SIZE = 16

STATUS_OK = 0
STATUS_FUNCTION_FAILED = 1
STATUS_WRONG_FUNCTION = 2


class WorkerError(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class RequestPlain:
    input: bytes
    function_hash: bytes
    receipt_flag: bool
    want_measurement: bool
    nonce: bytes
    token: bytes | None = None

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.input)
        w.fixed(self.function_hash, DIGEST_SIZE)
        w.u8(1 if self.receipt_flag else 0)
        w.u8(1 if self.want_measurement else 0)
        w.fixed(self.nonce, CLIENT_NONCE_SIZE)
        w.opt_var(self.token)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "RequestPlain":
        r = Reader(data)
        out = cls(
            input=r.var(),
            function_hash=r.fixed(DIGEST_SIZE),
            receipt_flag=r.u8() == 1,
            want_measurement=r.u8() == 1,
            nonce=r.fixed(CLIENT_NONCE_SIZE),
            token=r.opt_var(),
        )
        r.finish()
        return out


@dataclass(frozen=True)
class EncryptedRequest:
    client_pub: bytes
    aead_nonce: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.client_pub, KEY_SIZE)
        w.fixed(self.aead_nonce, NONCE_SIZE)
        w.var(self.ciphertext)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "EncryptedRequest":
        r = Reader(data)
        out = cls(
            client_pub=r.fixed(KEY_SIZE),
            aead_nonce=r.fixed(NONCE_SIZE),
            ciphertext=r.var(),
        )
        r.finish()
        return out


@dataclass(frozen=True)
class Receipt:
    """Signature under the output key binding digests of (input, function,
    output), optionally the measurement report."""

    h_input: bytes
    h_function: bytes
    h_output: bytes
    h_measurement: bytes | None
    keyset_id: bytes
    signature: bytes

    def body(self) -> bytes:
        w = Writer()
        w.fixed(self.h_input, DIGEST_SIZE)
        w.fixed(self.h_function, DIGEST_SIZE)
        w.fixed(self.h_output, DIGEST_SIZE)
        w.opt_fixed(self.h_measurement, DIGEST_SIZE)
        w.fixed(self.keyset_id, DIGEST_SIZE)
        return w.done()

    def signed_payload(self) -> bytes:
        return RECEIPT_DOMAIN + self.body()

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.body())
        w.fixed(self.signature, crypto.SIGNATURE_SIZE)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "Receipt":
        r = Reader(data)
        body = Reader(r.var())
        sig = r.fixed(crypto.SIGNATURE_SIZE)
        r.finish()
        out = cls(
            h_input=body.fixed(DIGEST_SIZE),
            h_function=body.fixed(DIGEST_SIZE),
            h_output=body.fixed(DIGEST_SIZE),
            h_measurement=body.opt_fixed(DIGEST_SIZE),
            keyset_id=body.fixed(DIGEST_SIZE),
            signature=sig,
        )
        body.finish()
        return out


def build_receipt(
    input_data: bytes,
    function_hash: bytes,
    output: bytes,
    measurement: SignedMeasurement | None,
    keyset_id: bytes,
    k_out_private: bytes,
) -> Receipt:
    unsigned = Receipt(
        h_input=crypto.hash_bytes(input_data),
        h_function=function_hash,
        h_output=crypto.hash_bytes(output),
        h_measurement=measurement.digest() if measurement is not None else None,
        keyset_id=keyset_id,
        signature=b"\x00" * crypto.SIGNATURE_SIZE,
    )
    sig = crypto.sign(k_out_private, unsigned.signed_payload())
    return Receipt(**{**unsigned.__dict__, "signature": sig})


def verify_receipt(
    receipt: Receipt,
    k_out_public: bytes,
    input_data: bytes,
    function_hash: bytes,
    output: bytes,
    measurement: SignedMeasurement | None = None,
) -> tuple[bool, str]:
    """Recompute the digests from the verifier's own copies and check the
    signature. Returns (accepted, reason)."""
    if not crypto.verify(k_out_public, receipt.signed_payload(), receipt.signature):
        return False, "signature"
    if receipt.h_input != crypto.hash_bytes(input_data):
        return False, "input-digest"
    if receipt.h_function != function_hash:
        return False, "function-digest"
    if receipt.h_output != crypto.hash_bytes(output):
        return False, "output-digest"
    if measurement is not None and receipt.h_measurement != measurement.digest():
        return False, "measurement-digest"
    return True, "ok"


@dataclass(frozen=True)
class ResponsePlain:
    status: int
    payload: bytes  # function output, or an error marker string
    nonce: bytes
    measurement: SignedMeasurement | None = None
    receipt: Receipt | None = None

    def encode(self) -> bytes:
        w = Writer()
        w.u8(self.status)
        w.var(self.payload)
        w.fixed(self.nonce, CLIENT_NONCE_SIZE)
        w.opt_var(self.measurement.encode() if self.measurement else None)
        w.opt_var(self.receipt.encode() if self.receipt else None)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "ResponsePlain":
        r = Reader(data)
        status = r.u8()
        payload = r.var()
        nonce = r.fixed(CLIENT_NONCE_SIZE)
        meas = r.opt_var()
        receipt = r.opt_var()
        r.finish()
        return cls(
            status=status,
            payload=payload,
            nonce=nonce,
            measurement=SignedMeasurement.decode(meas) if meas is not None else None,
            receipt=Receipt.decode(receipt) if receipt is not None else None,
        )


@dataclass(frozen=True)
class EncryptedResponse:
    aead_nonce: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        w = Writer()
        w.fixed(self.aead_nonce, NONCE_SIZE)
        w.var(self.ciphertext)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "EncryptedResponse":
        r = Reader(data)
        out = cls(aead_nonce=r.fixed(NONCE_SIZE), ciphertext=r.var())
        r.finish()
        return out


@dataclass
class _Pending:
    session: crypto.SessionKey
    request: RequestPlain
    outcome: MeteredOutcome | None
    status: int
    payload: bytes
    tag: bytes


class WorkerEnclave:
    """One simulated worker enclave instance on one platform."""

    def __init__(
        self,
        identity: EnclaveIdentity,
        platform_id: bytes,
        root: AttestationRoot,
        meter_cfg: MeterConfig,
        limits: VMLimits | None = None,
        costs: CostTable | None = None,
        seed: int | bytes = 0,
    ) -> None:
        self.identity = identity
        self.platform_id = platform_id
        self.root = root
        self.meter_cfg = meter_cfg
        self.limits = limits or VMLimits()
        self.costs = costs or CostTable()
        self._rng = DeterministicRng(seed, "worker")
        self._setup_count = 0
        self._finish_count = 0
        self.keyset: KeySet | None = None
        self.image: FunctionImage | None = None
        self.pending: _Pending | None = None
        self.last_trace: SimTrace | None = None
        self.last_vm_steps = 0

    # --- setup -------------------------------------------------------------

    def ecall_setup(
        self,
        kde: KeyDistributionEnclave,
        sealed: SealedBlob | None = None,
        expected_keyset_id: bytes | None = None,
    ) -> SealedBlob:
        """Unseal a previously received key set or fetch a fresh one from the
        KDE, resealing it to this enclave's identity and platform. Runs before
        any function is provisioned; never metered."""
        self._setup_count += 1
        if sealed is not None:
            try:
                keyset = decode_private_keyset(unseal(sealed, self.identity, self.platform_id))
                if expected_keyset_id is None or keyset.keyset_id == expected_keyset_id:
                    self.keyset = keyset
                    return sealed
            except crypto.TamperError:
                pass  # blob from another identity or platform: fetch instead
        transport = AgreementKeyPair.generate(self._rng.child(f"transport{self._setup_count}"))
        report = self.root.attest_worker(self.identity, transport.public)
        try:
            payload = kde.distribute(report)
        except Exception as exc:
            raise WorkerError("setup", f"KDE refused key set: {exc}") from exc
        self.keyset = open_keyset_payload(payload, transport.private)
        return seal(
            encode_private_keyset(self.keyset),
            self.identity,
            self.platform_id,
            self._rng.child(f"seal{self._setup_count}"),
        )

    # --- provisioning ------------------------------------------------------

    def ecall_init(self, function_bytes: bytes) -> None:
        if self.keyset is None:
            raise WorkerError("lifecycle", "setup required before init")
        self.image = vm_load(function_bytes)  # LoadError propagates

    # --- invocation ----------------------------------------------------------

    def ecall_run(self, request: EncryptedRequest, schedule: list[ScheduleEvent] | tuple = ()) -> int:
        """Open the request, check the function binding, and execute under
        metering. Returns the output size so the host can size its buffers."""
        if self.keyset is None or self.image is None:
            raise WorkerError("lifecycle", "setup and init must precede run")
        if self.pending is not None:
            raise WorkerError("lifecycle", "previous invocation not finished")
        session = crypto.derive_session_key(self.keyset.k_ka.private, request.client_pub)
        # a tampered or mis-keyed request never executes and is never billable
        plain = crypto.aead_open(
            session, request.aead_nonce, request.ciphertext, REQUEST_AAD + request.client_pub
        )
        req = RequestPlain.decode(plain)
        tag = crypto.hash_bytes(req.token if req.token is not None else b"")

        if req.function_hash != self.image.function_hash:
            # abort before any sandbox instruction runs
            self.last_trace = None
            self.last_vm_steps = 0
            self.pending = _Pending(
                session=session, request=req, outcome=None,
                status=STATUS_WRONG_FUNCTION, payload=b"wrong-function", tag=tag,
            )
            return 0

        outcome = run_metered(
            self.image, req.input, self.limits, self.meter_cfg,
            schedule=list(schedule), costs=self.costs, default_tag=tag,
        )
        self.last_trace = outcome.trace
        self.last_vm_steps = outcome.vm_steps
        if outcome.vm_result.ok:
            status, payload = STATUS_OK, outcome.vm_result.output
        else:
            status, payload = STATUS_FUNCTION_FAILED, (outcome.vm_result.reason or "trap").encode()
        self.pending = _Pending(
            session=session, request=req, outcome=outcome,
            status=status, payload=payload, tag=outcome.vm_result.tag,
        )
        return len(payload)

    def ecall_finish(self) -> tuple[EncryptedResponse, SignedMeasurement]:
        """Seal the response for the client and sign the resource report.

        A measurement is produced for every run that decrypted successfully,
        including traps and wrong-function aborts (resources were consumed, or
        the provider needs the attributable zero-report); a receipt only for
        clean runs that asked for one.
        """
        if self.pending is None:
            raise WorkerError("lifecycle", "no run to finish")
        if self.keyset is None:  # pragma: no cover - run requires a keyset
            raise WorkerError("lifecycle", "no key set")
        p = self.pending
        measurement = self._sign_measurement(p)
        receipt = None
        if p.request.receipt_flag and p.status == STATUS_OK:
            receipt = build_receipt(
                input_data=p.request.input,
                function_hash=p.request.function_hash,
                output=p.payload,
                measurement=measurement if p.request.want_measurement else None,
                keyset_id=self.keyset.keyset_id,
                k_out_private=self.keyset.k_out.private,
            )
        plain = ResponsePlain(
            status=p.status,
            payload=p.payload,
            nonce=p.request.nonce,
            measurement=measurement if p.request.want_measurement else None,
            receipt=receipt,
        )
        self._finish_count += 1
        nonce = self._rng.child(f"resp{self._finish_count}").bytes(NONCE_SIZE)
        ciphertext = crypto.aead_seal(p.session, nonce, plain.encode(), RESPONSE_AAD)
        self.pending = None
        return EncryptedResponse(aead_nonce=nonce, ciphertext=ciphertext), measurement

    def _sign_measurement(self, p: _Pending) -> SignedMeasurement:
        if p.outcome is not None:
            return build_signed_measurement(
                p.outcome, tag=p.tag, keyset_id=self.keyset.keyset_id,
                k_res_private=self.keyset.k_res.private,
            )
        zero = SignedMeasurement(
            t_max=0, tau=self.meter_cfg.tau, m_int=0, m_max=0, m_avg=0, net=0,
            tag=p.tag, keyset_id=self.keyset.keyset_id,
            signature=b"\x00" * crypto.SIGNATURE_SIZE,
        )
        sig = crypto.sign(self.keyset.k_res.private, zero.signed_payload())
        return SignedMeasurement(**{**zero.__dict__, "signature": sig})
