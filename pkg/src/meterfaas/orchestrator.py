"""Lightweight FaaS layer: client protocol, worker pool, billing settlement.

Clients construct a context only after the transitive attestation of the
published keys succeeds, then seal requests under a session key and match
responses by nonce. The pool dispatches invocations to worker enclaves with
cold and warm starts, caches sealed key blobs per platform, refreshes rotated
key sets, and appends every signed measurement to the provider's log. Billing
converts verified reports into an invoice with exact rational arithmetic, so
settlement is reproducible bit for bit from the reports and the policy alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import crypto
from .attest import verify_transitive
from .crypto import AgreementKeyPair, DeterministicRng
from .kde import KeyDistributionEnclave, PublishedKeys, SealedBlob
from .kernel import ScheduleEvent
from .metering import MeterConfig, SignedMeasurement, verify_measurement
from .vm import CostTable, VMLimits
from .worker import (
    CLIENT_NONCE_SIZE,
    REQUEST_AAD,
    RESPONSE_AAD,
    STATUS_OK,
    EncryptedRequest,
    EncryptedResponse,
    RequestPlain,
    ResponsePlain,
    WorkerEnclave,
    verify_receipt,
)

GIGA = 10**9


class ReplayError(Exception):
    """Response nonce does not match the outstanding request."""


class FunctionFailed(Exception):
    """The provider returned an error marker in lieu of the output."""

    def __init__(self, status: int, reason: str, measurement: SignedMeasurement | None) -> None:
        super().__init__(f"status {status}: {reason}")
        self.status = status
        self.reason = reason
        self.measurement = measurement


class VerificationError(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class PoolExhausted(Exception):
    pass


# --- client side --------------------------------------------------------------


@dataclass
class ClientContext:
    """Holds the client's agreement key and the verified published keys.

    Use :meth:`create`, which refuses to construct a context until the
    transitive attestation of the key set succeeds; there is no way to prepare
    a request against unverified keys.
    """

    k_c: AgreementKeyPair
    published: PublishedKeys
    expected_kde: bytes
    expected_worker: bytes
    _rng: DeterministicRng

    @classmethod
    def create(
        cls,
        root_public: bytes,
        published: PublishedKeys,
        expected_kde: bytes,
        expected_worker: bytes,
        seed: int | bytes = 0,
    ) -> "ClientContext":
        verify_transitive(
            root_public, published.quote, expected_kde,
            published.k_ka_pub, published.k_out_pub, published.k_res_pub,
            expected_worker,
        )
        rng = DeterministicRng(seed, "client")
        return cls(
            k_c=AgreementKeyPair.generate(rng.child("ka")),
            published=published,
            expected_kde=expected_kde,
            expected_worker=expected_worker,
            _rng=rng,
        )


@dataclass
class PendingInvocation:
    session: crypto.SessionKey
    nonce: bytes
    input: bytes
    function_hash: bytes
    receipt_flag: bool
    want_measurement: bool
    k_out_pub: bytes


@dataclass
class ClientResult:
    output: bytes
    measurement: SignedMeasurement | None
    receipt: object | None


def client_prepare(
    ctx: ClientContext,
    function_hash: bytes,
    input_data: bytes,
    receipt: bool = False,
    want_measurement: bool = False,
    token: bytes | None = None,
) -> tuple[EncryptedRequest, PendingInvocation]:
    """Seal a request under the session key and retain what is needed to
    match and check the response."""
    session = crypto.derive_session_key(ctx.k_c.private, ctx.published.k_ka_pub)
    nonce = ctx._rng.bytes(CLIENT_NONCE_SIZE)
    plain = RequestPlain(
        input=input_data,
        function_hash=function_hash,
        receipt_flag=receipt,
        want_measurement=want_measurement,
        nonce=nonce,
        token=token,
    )
    aead_nonce = ctx._rng.bytes(crypto.NONCE_SIZE)
    ciphertext = crypto.aead_seal(
        session, aead_nonce, plain.encode(), REQUEST_AAD + ctx.k_c.public
    )
    request = EncryptedRequest(client_pub=ctx.k_c.public, aead_nonce=aead_nonce, ciphertext=ciphertext)
    pending = PendingInvocation(
        session=session, nonce=nonce, input=input_data, function_hash=function_hash,
        receipt_flag=receipt, want_measurement=want_measurement,
        k_out_pub=ctx.published.k_out_pub,
    )
    return request, pending


def client_verify_response(pending: PendingInvocation, response: EncryptedResponse) -> ClientResult:
    """Open and validate a response: authentic, fresh (nonce match), and with
    receipt digests that recompute from the client's own input and output."""
    plain_bytes = crypto.aead_open(
        pending.session, response.aead_nonce, response.ciphertext, RESPONSE_AAD
    )
    plain = ResponsePlain.decode(plain_bytes)
    if plain.nonce != pending.nonce:
        raise ReplayError("response nonce does not match the request")
    if plain.status != STATUS_OK:
        raise FunctionFailed(plain.status, plain.payload.decode(errors="replace"), plain.measurement)
    if plain.receipt is not None:
        ok, reason = verify_receipt(
            plain.receipt,
            k_out_public=pending.k_out_pub,
            input_data=pending.input,
            function_hash=pending.function_hash,
            output=plain.payload,
            measurement=plain.measurement if pending.want_measurement else None,
        )
        if not ok:
            raise VerificationError("receipt", reason)
    return ClientResult(output=plain.payload, measurement=plain.measurement, receipt=plain.receipt)


# --- provider side ------------------------------------------------------------


def provider_verify_measurement(
    report: SignedMeasurement,
    published: PublishedKeys,
    expected_tags: set[bytes],
) -> None:
    """Accept iff the signature verifies under the published measurement key
    and the tag belongs to a known authorized invocation."""
    if not verify_measurement(report, published.k_res_pub):
        raise VerificationError("forgery", "signature does not verify under k_res")
    if report.tag not in expected_tags:
        raise VerificationError("spurious-invocation", "tag not bound to any authorized client")


class MeasurementLog:
    """Append-only provider store: one hex-encoded report per line."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def append(self, report: SignedMeasurement) -> None:
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(report.encode().hex() + "\n")

    def __iter__(self):
        if not self.path.exists():
            return
        with open(self.path, encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield SignedMeasurement.decode(bytes.fromhex(line))


# --- billing --------------------------------------------------------------------


def _rate(value) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


@dataclass(frozen=True)
class BillingPolicy:
    """Prices per metric plus the frequency assumption used to convert
    simulated cycles into seconds. GHz-seconds are dimensionally cycles/1e9,
    so the compute line is frequency independent; the memory line needs the
    frequency to turn tick-bytes into byte-seconds."""

    per_invocation: Fraction = Fraction(0)
    per_ghz_second: Fraction = Fraction(0)
    per_gb_second: Fraction = Fraction(0)
    per_gb_network: Fraction = Fraction(0)
    cpu_frequency_assumption: int = GIGA  # cycles per second

    def __post_init__(self) -> None:
        for name in ("per_invocation", "per_ghz_second", "per_gb_second", "per_gb_network"):
            object.__setattr__(self, name, _rate(getattr(self, name)))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cpu_frequency_assumption <= 0:
            raise ValueError("cpu_frequency_assumption must be positive")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "BillingPolicy":
        kw = {}
        for key in ("per_invocation", "per_ghz_second", "per_gb_second", "per_gb_network"):
            if key in mapping:
                kw[key] = _rate(mapping[key])
        if "cpu_frequency_assumption" in mapping:
            kw["cpu_frequency_assumption"] = int(mapping["cpu_frequency_assumption"])
        return cls(**kw)


@dataclass
class Invoice:
    """Settlement-ready artifact: recomputable from the referenced
    measurements and the policy alone."""

    invocations: int
    compute_seconds: Fraction
    ghz_seconds: Fraction
    gb_seconds: Fraction
    gb_network: Fraction
    charges: dict[str, Fraction]
    total: Fraction
    report_digests: list[bytes] = field(default_factory=list)

    def to_text(self) -> str:
        def row(name: str, quantity, charge: Fraction) -> str:
            return f"{name},{quantity},{charge},{float(charge):.12g}"

        lines = [
            "item,quantity,charge_exact,charge_approx",
            row("invocations", self.invocations, self.charges["invocations"]),
            row("compute_ghz_seconds", self.ghz_seconds, self.charges["compute"]),
            row("memory_gb_seconds", self.gb_seconds, self.charges["memory"]),
            row("network_gb", self.gb_network, self.charges["network"]),
            row("total", "", self.total),
        ]
        lines += [f"report,{d.hex()},," for d in self.report_digests]
        return "\n".join(lines) + "\n"


def compute_invoice(reports: list[SignedMeasurement], policy: BillingPolicy) -> Invoice:
    """Deterministic settlement over verified reports. Each report's own tau
    converts its ticks to cycles; all arithmetic is exact rationals."""
    freq = policy.cpu_frequency_assumption
    invocations = len(reports)
    compute_seconds = Fraction(0)
    ghz_seconds = Fraction(0)
    gb_seconds = Fraction(0)
    gb_network = Fraction(0)
    digests = []
    for r in reports:
        cycles = r.t_max * r.tau
        compute_seconds += Fraction(cycles, freq)
        ghz_seconds += Fraction(cycles, GIGA)
        gb_seconds += Fraction(r.m_int * r.tau, freq) / GIGA
        gb_network += Fraction(r.net, GIGA)
        digests.append(r.digest())
    charges = {
        "invocations": policy.per_invocation * invocations,
        "compute": policy.per_ghz_second * ghz_seconds,
        "memory": policy.per_gb_second * gb_seconds,
        "network": policy.per_gb_network * gb_network,
    }
    return Invoice(
        invocations=invocations,
        compute_seconds=compute_seconds,
        ghz_seconds=ghz_seconds,
        gb_seconds=gb_seconds,
        gb_network=gb_network,
        charges=charges,
        total=sum(charges.values(), Fraction(0)),
        report_digests=digests,
    )


# --- transport shim -------------------------------------------------------------


class DeliveryShim:
    """Pluggable adversarial delivery: drop, duplicate, and reorder messages.

    All payload guarantees live in the messages themselves; this exists so
    tests can exercise replay and loss without touching the protocol code.
    """

    def __init__(self, seed: int = 0, drop: float = 0.0, duplicate: float = 0.0, reorder: bool = False) -> None:
        self._rng = DeterministicRng(seed, "shim")
        self.drop = drop
        self.duplicate = duplicate
        self.reorder = reorder

    def deliver(self, messages: list) -> list:
        out = []
        for m in messages:
            if self._rng.randrange(1000) < int(self.drop * 1000):
                continue
            out.append(m)
            if self._rng.randrange(1000) < int(self.duplicate * 1000):
                out.append(m)
        if self.reorder and len(out) > 1:
            i = self._rng.randrange(len(out))
            j = self._rng.randrange(len(out))
            out[i], out[j] = out[j], out[i]
        return out


# --- worker pool -----------------------------------------------------------------


@dataclass
class DispatchResult:
    response: EncryptedResponse
    measurement: SignedMeasurement
    cold: bool
    worker_index: int


class _Slot:
    def __init__(self, worker: WorkerEnclave, index: int) -> None:
        self.worker = worker
        self.index = index
        self.image_hash: bytes | None = None
        self.busy = False


class WorkerPool:
    """Fixed pool of worker enclaves with cold/warm starts.

    A cold start runs setup + init before the invocation; a warm start reuses
    a worker already holding the function and a current key set. Sealed key
    blobs are cached per platform so later workers on the same platform skip
    the KDE round trip.
    """

    def __init__(
        self,
        kde: KeyDistributionEnclave,
        worker_identity,
        size: int,
        meter_cfg: MeterConfig,
        limits: VMLimits | None = None,
        costs: CostTable | None = None,
        seed: int = 0,
        measurement_log: MeasurementLog | None = None,
        platforms: list[bytes] | None = None,
        on_exhausted: str = "queue",
    ) -> None:
        if on_exhausted not in ("queue", "reject"):
            raise ValueError("on_exhausted must be 'queue' or 'reject'")
        self.kde = kde
        self.measurement_log = measurement_log
        self.collected: list[SignedMeasurement] = []
        self.on_exhausted = on_exhausted
        self._blob_cache: dict[bytes, SealedBlob] = {}
        self._slots = []
        for i in range(size):
            platform = platforms[i % len(platforms)] if platforms else f"platform-{i}".encode()
            worker = WorkerEnclave(
                identity=worker_identity,
                platform_id=platform,
                root=kde.root,
                meter_cfg=meter_cfg,
                limits=limits,
                costs=costs,
                seed=DeterministicRng(seed, f"pool-{i}").u64(),
            )
            self._slots.append(_Slot(worker, i))

    def _prepare_slot(self, slot: _Slot, function_bytes: bytes) -> bool:
        """Bring a slot to warm state for the function; True if a cold path ran."""
        cold = False
        current = self.kde.keyset.keyset_id
        worker = slot.worker
        if worker.keyset is None or worker.keyset.keyset_id != current:
            blob = self._blob_cache.get(worker.platform_id)
            blob = worker.ecall_setup(self.kde, blob, expected_keyset_id=current)
            self._blob_cache[worker.platform_id] = blob
            cold = True
        fn_hash = crypto.hash_bytes(function_bytes)
        if slot.image_hash != fn_hash:
            worker.ecall_init(function_bytes)
            slot.image_hash = fn_hash
            cold = True
        return cold

    def dispatch(
        self,
        request: EncryptedRequest,
        function_bytes: bytes,
        schedule: list[ScheduleEvent] | tuple = (),
    ) -> DispatchResult:
        fn_hash = crypto.hash_bytes(function_bytes)
        slot = next(
            (s for s in self._slots if not s.busy and s.image_hash == fn_hash
             and s.worker.keyset is not None),
            None,
        )
        if slot is None:
            slot = next((s for s in self._slots if not s.busy), None)
        if slot is None:
            if self.on_exhausted == "reject":
                raise PoolExhausted("no idle worker")
            slot = self._slots[0]  # queue behind the first worker
        slot.busy = True
        try:
            cold = self._prepare_slot(slot, function_bytes)
            slot.worker.ecall_run(request, schedule=schedule)
            response, measurement = slot.worker.ecall_finish()
        finally:
            slot.busy = False
        self.collected.append(measurement)
        if self.measurement_log is not None:
            self.measurement_log.append(measurement)
        return DispatchResult(response=response, measurement=measurement, cold=cold, worker_index=slot.index)

    def dispatch_concurrent(
        self, requests: list[EncryptedRequest], function_bytes: bytes
    ) -> list[DispatchResult]:
        """Serve a batch as concurrent invocations: each occupies its own
        worker instance for the invocation's duration."""
        results = []
        for request in requests:
            slot = next((s for s in self._slots if not s.busy), None)
            if slot is None:
                if self.on_exhausted == "reject":
                    raise PoolExhausted("pool smaller than batch")
                break
            slot.busy = True
            cold = self._prepare_slot(slot, function_bytes)
            slot.worker.ecall_run(request)
            results.append((slot, cold))
        out = []
        for slot, cold in results:
            response, measurement = slot.worker.ecall_finish()
            self.collected.append(measurement)
            if self.measurement_log is not None:
                self.measurement_log.append(measurement)
            out.append(DispatchResult(response, measurement, cold, slot.index))
            slot.busy = False
        overflow = requests[len(out):]
        for request in overflow:
            out.append(self.dispatch(request, function_bytes))
        return out
