"""Resource measurement: lower-bound compute timing, memory integral, network.

The timer runs as a second enclave thread and counts whole ticks of ``tau``
cycles, each inside a transaction watching the worker's SSA marker word. An
interrupt of the worker spills registers over the marker and aborts the tick;
an interrupt of the timer aborts it too. Partially completed ticks are never
counted, which is exactly why the reported time is a strict lower bound of the
worker's residency under any interrupt schedule.

Between transactions the timer mirrors its internal counter into ``t`` (kept
out of the transaction's write set so foreign reads of ``t`` cannot abort a
tick) and spends ``epsilon`` cycles on bookkeeping; shrinking tau therefore
raises the fraction of time lost to bookkeeping and increases under-reporting.

Memory is accounted by instrumented alloc/realloc/free with the update rule:
  dt = t_now - t_mem;  m_int += dt * m_cur;  m_cur += delta;  t_mem = t_now;
  m_max = max(m_max, m_cur)
plus one final integration step when the function terminates. Network bytes
accumulate at OCALL return.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import crypto
from .crypto import DIGEST_SIZE
from .kernel import (
    MARKER_VALUE,
    EresumeHandler,
    HostStall,
    Op,
    ReadCell,
    ScheduleEvent,
    SimKernel,
    SimTrace,
    TestAndSet,
    TxAbort,
    TxAborted,
    TxBegin,
    TxEnd,
    WaitUntil,
    WriteCell,
)
from .vm import CostTable, FunctionImage, NetIo, VMLimits, VMResult, VmHooks, execute_steps
from .wire import Reader, Writer

MEASUREMENT_DOMAIN = b"meterfaas/measurement/v1|"


class AccountingFault(Exception):
    """Memory bookkeeping violated: frees exceeding allocations, clock
    regression, or updates after finalization."""


@dataclass(frozen=True)
class TimerConfig:
    """tau is the tick length in cycles, fixed at enclave initialization;
    epsilon is the inter-transaction bookkeeping overhead."""

    tau: int
    epsilon: int = 30

    def __post_init__(self) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class MeterConfig:
    """Full metered-run configuration (timer knobs plus harness choices)."""

    tau: int
    epsilon: int = 30
    handler_cost: int = 7  # worker cycles spent inside the ERESUME detour
    net_delay: int = 0  # host-side service time per network OCALL
    gate_worker_on_timer: bool = True
    include_load_time: bool = False
    extra_timers: int = 0

    def __post_init__(self) -> None:
        TimerConfig(self.tau, self.epsilon)  # reuse validation

    @property
    def timer(self) -> TimerConfig:
        return TimerConfig(self.tau, self.epsilon)


class TimerState:
    """Enclave-wide timing cells shared by the worker and timer threads."""

    def __init__(self, kern: SimKernel) -> None:
        self.t = kern.cell("meter.t", 0, enclave=True)  # public mirror
        self.internal = kern.cell("meter.internal", 0, enclave=True)
        self.proc = kern.cell("meter.proc", 0, enclave=True)
        self.mutex = kern.cell("meter.timer_mutex", 0, enclave=True)
        self.ready = kern.cell("meter.timer_ready", 0, enclave=True)
        self.started = kern.cell("meter.run_started", 0, enclave=True)
        self.run_done = kern.cell("meter.run_done", 0, enclave=True)
        self.original_rip = kern.cell("meter.original_rip", None, enclave=True)


@dataclass
class MemState:
    m_int: int = 0
    m_max: int = 0
    m_cur: int = 0
    t_mem: int = 0
    finalized: bool = False
    events: list[tuple[int, int]] = field(default_factory=list)  # (tick, delta)


def mem_update(mem: MemState, delta_m: int, t_now: int) -> MemState:
    """The per-event memory accounting rule (see module docstring)."""
    if mem.finalized:
        raise AccountingFault("memory state already finalized")
    if mem.m_cur + delta_m < 0:
        raise AccountingFault(f"free of {-delta_m} exceeds live {mem.m_cur}")
    dt = t_now - mem.t_mem
    mem.m_int += dt * mem.m_cur
    mem.m_cur += delta_m
    mem.t_mem = t_now
    if mem.m_cur > mem.m_max:
        mem.m_max = mem.m_cur
    mem.events.append((t_now, delta_m))
    return mem


def mem_finalize(mem: MemState, t_final: int) -> tuple[int, int]:
    """Close the integral at function termination and freeze the state."""
    if mem.finalized:
        raise AccountingFault("memory state already finalized")
    if t_final < mem.t_mem:
        raise AccountingFault(f"clock regression: t_final {t_final} < t_mem {mem.t_mem}")
    mem.m_int += (t_final - mem.t_mem) * mem.m_cur
    mem.t_mem = t_final
    mem.finalized = True
    return mem.m_int, mem.m_max


@dataclass
class NetState:
    net: int = 0
    events: list[tuple[int, int]] = field(default_factory=list)


def net_add(net: NetState, sent: int, received: int) -> NetState:
    net.net += sent + received
    net.events.append((sent, received))
    return net


def ocall_pause(ts: TimerState):
    """Clear proc around an OCALL: the timer completes its current tick, then
    stops counting. Deliberately does not interrupt the timer, so functions
    cannot shave time off by spamming OCALLs."""
    yield WriteCell(ts.proc, 0)


def ocall_resume(ts: TimerState):
    yield WriteCell(ts.proc, 1)


def make_eresume_handler(worker_ssa, cost: int) -> EresumeHandler:
    """Worker-side detour run on ERESUME: restores the marker word (which also
    wakes the waiting timer) without disturbing any function state, then falls
    through to the interrupted instruction."""
    return EresumeHandler([WriteCell(worker_ssa.marker, MARKER_VALUE, cost=cost)])


def timer_program(cfg: MeterConfig, ts: TimerState, worker_ssa):
    """The timing thread. One timer counts at a time (enclave-wide mutex);
    ticks run inside transactions watching the worker's SSA marker."""
    handler = make_eresume_handler(worker_ssa, cfg.handler_cost)

    prior = yield TestAndSet(ts.mutex, cost=1)
    while prior != 0:
        yield WaitUntil((ts.mutex,), lambda: ts.mutex.value == 0)
        prior = yield TestAndSet(ts.mutex, cost=1)
    yield WriteCell(ts.ready, 1)
    yield WaitUntil((ts.started,), lambda: ts.started.value == 1)

    while True:
        proc = yield ReadCell(ts.proc)
        if proc != 1:
            done = yield ReadCell(ts.run_done)
            if done:
                break
            # OCALL pause: wait for the worker to come back, or for the end
            yield WaitUntil(
                (ts.proc, ts.run_done),
                lambda: ts.proc.value == 1 or ts.run_done.value == 1,
            )
            continue

        cause: str | None = None
        try:
            yield TxBegin((worker_ssa.marker,))
            marker = yield ReadCell(worker_ssa.marker)
            if marker != MARKER_VALUE:
                yield TxAbort("marker-missing")
            yield Op(cfg.tau, label="tick")
            count = yield ReadCell(ts.internal)
            yield WriteCell(ts.internal, count + 1)
            yield TxEnd()
        except TxAborted as abort:
            cause = abort.cause

        if cause is None:
            # mirror the private counter outside the write set, then pay for
            # the inter-transaction checks
            count = yield ReadCell(ts.internal)
            yield WriteCell(ts.t, count)
            if cfg.epsilon:
                yield Op(cfg.epsilon, label="checks")
            continue
        if cause in ("interrupt", "conflict"):
            # own interrupt, or the marker cell changed under us: just retry;
            # the marker check in the next transaction sorts out which it was
            continue

        # marker is gone: the worker was interrupted. Install the ERESUME
        # handler (re-installing if a later spill clobbered it) and wait for
        # the marker to come back.
        while True:
            marker = yield ReadCell(worker_ssa.marker)
            if marker == MARKER_VALUE:
                break
            proc = yield ReadCell(ts.proc)
            done = yield ReadCell(ts.run_done)
            if proc != 1 or done:
                break
            rip = yield ReadCell(worker_ssa.rip)
            if not isinstance(rip, EresumeHandler):
                yield WriteCell(ts.original_rip, rip, cost=1)
                yield WriteCell(worker_ssa.rip, handler, cost=1)
            yield WaitUntil(
                (worker_ssa.marker, worker_ssa.rip, ts.proc, ts.run_done),
                lambda: worker_ssa.marker.value == MARKER_VALUE
                or ts.proc.value != 1
                or ts.run_done.value == 1
                or not isinstance(worker_ssa.rip.value, EresumeHandler),
            )

    yield WriteCell(ts.mutex, 0)
    final = yield ReadCell(ts.internal)
    return final


def worker_program(
    cfg: MeterConfig,
    ts: TimerState,
    ssa,
    image: FunctionImage,
    input_data: bytes,
    limits: VMLimits,
    costs: CostTable,
    hooks: VmHooks,
    default_tag: bytes | None,
    marks: dict | None = None,
):
    """The worker thread: metering bracket around the sandboxed function.

    The bracket writes (marker, counter reset, proc) are zero-cost boundary
    effects, so the metered window coincides exactly with the function's
    resident cycles; all real overhead is carried by epsilon and the
    per-instruction costs.
    """
    if cfg.gate_worker_on_timer:
        yield WaitUntil((ts.ready,), lambda: ts.ready.value == 1)
    yield WriteCell(ssa.marker, MARKER_VALUE)
    yield WriteCell(ts.internal, 0)
    yield WriteCell(ts.t, 0)
    yield WriteCell(ts.proc, 1)
    yield WriteCell(ts.started, 1)
    if marks is not None:
        yield Op(0, effect=lambda: marks.__setitem__("window_start", marks["clock"]()))
    if cfg.include_load_time:
        yield Op(len(image.program), label="load")

    vm = execute_steps(image, input_data, limits, hooks, costs, default_tag)
    result: VMResult | None = None
    try:
        item = next(vm)
        while True:
            if isinstance(item, NetIo):
                yield Op(item.cost, label="vm")
                yield from ocall_pause(ts)
                if cfg.net_delay:
                    yield HostStall(cfg.net_delay)
                yield from ocall_resume(ts)
                # network bytes are accounted at OCALL return, not at pause
                yield Op(0, effect=lambda io=item: hooks.on_net(io.sent, io.received))
            else:
                yield Op(item, label="vm")
            item = vm.send(None)
    except StopIteration as stop:
        result = stop.value

    yield WriteCell(ts.proc, 0)
    if marks is not None:
        yield Op(0, effect=lambda: marks.__setitem__("window_end", marks["clock"]()))
    t_max = yield ReadCell(ts.t)
    yield WriteCell(ts.run_done, 1)
    return result, t_max


@dataclass
class MeteredOutcome:
    """Everything one metered invocation produced, plus its ground truth."""

    vm_result: VMResult
    t_max: int
    tau: int
    m_int: int
    m_max: int
    net: int
    mem: MemState
    net_state: NetState
    trace: SimTrace
    vm_steps: int
    window_start: int = 0
    window_end: int = 0
    cycle_events: list[tuple[int, int]] | None = None  # (absolute cycle, delta)

    @property
    def m_avg(self) -> int:
        return self.m_int // self.t_max if self.t_max > 0 else 0


def run_metered(
    image: FunctionImage,
    input_data: bytes,
    limits: VMLimits,
    cfg: MeterConfig,
    schedule: list[ScheduleEvent] | tuple = (),
    costs: CostTable | None = None,
    limit: int = 10_000_000,
    full_trace: bool = False,
    default_tag: bytes | None = None,
) -> MeteredOutcome:
    """Simulate one invocation: timer thread plus metered worker thread."""
    costs = costs or CostTable()
    kern = SimKernel()
    ts = TimerState(kern)
    # the timer registers first so its commits and mirror copies settle before
    # the worker's same-cycle reads (window-boundary exactness)
    timer = kern.add_enclave_actor("timer")
    worker = kern.add_enclave_actor("worker")
    extras = [kern.add_enclave_actor(f"timer{i + 2}") for i in range(cfg.extra_timers)]

    mem = MemState()
    net = NetState()
    cycle_events: list[tuple[int, int]] = []
    read_tick = lambda: ts.t.value  # noqa: E731 - the blessed unsynchronized mirror read

    def on_mem(delta: int) -> None:
        cycle_events.append((kern.now, delta))
        mem_update(mem, delta, read_tick())

    hooks = VmHooks(
        on_alloc=lambda n: on_mem(n),
        on_free=lambda n: on_mem(-n),
        on_net=lambda s, r: net_add(net, s, r),
        read_tick=read_tick,
    )
    marks: dict = {"clock": lambda: kern.now, "window_start": 0, "window_end": 0}

    timer.set_program(timer_program(cfg, ts, worker.ssa))
    worker.set_program(
        worker_program(
            cfg, ts, worker.ssa, image, input_data, limits, costs, hooks, default_tag, marks
        )
    )
    for extra in extras:
        extra.set_program(timer_program(cfg, ts, worker.ssa))

    trace = kern.run(list(schedule), limit, full_trace=full_trace)
    if not trace.complete:
        raise RuntimeError(f"simulation truncated at cycle limit {limit}")
    vm_result, t_max = trace.results["worker"]
    m_int, m_max = mem_finalize(mem, t_max)
    return MeteredOutcome(
        vm_result=vm_result,
        t_max=t_max,
        tau=cfg.tau,
        m_int=m_int,
        m_max=m_max,
        net=net.net,
        mem=mem,
        net_state=net,
        trace=trace,
        vm_steps=vm_result.steps,
        window_start=marks["window_start"],
        window_end=marks["window_end"],
        cycle_events=cycle_events,
    )


@dataclass(frozen=True)
class SignedMeasurement:
    """The signed per-invocation resource report."""

    t_max: int
    tau: int
    m_int: int
    m_max: int
    m_avg: int
    net: int
    tag: bytes
    keyset_id: bytes
    signature: bytes

    def body(self) -> bytes:
        w = Writer()
        w.u64(self.t_max)
        w.u64(self.tau)
        w.u64(self.m_int)
        w.u64(self.m_max)
        w.u64(self.m_avg)
        w.u64(self.net)
        w.fixed(self.tag, DIGEST_SIZE)
        w.fixed(self.keyset_id, DIGEST_SIZE)
        return w.done()

    def signed_payload(self) -> bytes:
        return MEASUREMENT_DOMAIN + self.body()

    def encode(self) -> bytes:
        w = Writer()
        w.var(self.body())
        w.fixed(self.signature, crypto.SIGNATURE_SIZE)
        return w.done()

    @classmethod
    def decode(cls, data: bytes) -> "SignedMeasurement":
        r = Reader(data)
        body = Reader(r.var())
        sig = r.fixed(crypto.SIGNATURE_SIZE)
        r.finish()
        out = cls(
            t_max=body.u64(),
            tau=body.u64(),
            m_int=body.u64(),
            m_max=body.u64(),
            m_avg=body.u64(),
            net=body.u64(),
            tag=body.fixed(DIGEST_SIZE),
            keyset_id=body.fixed(DIGEST_SIZE),
            signature=sig,
        )
        body.finish()
        return out

    def digest(self) -> bytes:
        return crypto.hash_bytes(self.encode())


def build_signed_measurement(
    outcome: MeteredOutcome,
    tag: bytes,
    keyset_id: bytes,
    k_res_private: bytes,
) -> SignedMeasurement:
    """Assemble and sign the report. tau always travels with the report so the
    verifier can convert ticks to cycles; m_avg uses integer truncation."""
    unsigned = SignedMeasurement(
        t_max=outcome.t_max,
        tau=outcome.tau,
        m_int=outcome.m_int,
        m_max=outcome.m_max,
        m_avg=outcome.m_avg,
        net=outcome.net,
        tag=tag,
        keyset_id=keyset_id,
        signature=b"\x00" * crypto.SIGNATURE_SIZE,
    )
    sig = crypto.sign(k_res_private, unsigned.signed_payload())
    return SignedMeasurement(**{**unsigned.__dict__, "signature": sig})


def verify_measurement(report: SignedMeasurement, k_res_public: bytes) -> bool:
    return crypto.verify(k_res_public, report.signed_payload(), report.signature)
