"""Minimal deterministic bytecode VM standing in for the function interpreter.

A stack machine with 16 local slots, integer arithmetic on 64-bit words,
jumps, a handle-based heap whose alloc/realloc/free paths are instrumented,
synthetic network send/receive, word-granular input/output, and a tag opcode.
Functions can only touch memory and the network through the provided hooks,
which is what protects the resource measurements from the measured code.

Bytecode files: magic ``MFVM``, version byte, entry instruction index (u32 LE),
code length (u32 LE), code. The function hash is computed over these exact
bytes. Numeric I/O is little-endian 64-bit words.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generator, Iterator

from . import crypto

MAGIC = b"MFVM"
VERSION = 1
LOCAL_SLOTS = 16
WORD = 1 << 64

# opcode -> (mnemonic, immediate kind); immediates: None, "u64", "target", "slot"
OPCODES: dict[int, tuple[str, str | None]] = {
    0x00: ("HALT", None),
    0x01: ("PUSH", "u64"),
    0x02: ("POP", None),
    0x03: ("DUP", None),
    0x04: ("SWAP", None),
    0x05: ("OVER", None),
    0x10: ("ADD", None),
    0x11: ("SUB", None),
    0x12: ("MUL", None),
    0x18: ("LT", None),
    0x19: ("GT", None),
    0x1A: ("EQ", None),
    0x20: ("JMP", "target"),
    0x21: ("JZ", "target"),
    0x22: ("JNZ", "target"),
    0x30: ("ALLOC", None),
    0x31: ("REALLOC", None),
    0x32: ("FREE", None),
    0x33: ("LOAD", None),
    0x34: ("STORE", None),
    0x40: ("NET_SEND", None),
    0x41: ("NET_RECV", None),
    0x50: ("INPUT_WORD", None),
    0x51: ("OUTPUT_WORD", None),
    0x52: ("SET_TAG", None),
    0x60: ("LOADL", "slot"),
    0x61: ("STOREL", "slot"),
}
MNEMONIC_TO_OP = {name: op for op, (name, _) in OPCODES.items()}
_HEAP_OPS = frozenset((0x30, 0x31, 0x32))
_NET_OPS = frozenset((0x40, 0x41))


class LoadError(ValueError):
    """Malformed bytecode; `offset` points at the offending byte."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class AsmError(ValueError):
    pass


@dataclass(frozen=True)
class CostTable:
    """Cycle prices per instruction class. Arbitrary but fixed; the metering
    properties must hold for any positive table."""

    default: int = 1
    heap: int = 10
    net: int = 5

    def cost(self, op: int) -> int:
        if op in _HEAP_OPS:
            return self.heap
        if op in _NET_OPS:
            return self.net
        return self.default

    def validate(self) -> None:
        if min(self.default, self.heap, self.net) < 1:
            raise ValueError("all instruction costs must be positive")


@dataclass(frozen=True)
class VMLimits:
    max_steps: int = 1_000_000
    max_memory: int = 1 << 24
    max_output: int = 1 << 16

    def __post_init__(self) -> None:
        if min(self.max_steps, self.max_memory, self.max_output) <= 0:
            raise ValueError("limits must be strictly positive")


@dataclass(frozen=True)
class FunctionImage:
    raw: bytes
    entry: int
    program: tuple[tuple[int, int | None], ...]
    function_hash: bytes

    def recheck_hash(self) -> bool:
        return crypto.hash_bytes(self.raw) == self.function_hash


def _noop1(_n: int) -> None:
    return None


def _noop2(_a: int, _b: int) -> None:
    return None


def _noop0() -> None:
    return None


@dataclass
class VmHooks:
    """The only capabilities a running function gets. Metering wires these to
    its own state; nothing else of the meter is reachable from the sandbox."""

    on_alloc: Callable[[int], None] = _noop1
    on_free: Callable[[int], None] = _noop1
    on_net: Callable[[int, int], None] = _noop2
    read_tick: Callable[[], int] = lambda: 0
    ocall_begin: Callable[[], None] = _noop0
    ocall_end: Callable[[], None] = _noop0


@dataclass
class VMResult:
    output: bytes
    tag: bytes
    status: str  # "ok" or "trapped"
    reason: str | None = None
    steps: int = 0
    cycles: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class NetIo:
    """Yielded for network instructions so the driver can run the OCALL
    bracket around them; byte counts are as popped from the stack."""

    cost: int
    sent: int
    received: int


def vm_load(data: bytes) -> FunctionImage:
    """Parse and validate bytecode. Jump targets are instruction indices and
    must land inside the program; anything malformed raises LoadError."""
    if len(data) < 13:
        raise LoadError("file shorter than header", len(data))
    if data[:4] != MAGIC:
        raise LoadError("bad magic", 0)
    if data[4] != VERSION:
        raise LoadError(f"unsupported version {data[4]}", 4)
    entry = int.from_bytes(data[5:9], "little")
    code_len = int.from_bytes(data[9:13], "little")
    code = data[13:]
    if len(code) != code_len:
        raise LoadError(f"code length field {code_len} does not match {len(code)} bytes", 9)

    program: list[tuple[int, int | None]] = []
    pos = 0
    while pos < len(code):
        op = code[pos]
        if op not in OPCODES:
            raise LoadError(f"unknown opcode 0x{op:02x}", 13 + pos)
        _, imm = OPCODES[op]
        pos += 1
        arg: int | None = None
        if imm == "u64":
            if pos + 8 > len(code):
                raise LoadError("truncated 64-bit immediate", 13 + pos)
            arg = int.from_bytes(code[pos : pos + 8], "little")
            pos += 8
        elif imm == "target":
            if pos + 4 > len(code):
                raise LoadError("truncated jump target", 13 + pos)
            arg = int.from_bytes(code[pos : pos + 4], "little")
            pos += 4
        elif imm == "slot":
            if pos + 1 > len(code):
                raise LoadError("truncated slot index", 13 + pos)
            arg = code[pos]
            if arg >= LOCAL_SLOTS:
                raise LoadError(f"slot {arg} out of range", 13 + pos)
            pos += 1
        program.append((op, arg))

    n = len(program)
    if n == 0:
        raise LoadError("empty program", 13)
    for i, (op, arg) in enumerate(program):
        if OPCODES[op][1] == "target" and arg >= n:
            raise LoadError(f"jump target {arg} out of range at instruction {i}", 13)
    if entry >= n:
        raise LoadError(f"entry index {entry} out of range", 5)

    return FunctionImage(
        raw=bytes(data),
        entry=entry,
        program=tuple(program),
        function_hash=crypto.hash_bytes(data),
    )


class _Trap(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


def execute_steps(
    image: FunctionImage,
    input_data: bytes,
    limits: VMLimits,
    hooks: VmHooks,
    costs: CostTable,
    default_tag: bytes | None = None,
) -> Generator[int | NetIo, None, VMResult]:
    """Core interpreter as a generator: yields each instruction's cycle cost
    (or a NetIo marker) before applying its effect, so a driver can charge
    cycles at the right simulated instant. Returns the VMResult."""
    costs.validate()
    program = image.program
    stack: list[int] = []
    locals_: list[int] = [0] * LOCAL_SLOTS
    heap: dict[int, bytearray] = {}
    next_handle = 1
    live = 0
    output = bytearray()
    tag: bytes | None = None
    pc = image.entry
    steps = 0
    cycles = 0

    def pop() -> int:
        if not stack:
            raise _Trap("fault:stack-underflow")
        return stack.pop()

    def block(handle: int) -> bytearray:
        b = heap.get(handle)
        if b is None:
            raise _Trap("fault:bad-handle")
        return b

    def finish(status: str, reason: str | None) -> VMResult:
        final_tag = tag if tag is not None else (default_tag or crypto.hash_bytes(b""))
        return VMResult(
            output=bytes(output), tag=final_tag, status=status, reason=reason,
            steps=steps, cycles=cycles,
        )

    try:
        while True:
            if steps >= limits.max_steps:
                raise _Trap("budget:steps")
            op, arg = program[pc]
            cost = costs.cost(op)
            if op in _NET_OPS:
                count = pop()
                sent, received = (count, 0) if op == 0x40 else (0, count)
                steps += 1
                cycles += cost
                yield NetIo(cost, sent, received)
                pc += 1
                continue
            steps += 1
            cycles += cost
            yield cost
            # effect phase: runs when the driver resumes us, i.e. at the
            # cycle where the instruction completes
            if op == 0x00:  # HALT
                return finish("ok", None)
            elif op == 0x01:  # PUSH
                stack.append(arg)
            elif op == 0x02:  # POP
                pop()
            elif op == 0x03:  # DUP
                v = pop()
                stack.append(v)
                stack.append(v)
            elif op == 0x04:  # SWAP
                b, a = pop(), pop()
                stack.append(b)
                stack.append(a)
            elif op == 0x05:  # OVER
                b, a = pop(), pop()
                stack.append(a)
                stack.append(b)
                stack.append(a)
            elif op == 0x10:  # ADD
                b, a = pop(), pop()
                stack.append((a + b) % WORD)
            elif op == 0x11:  # SUB
                b, a = pop(), pop()
                stack.append((a - b) % WORD)
            elif op == 0x12:  # MUL
                b, a = pop(), pop()
                stack.append((a * b) % WORD)
            elif op == 0x18:  # LT
                b, a = pop(), pop()
                stack.append(1 if a < b else 0)
            elif op == 0x19:  # GT
                b, a = pop(), pop()
                stack.append(1 if a > b else 0)
            elif op == 0x1A:  # EQ
                b, a = pop(), pop()
                stack.append(1 if a == b else 0)
            elif op == 0x20:  # JMP
                pc = arg
                continue
            elif op == 0x21:  # JZ
                if pop() == 0:
                    pc = arg
                    continue
            elif op == 0x22:  # JNZ
                if pop() != 0:
                    pc = arg
                    continue
            elif op == 0x30:  # ALLOC
                size = pop()
                if live + size > limits.max_memory:
                    raise _Trap("budget:memory")
                handle = next_handle
                next_handle += 1
                heap[handle] = bytearray(size)
                live += size
                hooks.on_alloc(size)
                stack.append(handle)
            elif op == 0x31:  # REALLOC
                size, handle = pop(), pop()
                b = block(handle)
                old = len(b)
                if live - old + size > limits.max_memory:
                    raise _Trap("budget:memory")
                if size >= old:
                    b.extend(bytes(size - old))
                    if size > old:
                        hooks.on_alloc(size - old)
                else:
                    del b[size:]
                    hooks.on_free(old - size)
                live += size - old
                stack.append(handle)
            elif op == 0x32:  # FREE
                handle = pop()
                b = block(handle)
                live -= len(b)
                hooks.on_free(len(b))
                del heap[handle]
            elif op == 0x33:  # LOAD
                idx, handle = pop(), pop()
                b = block(handle)
                if (idx + 1) * 8 > len(b):
                    raise _Trap("fault:out-of-bounds")
                stack.append(int.from_bytes(b[idx * 8 : idx * 8 + 8], "little"))
            elif op == 0x34:  # STORE
                value, idx, handle = pop(), pop(), pop()
                b = block(handle)
                if (idx + 1) * 8 > len(b):
                    raise _Trap("fault:out-of-bounds")
                b[idx * 8 : idx * 8 + 8] = value.to_bytes(8, "little")
            elif op == 0x50:  # INPUT_WORD
                idx = pop()
                if (idx + 1) * 8 > len(input_data):
                    raise _Trap("fault:input-out-of-bounds")
                stack.append(int.from_bytes(input_data[idx * 8 : idx * 8 + 8], "little"))
            elif op == 0x51:  # OUTPUT_WORD
                v = pop()
                if len(output) + 8 > limits.max_output:
                    raise _Trap("budget:output")
                output.extend(v.to_bytes(8, "little"))
            elif op == 0x52:  # SET_TAG
                handle = pop()
                tag = crypto.hash_bytes(bytes(block(handle)))
            elif op == 0x60:  # LOADL
                stack.append(locals_[arg])
            elif op == 0x61:  # STOREL
                locals_[arg] = pop()
            else:  # pragma: no cover - loader rejects unknown opcodes
                raise _Trap("fault:bad-opcode")
            pc += 1
    except _Trap as trap:
        return finish("trapped", trap.reason)


def vm_execute(
    image: FunctionImage,
    input_data: bytes,
    limits: VMLimits,
    hooks: VmHooks | None = None,
    costs: CostTable | None = None,
    default_tag: bytes | None = None,
) -> VMResult:
    """Run an image to completion outside any simulation. This is the oracle
    path: same interpreter, same hook sequence, no protocol stack."""
    hooks = hooks or VmHooks()
    gen = execute_steps(image, input_data, limits, hooks, costs or CostTable(), default_tag)
    try:
        item = next(gen)
        while True:
            if isinstance(item, NetIo):
                hooks.ocall_begin()
                hooks.ocall_end()
                hooks.on_net(item.sent, item.received)
            item = gen.send(None)
    except StopIteration as stop:
        return stop.value


# --- assembler ---------------------------------------------------------------


def assemble(source: str) -> bytes:
    """Two-pass textual assembler.

    Lines: ``[label:] MNEMONIC [operand]``; ``;`` and ``#`` start comments;
    ``.entry label`` selects the entry instruction (default: first).
    Operands are decimal, 0x hex, or label references for jumps.
    """
    labels: dict[str, int] = {}
    items: list[tuple[str, str | None, int]] = []  # (mnemonic, operand, lineno)
    entry_ref: str | None = None

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.split(";")[0].split("#")[0].strip()
        if not line:
            continue
        if line.startswith(".entry"):
            parts = line.split()
            if len(parts) != 2:
                raise AsmError(f"line {lineno}: .entry needs one label")
            entry_ref = parts[1]
            continue
        while ":" in line:
            label, line = line.split(":", 1)
            label = label.strip()
            if not label.isidentifier():
                raise AsmError(f"line {lineno}: bad label {label!r}")
            if label in labels:
                raise AsmError(f"line {lineno}: duplicate label {label!r}")
            labels[label] = len(items)
            line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 2:
            raise AsmError(f"line {lineno}: too many operands")
        mnemonic = parts[0].upper()
        if mnemonic not in MNEMONIC_TO_OP:
            raise AsmError(f"line {lineno}: unknown mnemonic {mnemonic!r}")
        items.append((mnemonic, parts[1] if len(parts) == 2 else None, lineno))

    def resolve(text: str, lineno: int, kind: str) -> int:
        if kind == "target" and text in labels:
            return labels[text]
        try:
            return int(text, 0)
        except ValueError:
            raise AsmError(f"line {lineno}: unresolved operand {text!r}") from None

    code = bytearray()
    for mnemonic, operand, lineno in items:
        op = MNEMONIC_TO_OP[mnemonic]
        imm = OPCODES[op][1]
        code.append(op)
        if imm is None:
            if operand is not None:
                raise AsmError(f"line {lineno}: {mnemonic} takes no operand")
            continue
        if operand is None:
            raise AsmError(f"line {lineno}: {mnemonic} needs an operand")
        value = resolve(operand, lineno, imm)
        if imm == "u64":
            code.extend((value % WORD).to_bytes(8, "little"))
        elif imm == "target":
            if not 0 <= value < len(items):
                raise AsmError(f"line {lineno}: jump target {value} out of range")
            code.extend(value.to_bytes(4, "little"))
        elif imm == "slot":
            if not 0 <= value < LOCAL_SLOTS:
                raise AsmError(f"line {lineno}: slot {value} out of range")
            code.append(value)

    entry = 0
    if entry_ref is not None:
        if entry_ref not in labels:
            raise AsmError(f".entry label {entry_ref!r} undefined")
        entry = labels[entry_ref]

    header = MAGIC + bytes([VERSION]) + entry.to_bytes(4, "little") + len(code).to_bytes(4, "little")
    return header + bytes(code)


def disassemble_counts(image: FunctionImage) -> Iterator[str]:
    for i, (op, arg) in enumerate(image.program):
        name, imm = OPCODES[op]
        yield f"{i}: {name}" + (f" {arg}" if imm is not None else "")
