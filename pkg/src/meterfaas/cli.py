"""Command-line entry point.

Deployment state lives in a directory: a key=value ``deployment.cfg`` plus one
canonical ``published-<epoch>.bin`` per key-set epoch. The key distribution
enclave is reconstructed deterministically from the recorded seed and epoch,
so every command is reproducible byte for byte given (state, flags, seed).

Exit codes: 0 accepted/succeeded, 1 verification or property failure,
2 usage or parse error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import corpus as corp
from . import crypto
from .attest import AttestationError, AttestationRoot, derive_identity, verify_transitive
from .experiments import EXPERIMENTS, run_experiment
from .fuzz import run_lowerbound_fuzz
from .kde import KeyDistributionEnclave, PublishedKeys
from .kernel import true_resident_cycles
from .metering import MeterConfig, SignedMeasurement, run_metered, verify_measurement
from .orchestrator import (
    BillingPolicy,
    ClientContext,
    FunctionFailed,
    MeasurementLog,
    WorkerPool,
    client_prepare,
    client_verify_response,
    compute_invoice,
)
from .scenario import ConfigError, format_schedule, load_keyvalue, load_schedule
from .vm import AsmError, LoadError, VMLimits, assemble, vm_load
from .worker import Receipt, verify_receipt
from .wire import FormatError

KDE_CODE = b"meterfaas-kde-v1"
WORKER_CODE = b"meterfaas-worker-v1"
SIGNER = b"provider"


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


# --- deployment state ---------------------------------------------------------


def kde_identity():
    return derive_identity(KDE_CODE, SIGNER)


def default_worker_identity(parametrization: bytes | None = None):
    return derive_identity(WORKER_CODE, SIGNER, parametrization=parametrization)


def _state_cfg_path(state: Path) -> Path:
    return state / "deployment.cfg"


def init_state(state: Path, seed: int, worker_identity: bytes, parametrization: bytes | None) -> KeyDistributionEnclave:
    state.mkdir(parents=True, exist_ok=True)
    root = AttestationRoot(seed=crypto.DeterministicRng(seed, "root-seed").bytes(16))
    kde = KeyDistributionEnclave(root, kde_identity(), seed=seed, worker_identity=worker_identity)
    lines = [
        f"seed={seed}",
        f"worker_identity={worker_identity.hex()}",
        f"epoch=0",
    ]
    if parametrization is not None:
        lines.append(f"parametrization={parametrization.hex()}")
    _state_cfg_path(state).write_text("\n".join(lines) + "\n")
    (state / "root.pub").write_text(root.public_key.hex() + "\n")
    _write_published(state, kde)
    return kde

def _write_published(state: Path, kde: KeyDistributionEnclave) -> None:
    epoch = kde.keyset.created_at
    data = kde.published.encode()
    (state / f"published-{epoch}.bin").write_bytes(data)
    (state / "published.bin").write_bytes(data)
    # the simulated enclave's private half, canonical-encoded (the state dir
    # plays the role of the KDE's protected memory)
    from .kde import encode_private_keyset

    (state / f"keyset-{epoch}.bin").write_bytes(encode_private_keyset(kde.keyset))
    cfg = load_keyvalue(_state_cfg_path(state))
    cfg["epoch"] = str(epoch)
    _state_cfg_path(state).write_text("".join(f"{k}={v}\n" for k, v in cfg.items()))


def load_state(state: Path) -> KeyDistributionEnclave:
    cfg_path = _state_cfg_path(state)
    if not cfg_path.exists():
        raise CliError(f"no deployment at {state} (run 'kde keygen' first)", 2)
    cfg = load_keyvalue(cfg_path)
    seed = int(cfg["seed"])
    worker_identity = bytes.fromhex(cfg["worker_identity"])
    epoch = int(cfg.get("epoch", "0"))
    root = AttestationRoot(seed=crypto.DeterministicRng(seed, "root-seed").bytes(16))
    kde = KeyDistributionEnclave(root, kde_identity(), seed=seed, worker_identity=worker_identity)
    for _ in range(epoch):
        kde.rotate()
    return kde


def published_history(state: Path) -> list[PublishedKeys]:
    out = []
    for path in sorted(state.glob("published-*.bin")):
        out.append(PublishedKeys.decode(path.read_bytes()))
    return out


# --- subcommand implementations -------------------------------------------------


def cmd_kde(args) -> int:
    state = Path(args.state)
    if args.kde_cmd == "keygen":
        parametrization = bytes.fromhex(args.parametrization) if args.parametrization else None
        if args.worker_identity:
            worker_identity = bytes.fromhex(args.worker_identity)
        else:
            worker_identity = default_worker_identity(parametrization).mrenclave
        kde = init_state(state, args.seed, worker_identity, parametrization)
        print(f"keyset {kde.keyset.keyset_id.hex()} epoch 0")
        print(f"worker identity {worker_identity.hex()}")
        print(f"published keys written to {state / 'published.bin'}")
        return 0
    kde = load_state(state)
    if args.kde_cmd == "publish":
        pub = kde.published
        print(f"epoch {pub.created_at}")
        print(f"keyset_id {pub.keyset_id.hex()}")
        print(f"k_ka+ {pub.k_ka_pub.hex()}")
        print(f"k_out+ {pub.k_out_pub.hex()}")
        print(f"k_res+ {pub.k_res_pub.hex()}")
        if args.out:
            Path(args.out).write_bytes(pub.encode())
        return 0
    if args.kde_cmd == "rotate":
        kde.rotate()
        _write_published(state, kde)
        print(f"rotated to epoch {kde.keyset.created_at}, keyset {kde.keyset.keyset_id.hex()}")
        return 0
    raise CliError(f"unknown kde subcommand {args.kde_cmd}", 2)


def _root_public(args) -> bytes:
    if getattr(args, "root_pub", None):
        return bytes.fromhex(args.root_pub)
    if getattr(args, "state", None):
        return bytes.fromhex((Path(args.state) / "root.pub").read_text().strip())
    raise CliError("need --state or --root-pub", 2)


def cmd_verify_quote(args) -> int:
    published = PublishedKeys.decode(Path(args.keys).read_bytes())
    root_public = _root_public(args)
    expected_kde = bytes.fromhex(args.expected_kde) if args.expected_kde else kde_identity().mrenclave
    if args.expected_worker:
        expected_worker = bytes.fromhex(args.expected_worker)
    elif args.state:
        expected_worker = bytes.fromhex(load_keyvalue(_state_cfg_path(Path(args.state)))["worker_identity"])
    else:
        expected_worker = default_worker_identity().mrenclave
    try:
        verify_transitive(
            root_public, published.quote, expected_kde,
            published.k_ka_pub, published.k_out_pub, published.k_res_pub, expected_worker,
        )
    except AttestationError as exc:
        print(f"REJECT: {exc}")
        return 1
    print(f"ACCEPT: keyset {published.keyset_id.hex()} epoch {published.created_at}")
    return 0


def _load_report(path: str) -> SignedMeasurement:
    return SignedMeasurement.decode(Path(path).read_bytes())


def _print_report(report: SignedMeasurement) -> None:
    print(f"t_max {report.t_max}")
    print(f"tau {report.tau}")
    print(f"m_int {report.m_int}")
    print(f"m_max {report.m_max}")
    print(f"m_avg {report.m_avg}")
    print(f"net {report.net}")
    print(f"tag {report.tag.hex()}")
    print(f"keyset_id {report.keyset_id.hex()}")


def cmd_verify_measurement(args) -> int:
    report = _load_report(args.report)
    candidates: list[tuple[PublishedKeys, bool]] = []  # (keys, retired)
    if args.kres:
        key = bytes.fromhex(args.kres) if len(args.kres) == 64 else Path(args.kres).read_bytes()
        if verify_measurement(report, key):
            _print_report(report)
            print("ACCEPT")
            return 0
        print("REJECT: signature does not verify")
        return 1
    if not args.state:
        raise CliError("need --state or --kres", 2)
    history = published_history(Path(args.state))
    if not history:
        raise CliError("no published key sets in state", 2)
    newest = history[-1]
    for pub in reversed(history):
        if pub.keyset_id == report.keyset_id and verify_measurement(report, pub.k_res_pub):
            _print_report(report)
            if pub.created_at != newest.created_at:
                print(f"ACCEPT (signed by retired key set, epoch {pub.created_at})")
            else:
                print("ACCEPT")
            return 0
    print("REJECT: no known key set verifies this report")
    return 1


def cmd_verify_receipt(args) -> int:
    receipt = Receipt.decode(Path(args.receipt).read_bytes())
    if args.kout:
        k_out = bytes.fromhex(args.kout)
    else:
        k_out = PublishedKeys.decode((Path(args.state) / "published.bin").read_bytes()).k_out_pub
    input_data = Path(args.input).read_bytes()
    function_hash = crypto.hash_bytes(Path(args.function).read_bytes())
    output = Path(args.output).read_bytes()
    measurement = _load_report(args.measurement) if args.measurement else None
    ok, reason = verify_receipt(receipt, k_out, input_data, function_hash, output, measurement)
    if ok:
        print("ACCEPT: receipt binds (input, function, output)")
        return 0
    print(f"REJECT: {reason}")
    return 1


def cmd_measure_verify(args) -> int:
    report = _load_report(args.report)
    if len(args.k_res_pub) == 64 and all(c in "0123456789abcdefABCDEF" for c in args.k_res_pub):
        key = bytes.fromhex(args.k_res_pub)
    else:
        data = Path(args.k_res_pub).read_bytes()
        key = PublishedKeys.decode(data).k_res_pub if len(data) != 32 else data
    if not verify_measurement(report, key):
        print("REJECT: signature does not verify under k_res+")
        return 1
    _print_report(report)
    print("ACCEPT")
    return 0


def cmd_vm_asm(args) -> int:
    source = Path(args.source).read_text()
    data = assemble(source)
    out = Path(args.out) if args.out else Path(args.source).with_suffix(".mfvm")
    out.write_bytes(data)
    image = vm_load(data)
    print(f"{out}: {len(image.program)} instructions, hash {image.function_hash.hex()}")
    return 0


def _function_bytes(spec: str) -> bytes:
    if spec in corp.corpus():
        return assemble(getattr(corp, f"{spec.upper()}_SOURCE"))
    return Path(spec).read_bytes()


def _resolve_scenario(args):
    """Merge a scenario file (when given) under explicit flags.

    Returns (meter_cfg, cost_table, pool_size, function, schedule_factory);
    the schedule factory needs the loaded image to size fuzzed schedules.
    """
    from .scenario import ScenarioConfig

    scenario = ScenarioConfig.from_file(args.scenario) if getattr(args, "scenario", None) else ScenarioConfig()

    def pick(flag, fallback):
        return fallback if flag is None else flag

    tau = pick(args.tau, scenario.tau)
    epsilon = pick(args.epsilon, scenario.epsilon)
    net_delay = pick(args.net_delay, scenario.net_delay)
    pool = pick(getattr(args, "pool", None), scenario.pool_size)
    function = args.function or scenario.function
    cfg = MeterConfig(tau=tau, epsilon=epsilon, net_delay=net_delay,
                      include_load_time=scenario.include_load_time)
    schedule_spec = args.schedule or scenario.schedule_file

    def schedule_for(image, input_data) -> list:
        if schedule_spec:
            return load_schedule(schedule_spec)
        if scenario.fuzz_seed is not None:
            from .fuzz import random_schedule
            from .vm import vm_execute

            probe = vm_execute(image, input_data, VMLimits(max_steps=5_000_000, max_memory=1 << 28))
            span = 64 + 4 * probe.cycles
            return random_schedule(crypto.DeterministicRng(scenario.fuzz_seed, "scenario"), span)
        return []

    return cfg, scenario.cost_table(), pool, function, schedule_for


def cmd_run(args) -> int:
    state = Path(args.state)
    kde = load_state(state)
    cfg, costs, pool_size, function, schedule_for = _resolve_scenario(args)
    if not function:
        raise CliError("need --function (flag or scenario file)", 2)
    function_bytes = _function_bytes(function)
    input_data = Path(args.input).read_bytes() if args.input else b""
    schedule = schedule_for(vm_load(function_bytes), input_data)
    state_cfg = load_keyvalue(_state_cfg_path(state))
    parametrization = bytes.fromhex(state_cfg["parametrization"]) if "parametrization" in state_cfg else None
    worker_identity = derive_identity(WORKER_CODE, SIGNER, parametrization=parametrization)
    if worker_identity.mrenclave.hex() != state_cfg["worker_identity"]:
        raise CliError("state worker identity is custom; 'run' supports the default worker", 2)

    pool = WorkerPool(
        kde, worker_identity, size=pool_size, meter_cfg=cfg, costs=costs,
        limits=VMLimits(max_steps=5_000_000, max_memory=1 << 28), seed=args.seed,
        measurement_log=MeasurementLog(state / "measurements.log"),
    )
    ctx = ClientContext.create(
        kde.root.public_key, kde.published, kde_identity().mrenclave,
        worker_identity.mrenclave, seed=args.seed,
    )
    token = args.token.encode() if args.token else None
    request, pending = client_prepare(
        ctx, crypto.hash_bytes(function_bytes), input_data,
        receipt=args.receipt, want_measurement=args.want_measurement, token=token,
    )
    result = pool.dispatch(request, function_bytes, schedule=schedule)
    try:
        verified = client_verify_response(pending, result.response)
    except FunctionFailed as exc:
        print(f"FUNCTION FAILED: {exc.reason}")
        return 1
    out_dir = Path(args.out_dir) if args.out_dir else state
    (out_dir / "output.bin").write_bytes(verified.output)
    print(f"output {len(verified.output)} bytes -> {out_dir / 'output.bin'}")
    report = result.measurement
    print(f"t_max {report.t_max} ticks (tau {report.tau}), m_int {report.m_int}, "
          f"m_max {report.m_max}, net {report.net}")
    (out_dir / "measurement.bin").write_bytes(report.encode())
    if verified.receipt is not None:
        (out_dir / "receipt.bin").write_bytes(verified.receipt.encode())
        print(f"receipt -> {out_dir / 'receipt.bin'}")
    return 0


def _iter_reports(path: Path):
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    for p in files:
        data = p.read_bytes()
        try:
            text = data.decode("ascii")
            is_log = all(set(line.strip()) <= set("0123456789abcdefABCDEF") for line in text.splitlines() if line.strip())
        except UnicodeDecodeError:
            is_log = False
        if is_log and data:
            for line in text.splitlines():
                line = line.strip()
                if line:
                    yield SignedMeasurement.decode(bytes.fromhex(line))
        else:
            yield SignedMeasurement.decode(data)


def cmd_bill(args) -> int:
    policy = BillingPolicy.from_mapping(load_keyvalue(args.policy))
    reports = list(_iter_reports(Path(args.reports)))
    if args.state:
        history = published_history(Path(args.state))
        keys = {pub.keyset_id: pub.k_res_pub for pub in history}
        for i, report in enumerate(reports):
            key = keys.get(report.keyset_id)
            if key is None or not verify_measurement(report, key):
                print(f"REJECT: report {i} does not verify against any known key set")
                return 1
    invoice = compute_invoice(reports, policy)
    text = invoice.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_experiment(args) -> int:
    params = {}
    if args.name in ("fib_timing", "fib_memory"):
        params["ns"] = tuple(range(args.n_min, args.n_max + 1, args.n_step))
        params["tau"] = args.tau
        params["reps"] = args.reps
    if args.name == "tau_sweep":
        params["epsilon"] = args.epsilon
    if args.name == "network":
        params["cases"] = args.cases
        params["seed"] = args.seed
    result = run_experiment(args.name, **params)
    out = Path(args.out) if args.out else Path(f"{args.name}.csv")
    result.write(out)
    print(f"{result.name}: {len(result.rows)} rows -> {out}")
    return 0


def cmd_fuzz_lowerbound(args) -> int:
    summary = run_lowerbound_fuzz(args.cases, args.seed)
    if summary.ok:
        print(f"PASS: {summary.cases} cases, 0 violations of t_max*tau <= resident cycles")
        return 0
    case = summary.violations[0]
    artifact = Path(args.artifact) if args.artifact else Path(f"lowerbound-violation-{case.seed_index}.schedule")
    artifact.write_text(format_schedule(case.schedule))
    print(
        f"FAIL: {len(summary.violations)} violations out of {summary.cases}; "
        f"first: case {case.seed_index} t_max={case.outcome.t_max} tau={case.cfg.tau} "
        f"oracle={case.oracle}; schedule -> {artifact}"
    )
    return 1


def cmd_replay(args) -> int:
    cfg, costs, _, function, schedule_for = _resolve_scenario(args)
    if not function:
        raise CliError("need --function (flag or scenario file)", 2)
    function_bytes = _function_bytes(function)
    image = vm_load(function_bytes)
    input_data = Path(args.input).read_bytes() if args.input else b""
    schedule = schedule_for(image, input_data)
    outcome = run_metered(
        image, input_data, VMLimits(max_steps=5_000_000, max_memory=1 << 28),
        cfg, schedule=schedule, costs=costs, full_trace=args.full,
    )
    sys.stdout.write(outcome.trace.export_text())
    oracle = true_resident_cycles(outcome.trace, "worker")
    print(f"# t_max={outcome.t_max} tau={cfg.tau} measured_cycles={outcome.t_max * cfg.tau} "
          f"oracle_cycles={oracle} m_int={outcome.m_int} m_max={outcome.m_max} net={outcome.net}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meterfaas",
        description="Metered FaaS simulator: keys, attestation, metered runs, billing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kde", help="key distribution enclave management")
    kde_sub = p.add_subparsers(dest="kde_cmd", required=True)
    for name, desc in (("keygen", "generate a key set"), ("publish", "show/export published keys"), ("rotate", "rotate the key set")):
        sp = kde_sub.add_parser(name, help=desc)
        sp.add_argument("--state", required=True, help="deployment state directory")
        if name == "keygen":
            sp.add_argument("--seed", type=int, required=True)
            sp.add_argument("--worker-identity", help="hex digest of the allowed worker identity")
            sp.add_argument("--parametrization", help="hex digest for damage containment")
        if name == "publish":
            sp.add_argument("--out", help="write canonical published keys here")
    p.set_defaults(func=cmd_kde)

    p = sub.add_parser("attest", help="attestation commands")
    attest_sub = p.add_subparsers(dest="attest_cmd", required=True)
    av = attest_sub.add_parser("verify", help="verify a published key quote transitively")
    _quote_flags(av)
    av.set_defaults(func=cmd_verify_quote)

    p = sub.add_parser("verify", help="verify quotes, measurements, receipts")
    verify_sub = p.add_subparsers(dest="verify_cmd", required=True)
    vq = verify_sub.add_parser("quote")
    _quote_flags(vq)
    vq.set_defaults(func=cmd_verify_quote)
    vm_ = verify_sub.add_parser("measurement")
    vm_.add_argument("report")
    vm_.add_argument("--state", help="deployment state (checks current and retired key sets)")
    vm_.add_argument("--kres", help="hex k_res public key or a published-keys file")
    vm_.set_defaults(func=cmd_verify_measurement)
    vr = verify_sub.add_parser("receipt")
    vr.add_argument("--receipt", required=True)
    vr.add_argument("--input", required=True)
    vr.add_argument("--function", required=True)
    vr.add_argument("--output", required=True)
    vr.add_argument("--measurement")
    vr.add_argument("--state")
    vr.add_argument("--kout", help="hex k_out public key")
    vr.set_defaults(func=cmd_verify_receipt)

    p = sub.add_parser("measure", help="measurement report commands")
    m_sub = p.add_subparsers(dest="measure_cmd", required=True)
    mv = m_sub.add_parser("verify", help="verify and print a measurement report")
    mv.add_argument("report")
    mv.add_argument("k_res_pub", help="hex public key or published-keys file")
    mv.set_defaults(func=cmd_measure_verify)

    p = sub.add_parser("vm", help="bytecode tools")
    vm_sub = p.add_subparsers(dest="vm_cmd", required=True)
    va = vm_sub.add_parser("asm", help="assemble a textual program")
    va.add_argument("source")
    va.add_argument("-o", "--out")
    va.set_defaults(func=cmd_vm_asm)

    p = sub.add_parser("run", help="end-to-end metered invocation")
    p.add_argument("--state", required=True)
    p.add_argument("--function", help="bytecode file or corpus name")
    p.add_argument("--input", help="input file (little-endian 64-bit words)")
    p.add_argument("--receipt", action="store_true")
    p.add_argument("--want-measurement", action="store_true")
    p.add_argument("--token", help="authorization token carried in the encrypted input")
    p.add_argument("--scenario", help="key=value scenario file supplying defaults")
    p.add_argument("--schedule", help="interrupt schedule file")
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--epsilon", type=int, default=None)
    p.add_argument("--net-delay", type=int, default=None)
    p.add_argument("--pool", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bill", help="compute an invoice over measurement reports")
    p.add_argument("--policy", required=True, help="key=value policy file")
    p.add_argument("--reports", required=True, help="log file, report file, or directory")
    p.add_argument("--state", help="verify each report against the deployment's key sets")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_bill)

    p = sub.add_parser("experiment", help="accuracy experiments (CSV output)")
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    p.add_argument("-o", "--out")
    p.add_argument("--tau", type=int, default=100)
    p.add_argument("--epsilon", type=int, default=30)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-min", type=int, default=500)
    p.add_argument("--n-max", type=int, default=5000)
    p.add_argument("--n-step", type=int, default=500)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("fuzz-lowerbound", help="randomized lower-bound property check")
    p.add_argument("--cases", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--artifact", help="where to dump a reproducing schedule on failure")
    p.set_defaults(func=cmd_fuzz_lowerbound)

    p = sub.add_parser("replay", help="run one metered simulation and print its trace")
    p.add_argument("--function")
    p.add_argument("--input")
    p.add_argument("--scenario", help="key=value scenario file supplying defaults")
    p.add_argument("--schedule")
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--epsilon", type=int, default=None)
    p.add_argument("--net-delay", type=int, default=None)
    p.add_argument("--full", action="store_true", help="log writes and per-instruction steps")
    p.set_defaults(func=cmd_replay)

    return parser


def _quote_flags(p) -> None:
    p.add_argument("--keys", required=True, help="canonical published-keys file")
    p.add_argument("--state", help="deployment state directory")
    p.add_argument("--root-pub", help="hex attestation root public key")
    p.add_argument("--expected-kde", help="hex KDE mrenclave")
    p.add_argument("--expected-worker", help="hex worker mrenclave")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, ConfigError, AsmError, LoadError, ValueError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
