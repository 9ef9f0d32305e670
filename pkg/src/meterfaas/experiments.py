"""Accuracy experiments over the built-in corpus, with CSV as the normative
output: compute-time linearity, memory-integral curvature, exact network
counts, and the tick-length under-reporting trade-off. Every row carries the
simulation's own ground truth next to the metered value.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import corpus, fib_input, known_network_input
from .crypto import DeterministicRng
from .kernel import true_resident_cycles
from .metering import MeterConfig, run_metered
from .vm import VMLimits

DEFAULT_NS = tuple(range(500, 5001, 500))
LIMITS = VMLimits(max_steps=5_000_000, max_memory=1 << 28)


@dataclass
class ExperimentResult:
    name: str
    header: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        lines = [",".join(self.header)]
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def column(self, name: str) -> list:
        idx = self.header.index(name)
        return [row[idx] for row in self.rows]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def rsquared(xs, ys, degree: int) -> float:
    """Coefficient of determination for a least-squares polynomial fit."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    coeffs = np.polyfit(x, y, degree)
    pred = np.polyval(coeffs, x)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - ss_res / ss_tot


def fib_timing(
    ns=DEFAULT_NS,
    tau: int = 100,
    epsilon: int = 0,
    small_tau: int = 630,
    small_epsilon: int = 63,
    reps: int = 1,
) -> ExperimentResult:
    """Measured compute time versus input size, plus a deliberately
    small-tick, nonzero-overhead configuration that under-reports."""
    fib = corpus()["fib"]
    rows = []
    for n in ns:
        t_acc = oracle = small_acc = 0
        for _ in range(reps):
            out = run_metered(fib, fib_input(n), LIMITS, MeterConfig(tau=tau, epsilon=epsilon))
            t_acc += out.t_max
            oracle = true_resident_cycles(out.trace, "worker")
            small = run_metered(
                fib, fib_input(n), LIMITS, MeterConfig(tau=small_tau, epsilon=small_epsilon)
            )
            small_acc += small.t_max
        t_max = t_acc / reps
        small_t = small_acc / reps
        rows.append(
            [n, t_max, t_max * tau, oracle, small_t, small_t * small_tau]
        )
    return ExperimentResult(
        name="fib_timing",
        header=["n", "t_max", "measured_cycles", "oracle_cycles",
                "t_max_small_tau", "small_tau_cycles"],
        rows=rows,
    )


def fib_memory(ns=DEFAULT_NS, tau: int = 100, epsilon: int = 0, reps: int = 1) -> ExperimentResult:
    """Memory time-integral versus input size; quadratic since both live
    memory and runtime grow linearly. m_int/t_max is the time-averaged
    allocation and must come out linear."""
    fib = corpus()["fib"]
    rows = []
    for n in ns:
        acc_mint = acc_avg = 0
        m_max = 0
        for _ in range(reps):
            out = run_metered(fib, fib_input(n), LIMITS, MeterConfig(tau=tau, epsilon=epsilon))
            acc_mint += out.m_int
            acc_avg += out.m_avg
            m_max = out.m_max
        rows.append([n, acc_mint / reps, m_max, acc_avg / reps])
    return ExperimentResult(
        name="fib_memory",
        header=["n", "m_int", "m_max", "m_avg"],
        rows=rows,
    )


def network(cases: int = 100, seed: int = 0, tau: int = 100) -> ExperimentResult:
    """Metered network bytes versus the requested send/receive sizes."""
    image = corpus()["known_network"]
    rng = DeterministicRng(seed, "net-exp")
    rows = []
    for _ in range(cases):
        sent = rng.randrange(1 << 20)
        received = rng.randrange(1 << 20)
        out = run_metered(
            image, known_network_input(sent, received), LIMITS, MeterConfig(tau=tau, epsilon=0)
        )
        rows.append([sent, received, out.net, sent + received])
    return ExperimentResult(
        name="network",
        header=["sent", "received", "net_metered", "net_expected"],
        rows=rows,
    )


def tau_sweep(
    taus=(1, 5, 10, 30, 63, 100, 315, 630, 1260, 6300),
    epsilon: int = 30,
    n: int = 800,
) -> ExperimentResult:
    """Under-report ratio of the fixed workload as tau shrinks against a fixed
    per-tick bookkeeping overhead."""
    fib = corpus()["fib"]
    rows = []
    for tau in taus:
        out = run_metered(fib, fib_input(n), LIMITS, MeterConfig(tau=tau, epsilon=epsilon))
        oracle = true_resident_cycles(out.trace, "worker")
        measured = out.t_max * tau
        rows.append([tau, epsilon, out.t_max, measured, oracle, measured / oracle])
    return ExperimentResult(
        name="tau_sweep",
        header=["tau", "epsilon", "t_max", "measured_cycles", "oracle_cycles", "ratio"],
        rows=rows,
    )


EXPERIMENTS = {
    "fib_timing": fib_timing,
    "fib_memory": fib_memory,
    "network": network,
    "tau_sweep": tau_sweep,
}


def run_experiment(name: str, **params) -> ExperimentResult:
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    return EXPERIMENTS[name](**params)
