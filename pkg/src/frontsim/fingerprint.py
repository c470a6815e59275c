"""Microcode-patch detection and application fingerprinting.

Patch detection asks a simple question: does a small same-set loop get the
LSD's delivery cost or the DSB's?  A loop that is too large for the LSD is
run alongside as the reference.

Fingerprinting runs a DSB-resident nop loop as the attacker and reads its own
IPC at a low rate.  The victim's decode demand on the shared legacy decoder
slows the attacker down; the slowdown per interval is modelled as
``capacity / (capacity + demand_rate)``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path as FsPath
from typing import Callable, Mapping, Sequence

import numpy as np

from .channels import build_block_chain
from .frontend import Frontend, MixBlock, Path
from .timing import CostModel, base_cost, noisy_total

PATCH_BASE = 0x200_0000
ATTACKER_BASE = 0x300_0000


# -- patch detection -----------------------------------------------------------------


@dataclass(frozen=True)
class PatchVerdict:
    verdict: str  # "lsd_enabled", "lsd_disabled" or "inconclusive"
    timing_gap: float  # cycles per block, above-capacity loop minus below-capacity loop
    energy_gap: float  # energy per block, same order
    below_cycles: float
    above_cycles: float


def _steady_loop(fe: Frontend, body: Sequence[MixBlock], model: CostModel,
                 rng: np.random.Generator | None, warmup: int, iterations: int) -> tuple[float, float]:
    """Mean (cycles, energy) per block over ``iterations`` after ``warmup`` passes."""
    fe.run_loop(0, body, warmup)
    costs: Counter = Counter()
    energy = 0.0
    for _ in range(iterations):
        for b in body:
            rec = fe.access_block(0, b)
            costs[base_cost(rec, rec.prev_path, model)] += 1
            energy += b.uop_count * model.energy_per_uop(rec.path)
        fe.end_iteration(0)
    n = len(body) * iterations
    return noisy_total(costs, model.noise_sigma, rng) / n, energy / n


def detect_patch(state_factory: Callable[[], Frontend], model: CostModel, trials: int = 1,
                 rng: np.random.Generator | None = None, below_blocks: int = 8,
                 above_blocks: int = 13, warmup: int = 4, iterations: int = 50,
                 target_set: int = 0) -> PatchVerdict:
    """Decide whether the LSD is active from a below- and an above-capacity same-set loop.

    The below-capacity loop's steady per-block cost is matched to the nearer
    of the LSD and DSB cost classes.  If the standard error of that mean is
    too large to tell the classes apart the verdict is ``inconclusive``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if model.noise_sigma > 0 and rng is None:
        raise ValueError("a random generator is required when noise_sigma > 0")
    below = build_block_chain(below_blocks, target_set, base=PATCH_BASE)
    above = build_block_chain(above_blocks, target_set, base=PATCH_BASE, first_slot=below_blocks)
    b_cyc, a_cyc, b_en, a_en = [], [], [], []
    for _ in range(trials):
        c, e = _steady_loop(state_factory(), below, model, rng, warmup, iterations)
        b_cyc.append(c)
        b_en.append(e)
        c, e = _steady_loop(state_factory(), above, model, rng, warmup, iterations)
        a_cyc.append(c)
        a_en.append(e)
    below_mean = float(np.mean(b_cyc))
    above_mean = float(np.mean(a_cyc))
    separation = abs(model.cycles_lsd - model.cycles_dsb)
    stderr = model.noise_sigma / math.sqrt(below_blocks * iterations * trials)
    if separation == 0 or 3 * stderr >= separation / 2:
        verdict = "inconclusive"
    elif abs(below_mean - model.cycles_lsd) < abs(below_mean - model.cycles_dsb):
        verdict = "lsd_enabled"
    else:
        verdict = "lsd_disabled"
    return PatchVerdict(verdict, above_mean - below_mean, float(np.mean(a_en) - np.mean(b_en)),
                        below_mean, above_mean)


def patch_csv(rows: Sequence[tuple[bool, PatchVerdict]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lsd_enabled", "verdict", "below_cycles_per_block", "above_cycles_per_block",
                "timing_gap", "energy_gap"])
    for enabled, v in rows:
        w.writerow([int(enabled), v.verdict, f"{v.below_cycles:.6g}", f"{v.above_cycles:.6g}",
                    f"{v.timing_gap:.6g}", f"{v.energy_gap:.6g}"])
    return buf.getvalue()


# -- application fingerprinting ------------------------------------------------------


@dataclass(frozen=True)
class VictimTrace:
    name: str
    demand: tuple[float, ...]  # micro-ops pushed through the legacy decoder per interval
    interval_s: float

    def __post_init__(self):
        if not self.demand:
            raise ValueError("victim trace must be non-empty")
        if any(d < 0 for d in self.demand):
            raise ValueError("victim demand must be non-negative")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.demand) * self.interval_s

    def mean_rate(self, t0: float, t1: float) -> float:
        """Average demand in micro-ops per second over [t0, t1); zero past the end."""
        if t1 <= t0:
            raise ValueError("empty window")
        total = 0.0
        i0 = int(t0 // self.interval_s)
        i1 = int(math.ceil(t1 / self.interval_s))
        for i in range(max(i0, 0), min(i1, len(self.demand))):
            lo = max(t0, i * self.interval_s)
            hi = min(t1, (i + 1) * self.interval_s)
            if hi > lo:
                total += self.demand[i] * (hi - lo) / self.interval_s
        return total / (t1 - t0)


@dataclass(frozen=True)
class IpcTrace:
    samples: tuple[float, ...]
    sampling_hz: float = 10.0
    label: str = ""

    def __len__(self) -> int:
        return len(self.samples)


def read_victim_csv(path: str | FsPath, name: str | None = None) -> VictimTrace:
    """Load ``interval_s,demand_uops`` rows; every row must use the same interval."""
    path = FsPath(path)
    with path.open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["interval_s", "demand_uops"]:
            raise ValueError(f"{path}: expected header interval_s,demand_uops")
        rows = [(float(r["interval_s"]), float(r["demand_uops"])) for r in reader]
    if not rows:
        raise ValueError(f"{path}: no samples")
    intervals = {r[0] for r in rows}
    if len(intervals) != 1:
        raise ValueError(f"{path}: interval_s must be constant")
    return VictimTrace(name or path.stem, tuple(r[1] for r in rows), rows[0][0])


def write_victim_csv(trace: VictimTrace, path: str | FsPath) -> None:
    with FsPath(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["interval_s", "demand_uops"])
        for d in trace.demand:
            w.writerow([repr(trace.interval_s), repr(float(d))])


def attacker_loop(blocks: int = 20, nops_per_block: int = 5) -> list[MixBlock]:
    """The attacker's nop loop: one short block per consecutive 32-byte window."""
    addrs = [ATTACKER_BASE + 32 * k for k in range(blocks)]
    return [MixBlock(a, nops_per_block, nops_per_block, 0, addrs[(k + 1) % blocks])
            for k, a in enumerate(addrs)]


@dataclass
class AttackerProfile:
    baseline_ipc: float
    paths: Counter = field(default_factory=Counter)
    l1i_misses_after_warmup: int = 0


def attacker_profile(fe: Frontend, model: CostModel, warmup: int = 3, iterations: int = 4,
                     thread_id: int = 0) -> AttackerProfile:
    """Steady-state IPC of the nop loop when it runs alone on ``fe``."""
    body = attacker_loop()
    fe.run_loop(thread_id, body, warmup)
    misses0 = fe.counters.l1i_misses
    cycles = uops = 0
    paths: Counter = Counter()
    for _ in range(iterations):
        for b in body:
            rec = fe.access_block(thread_id, b)
            cycles += base_cost(rec, rec.prev_path, model)
            uops += b.uop_count
            paths[rec.path] += 1
        fe.end_iteration(thread_id)
    return AttackerProfile(uops / cycles, paths, fe.counters.l1i_misses - misses0)


def attacker_ipc_run(victim: VictimTrace, model: CostModel, sampling_hz: float = 10.0,
                     rng: np.random.Generator | None = None, mite_capacity: float = 4e8,
                     jitter: float = 0.0, duration_s: float | None = None,
                     frontend: Frontend | None = None) -> IpcTrace:
    """The attacker's own IPC, sampled at ``sampling_hz`` while ``victim`` runs."""
    if sampling_hz <= 0:
        raise ValueError("sampling_hz must be positive")
    if mite_capacity <= 0:
        raise ValueError("mite_capacity must be positive")
    if jitter > 0 and rng is None:
        raise ValueError("a random generator is required when jitter > 0")
    base = attacker_profile(frontend if frontend is not None else Frontend(), model).baseline_ipc
    span = victim.duration_s if duration_s is None else duration_s
    n = int(round(span * sampling_hz))
    dt = 1.0 / sampling_hz
    out = []
    for k in range(n):
        rate = victim.mean_rate(k * dt, (k + 1) * dt)
        out.append(base * mite_capacity / (mite_capacity + rate))
    samples = np.asarray(out)
    if jitter > 0:
        samples = samples * (1 + jitter * rng.standard_normal(n))
    return IpcTrace(tuple(float(s) for s in samples), sampling_hz, victim.name)


def euclidean_distance(a: IpcTrace | Sequence[float], b: IpcTrace | Sequence[float]) -> float:
    xa = a.samples if isinstance(a, IpcTrace) else a
    xb = b.samples if isinstance(b, IpcTrace) else b
    if len(xa) != len(xb):
        raise ValueError(f"trace lengths differ: {len(xa)} vs {len(xb)}")
    return float(np.linalg.norm(np.asarray(xa, float) - np.asarray(xb, float)))


@dataclass(frozen=True)
class Classification:
    label: str
    intra_mean: float  # mean distance from the probe to references of the chosen label
    inter_mean: float  # mean distance from the probe to references of the other labels


def classify(traces: Mapping[str, Sequence[IpcTrace]], probe: IpcTrace) -> Classification:
    """Nearest-centroid label for ``probe``; ties go to the alphabetically first label."""
    if len(traces) < 2:
        raise ValueError("need at least two labels")
    if any(not ts for ts in traces.values()):
        raise ValueError("every label needs at least one reference trace")
    centroids = {lab: np.mean([t.samples for t in ts], axis=0) for lab, ts in traces.items()}
    label = min(sorted(centroids), key=lambda lab: euclidean_distance(probe, centroids[lab]))
    intra = [euclidean_distance(probe, t) for t in traces[label]]
    inter = [euclidean_distance(probe, t) for lab, ts in traces.items() if lab != label for t in ts]
    return Classification(label, float(np.mean(intra)), float(np.mean(inter)))


@dataclass(frozen=True)
class FingerprintRow:
    probe_label: str
    predicted: str
    intra_mean: float
    inter_mean: float

    @property
    def correct(self) -> bool:
        return self.probe_label == self.predicted


def leave_one_out(runs: Mapping[str, Sequence[IpcTrace]]) -> list[FingerprintRow]:
    """Classify every run against all the others."""
    rows = []
    for lab in sorted(runs):
        for i, probe in enumerate(runs[lab]):
            refs = {k: [t for j, t in enumerate(v) if not (k == lab and j == i)] for k, v in runs.items()}
            refs = {k: v for k, v in refs.items() if v}
            c = classify(refs, probe)
            rows.append(FingerprintRow(lab, c.label, c.intra_mean, c.inter_mean))
    return rows


def pairwise_means(runs: Mapping[str, Sequence[IpcTrace]]) -> tuple[float, float]:
    """(mean intra-label, mean inter-label) distance over all trace pairs."""
    flat = [(lab, t) for lab in sorted(runs) for t in runs[lab]]
    intra, inter = [], []
    for (la, a), (lb, b) in combinations(flat, 2):
        (intra if la == lb else inter).append(euclidean_distance(a, b))
    return float(np.mean(intra)) if intra else 0.0, float(np.mean(inter)) if inter else 0.0


def fingerprint_csv(rows: Sequence[FingerprintRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe_label", "predicted", "intra_mean", "inter_mean", "correct"])
    for r in rows:
        w.writerow([r.probe_label, r.predicted, f"{r.intra_mean:.6g}", f"{r.inter_mean:.6g}", int(r.correct)])
    return buf.getvalue()


# Synthetic CNN-like inference workloads: each repeats a sequence of layers,
# (duration in seconds, decode demand in micro-ops per second).
SYNTHETIC_VICTIMS: dict[str, tuple[tuple[float, float], ...]] = {
    "cnn_a": ((0.2, 3.0e8), (0.2, 0.5e8)),
    "cnn_b": ((0.3, 1.5e8), (0.1, 4.0e8), (0.2, 0.2e8)),
    "cnn_c": ((0.5, 2.5e8), (0.5, 1.0e8)),
    "cnn_d": ((0.1, 0.8e8), (0.1, 3.5e8), (0.4, 0.0)),
}


def synthetic_victim(name: str, duration_s: float = 3.0, interval_s: float = 0.01) -> VictimTrace:
    layers = SYNTHETIC_VICTIMS[name]
    period = sum(d for d, _ in layers)
    demand = []
    for k in range(int(round(duration_s / interval_s))):
        t = (k * interval_s) % period
        for dur, rate in layers:
            if t < dur - 1e-12:
                demand.append(rate * interval_s)
                break
            t -= dur
        else:
            demand.append(layers[-1][1] * interval_s)
    return VictimTrace(name, tuple(demand), interval_s)


def fingerprint_runs(victims: Sequence[VictimTrace], model: CostModel, runs: int,
                     rng_for: Callable[[str, int], np.random.Generator], sampling_hz: float = 10.0,
                     mite_capacity: float = 4e8, jitter: float = 0.02,
                     partitioned: bool = True) -> dict[str, list[IpcTrace]]:
    """``runs`` attacker traces per victim, each on a fresh frontend."""
    out: dict[str, list[IpcTrace]] = {}
    for v in victims:
        traces = []
        for r in range(runs):
            fe = Frontend()
            if partitioned:
                fe.set_partition_mode(2)
            traces.append(attacker_ipc_run(v, model, sampling_hz, rng_for(v.name, r), mite_capacity,
                                           jitter, frontend=fe))
        out[v.name] = traces
    return out
