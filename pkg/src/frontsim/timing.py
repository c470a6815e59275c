"""Cycle and energy costs of frontend deliveries, plus a RAPL-style energy reader."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .frontend import DeliveryRecord, Path

RAPL_INTERVAL_S = 1 / 20000


@dataclass(frozen=True)
class CostModel:
    # DSB < LSD < MITE: LSD replay is slower than DSB delivery on the measured parts.
    cycles_lsd: int = 6
    cycles_dsb: int = 5
    cycles_mite: int = 16
    lsd_to_dsb: int = 6
    dsb_to_mite: int = 10
    lcp_stall: int = 3
    energy_lsd: float = 1.0
    energy_dsb: float = 2.0
    energy_mite: float = 4.0
    noise_sigma: float = 0.0
    core_freq_hz: float = 2.7e9

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost.{f.name} must be non-negative")
        if self.core_freq_hz <= 0:
            raise ValueError("core_freq_hz must be positive")

    def cycles(self, path: Path) -> int:
        return {Path.LSD: self.cycles_lsd, Path.DSB: self.cycles_dsb, Path.MITE: self.cycles_mite}[path]

    def energy_per_uop(self, path: Path) -> float:
        return {Path.LSD: self.energy_lsd, Path.DSB: self.energy_dsb, Path.MITE: self.energy_mite}[path]

    def switch_penalty(self, prev: Path | None, path: Path) -> int:
        if prev is Path.LSD and path is Path.DSB:
            return self.lsd_to_dsb
        if prev is Path.DSB and path is Path.MITE:
            return self.dsb_to_mite
        if prev is Path.LSD and path is Path.MITE:
            return self.lsd_to_dsb + self.dsb_to_mite
        return 0

    def orderings_hold(self) -> bool:
        return (self.cycles_dsb < self.cycles_mite and self.cycles_lsd < self.cycles_mite
                and self.energy_lsd < self.energy_dsb < self.energy_mite)

    def seconds(self, cycles: float) -> float:
        return cycles / self.core_freq_hz


def base_cost(record: DeliveryRecord, prev_path: Path | None, model: CostModel) -> int:
    """Noiseless cycles for one delivery."""
    return (model.cycles(record.path) + model.switch_penalty(prev_path, record.path)
            + model.lcp_stall * record.block.lcp_stalls)


def cost_of(record: DeliveryRecord, prev_path: Path | None, model: CostModel,
            rng: np.random.Generator | None = None) -> int:
    cycles = base_cost(record, prev_path, model)
    if model.noise_sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when noise_sigma > 0")
        cycles = max(1, int(round(cycles + rng.normal(0.0, model.noise_sigma))))
    return cycles


def noisy_total(base_counts: Counter, sigma: float, rng: np.random.Generator | None) -> int:
    """Sum of per-delivery costs given a histogram of noiseless costs.

    Same distribution as summing :func:`cost_of` over the deliveries; draws
    are taken in ascending order of base cost so results are seed-stable.
    """
    if sigma <= 0:
        return sum(b * n for b, n in base_counts.items())
    total = 0
    for b in sorted(base_counts):
        n = base_counts[b]
        draws = np.rint(b + rng.normal(0.0, sigma, size=n))
        total += int(np.maximum(draws, 1).sum())
    return total


@dataclass(frozen=True)
class Measurement:
    total_cycles: int
    total_energy: float


def measure_sequence(records: Iterable[DeliveryRecord], model: CostModel,
                     rng: np.random.Generator | None = None) -> Measurement:
    prev: dict[int, Path | None] = {}
    cycles = 0
    energy = 0.0
    for rec in records:
        cycles += cost_of(rec, prev.get(rec.thread_id), model, rng)
        energy += rec.block.uop_count * model.energy_per_uop(rec.path)
        prev[rec.thread_id] = rec.path
    return Measurement(cycles, energy)


@dataclass(frozen=True)
class TraceSample:
    index: int
    value: float
    timestamp: float
    kind: str = "energy"


class RaplCounter:
    """Energy counter that only publishes at fixed update boundaries."""

    def __init__(self, timestamps: Sequence[float], cumulative: Sequence[float],
                 update_interval_s: float = RAPL_INTERVAL_S):
        if update_interval_s <= 0:
            raise ValueError("update_interval_s must be positive")
        ts = np.asarray(timestamps, dtype=float)
        if ts.size and np.any(np.diff(ts) < 0):
            raise ValueError("timestamps must be non-decreasing")
        self.timestamps = ts
        self.cumulative = np.asarray(cumulative, dtype=float)
        self.interval = update_interval_s

    def boundary(self, t: float) -> float:
        # tolerate float error for reads sitting exactly on a boundary
        return math.floor(t / self.interval + 1e-9) * self.interval

    def value_at(self, t: float) -> float:
        """Accumulated energy up to time ``t`` (no quantization)."""
        i = np.searchsorted(self.timestamps, t + 1e-15, side="right")
        return float(self.cumulative[i - 1]) if i else 0.0

    def read(self, t: float) -> float:
        return self.value_at(self.boundary(t))


def rapl_sample(trace: Sequence[TraceSample], update_interval_s: float = RAPL_INTERVAL_S,
                read_times: Sequence[float] | None = None) -> list[TraceSample]:
    """Read a cumulative energy trace the way a RAPL reader would see it.

    A read between two updates returns the value published at the last
    boundary.  Without ``read_times`` the counter is read once per boundary
    across the trace span.
    """
    counter = RaplCounter([s.timestamp for s in trace], [s.value for s in trace], update_interval_s)
    if read_times is None:
        end = trace[-1].timestamp if trace else 0.0
        n = int(math.floor(end / update_interval_s + 1e-9))
        read_times = [k * update_interval_s for k in range(n + 1)]
    return [TraceSample(i, counter.read(t), t, "energy") for i, t in enumerate(read_times)]


HISTOGRAM_LABELS = ("LSD", "DSB", "MITE+DSB")


def path_samples(model: CostModel, samples: int, rng: np.random.Generator) -> dict[str, list[int]]:
    """Per-block cycle samples for steady LSD, steady DSB, and DSB-to-MITE deliveries."""
    steady = {
        "LSD": model.cycles_lsd,
        "DSB": model.cycles_dsb,
        "MITE+DSB": model.cycles_mite + model.dsb_to_mite,
    }
    out = {}
    for label in HISTOGRAM_LABELS:
        base = steady[label]
        if model.noise_sigma > 0:
            vals = np.maximum(np.rint(base + rng.normal(0.0, model.noise_sigma, size=samples)), 1)
            out[label] = [int(v) for v in vals]
        else:
            out[label] = [base] * samples
    return out


def histogram_rows(samples: dict[str, list[int]], bin_width: int = 1) -> list[tuple[int, int, int, str]]:
    """(bin_low, bin_high, count, path_label) rows, empty bins omitted."""
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    rows = []
    for label, vals in samples.items():
        counts = Counter((v // bin_width) * bin_width for v in vals)
        for low in sorted(counts):
            rows.append((low, low + bin_width, counts[low], label))
    return rows


def ascii_histogram(rows: Sequence[tuple[int, int, int, str]], width: int = 50) -> str:
    if not rows:
        return ""
    peak = max(r[2] for r in rows)
    lines = []
    for label in dict.fromkeys(r[3] for r in rows):
        lines.append(f"{label}:")
        for low, high, count, lab in rows:
            if lab != label:
                continue
            bar = "#" * max(1, round(width * count / peak))
            lines.append(f"  [{low:>5},{high:>5}) {count:>7} {bar}")
    return "\n".join(lines) + "\n"
