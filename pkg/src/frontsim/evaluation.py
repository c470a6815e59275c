"""Channel metrics and experiment drivers: edit distance, rates, message patterns, d-sweeps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .channels import BitMessage, ChannelError, ChannelParams, CovertChannel, Transmission
from .frontend import Frontend
from .timing import CostModel

PATTERNS = ("all0", "all1", "alternating", "random")


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs (Wagner-Fischer, two rows)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1,            # delete
                           cur[j - 1] + 1,         # insert
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def transmission_rate(bits_sent: int, elapsed_s: float) -> float:
    """Throughput in kbit/s."""
    if elapsed_s <= 0:
        raise ValueError("elapsed_s must be positive")
    return bits_sent / elapsed_s / 1000


def error_rate(sent: Sequence, received: Sequence) -> float:
    if not sent:
        return 0.0
    return edit_distance(sent, received) / len(sent)


def gen_message(pattern: str, length: int, seed: int | None = None) -> BitMessage:
    if length < 0:
        raise ValueError("length must be >= 0")
    if pattern == "all0":
        bits = (0,) * length
    elif pattern == "all1":
        bits = (1,) * length
    elif pattern == "alternating":
        bits = tuple(i % 2 for i in range(length))
    elif pattern == "random":
        bits = tuple(int(x) for x in np.random.default_rng(seed).integers(0, 2, size=length))
    else:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    return BitMessage(bits, pattern)


@dataclass(frozen=True)
class ChannelReport:
    variant: str
    d: int
    M: int
    p: int
    q: int
    pattern: str
    bits_sent: int
    bits_received: int
    edit_distance: int
    error_rate: float
    tr_rate_kbps: float
    seed: int

    CSV_FIELDS = ("variant", "d", "M", "p", "q", "pattern", "bits_sent", "bits_received",
                  "edit_distance", "error_rate", "tr_rate_kbps", "seed")

    @classmethod
    def from_transmission(cls, params: ChannelParams, tx: Transmission, seed: int) -> ChannelReport:
        p, q = params.iterations()
        dist = edit_distance(tx.sent.bits, tx.received.bits)
        n = len(tx.sent)
        rate = transmission_rate(n, tx.elapsed_s) if tx.elapsed_s > 0 else 0.0
        return cls(params.variant, params.d, params.M, p, q, tx.sent.pattern, n, len(tx.received),
                   dist, dist / n if n else 0.0, rate, seed)

    def row(self) -> list:
        return [f"{v:.6g}" if isinstance(v, float) else v
                for v in (getattr(self, f) for f in self.CSV_FIELDS)]


def run_channel(params: ChannelParams, model: CostModel, message: BitMessage, seed: int,
                frontend_factory: Callable[[], Frontend] = Frontend,
                calibration_bits: int = 32,
                rng: np.random.Generator | None = None) -> tuple[ChannelReport, Transmission]:
    """Calibrate a fresh channel and send ``message`` through it.

    Noise is drawn from ``rng``, or from a generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    ch = CovertChannel(params, frontend_factory(), model, rng)
    ch.calibrate(calibration_bits)
    tx = ch.transmit(message)
    return ChannelReport.from_transmission(params, tx, seed), tx


def sweep_d(variant: str, d_range: Iterable[int], params: ChannelParams, model: CostModel,
            message: BitMessage, seed: int,
            frontend_factory: Callable[[], Frontend] = Frontend, calibration_bits: int = 32
            ) -> tuple[list[ChannelReport], list[tuple[int, str]]]:
    """One transmission per d; invalid d values are skipped with their reason.

    Every point reuses ``seed`` so that the only thing varying is d.
    """
    reports, skipped = [], []
    for d in d_range:
        point = replace(params, variant=variant, d=d)
        try:
            point.validate(frontend_factory().dsb_geom)
        except ChannelError as exc:
            skipped.append((d, str(exc)))
            continue
        reports.append(run_channel(point, model, message, seed, frontend_factory, calibration_bits)[0])
    return reports, skipped


def reports_csv(reports: Iterable[ChannelReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ChannelReport.CSV_FIELDS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
