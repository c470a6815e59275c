"""Spectre-style disclosure through the micro-op cache.

A transient window executes one mix block mapped to DSB set ``chunk`` (a
5-bit secret value).  The block is fetched through MITE and fills the DSB,
evicting one of the attacker's pre-planted probe blocks in that set.  The
attacker then times an 8-block probe chain per set; the evicted chain misses
in cascade and shows up as the slowest set.

Nothing about speculation is modelled beyond a flag on the delivery: the
transient access has no architectural effect but updates the frontend.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .frontend import DsbGeometry, Frontend, MixBlock
from .timing import CostModel, base_cost, noisy_total

PROBE_BASE = 0x100_0000


def parse_secret(secret: str, rng: np.random.Generator | None = None,
                 chunks: int = 32, bits: int = 5) -> tuple[int, ...]:
    """``"random"`` draws ``chunks`` values; anything else is read as hex and cut into 5-bit chunks.

    The final chunk is zero-padded on the right.
    """
    if secret == "random":
        if rng is None:
            raise ValueError("a random generator is required for a random secret")
        return tuple(int(v) for v in rng.integers(0, 1 << bits, size=chunks))
    text = secret[2:] if secret.lower().startswith("0x") else secret
    if not text:
        raise ValueError("empty secret")
    try:
        value = int(text, 16)
    except ValueError:
        raise ValueError(f"secret must be hex or 'random', got {secret!r}") from None
    nbits = 4 * len(text)
    stream = format(value, f"0{nbits}b")
    stream += "0" * (-len(stream) % bits)
    return tuple(int(stream[i:i + bits], 2) for i in range(0, len(stream), bits))


@dataclass(frozen=True)
class ProbeResult:
    recovered: int | None
    per_set_cycles: tuple[int, ...]
    added_l1i_misses: int
    ambiguous: bool


@dataclass
class SpectreScenario:
    secret: tuple[int, ...]
    train_iterations: int = 0  # no branch predictor is modelled; kept for the experiment shape
    dsb: DsbGeometry = field(default_factory=DsbGeometry)

    def __post_init__(self):
        top = self.dsb.sets
        for c in self.secret:
            if not 0 <= c < top:
                raise ValueError(f"chunk {c} outside 0..{top - 1}")
        stride = self.dsb.sets * self.dsb.window_bytes
        w = self.dsb.window_bytes
        n = self.dsb.ways
        self.probes = [[MixBlock(PROBE_BASE + k * stride + s * w, 25, 5, 0,
                                 PROBE_BASE + ((k + 1) % n) * stride + s * w) for k in range(n)]
                       for s in range(self.dsb.sets)]
        self.transient = [MixBlock(PROBE_BASE + n * stride + s * w) for s in range(self.dsb.sets)]

    def prime(self, fe: Frontend, rounds: int = 2) -> None:
        """Warm the transient blocks' cache lines, then plant the probe chains."""
        for t in self.transient:
            fe.access_block(0, t)
        fe.end_iteration(0)
        for _ in range(rounds):
            for chain in self.probes:
                for b in chain:
                    fe.access_block(0, b)
                fe.end_iteration(0)

    def transient_encode(self, fe: Frontend, chunk: int) -> None:
        if not 0 <= chunk < self.dsb.sets:
            raise ValueError(f"chunk {chunk} outside 0..{self.dsb.sets - 1}")
        fe.access_block(0, self.transient[chunk], speculative=True)
        fe.end_iteration(0)

    def margin(self, model: CostModel) -> float:
        """Lead the slowest set needs over the runner-up to count as a unique outlier."""
        n = self.dsb.ways
        return 0.5 * (model.cycles_mite - model.cycles_dsb) + 3 * model.noise_sigma * n ** 0.5

    def probe_all_sets(self, fe: Frontend, model: CostModel,
                       rng: np.random.Generator | None = None, l1i_before: int | None = None) -> ProbeResult:
        """Time every probe chain, set 0 first; the slowest chain names the secret."""
        if model.noise_sigma > 0 and rng is None:
            raise ValueError("a random generator is required when noise_sigma > 0")
        start = fe.counters.l1i_misses if l1i_before is None else l1i_before
        times = []
        for chain in self.probes:
            costs = Counter()
            for b in chain:
                rec = fe.access_block(0, b)
                costs[base_cost(rec, rec.prev_path, model)] += 1
            fe.end_iteration(0)
            times.append(noisy_total(costs, model.noise_sigma, rng))
        order = sorted(range(len(times)), key=lambda s: (-times[s], s))
        lead = times[order[0]] - times[order[1]]
        ambiguous = lead <= self.margin(model)
        return ProbeResult(None if ambiguous else order[0], tuple(times),
                           fe.counters.l1i_misses - start, ambiguous)

    def run(self, fe: Frontend, model: CostModel, rng: np.random.Generator | None = None) -> list[ProbeResult]:
        """Prime once, then encode and probe every chunk of the secret."""
        self.prime(fe)
        results = []
        for chunk in self.secret:
            before = fe.counters.l1i_misses
            self.transient_encode(fe, chunk)
            results.append(self.probe_all_sets(fe, model, rng, l1i_before=before))
        return results


def spectre_csv(scenario: SpectreScenario, results: list[ProbeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    sets = scenario.dsb.sets
    w.writerow(["chunk_index", "true_value", "recovered_value"]
               + [f"set{s}_cycles" for s in range(sets)] + ["added_l1i_misses"])
    for i, (true, res) in enumerate(zip(scenario.secret, results)):
        rec = "" if res.recovered is None else res.recovered
        w.writerow([i, true, rec, *res.per_set_cycles, res.added_l1i_misses])
    return buf.getvalue()
