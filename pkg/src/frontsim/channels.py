"""Covert-channel senders and receivers built on the simulated frontend.

Every variant follows the same three steps per bit (init, encode, decode)
and differs in which blocks each party touches:

``mt_evict``        receiver loops over ``d`` blocks of set x; for a 1 the sender
                    (other hardware thread) adds ``N+1-d`` blocks of set x.
``mt_misalign``     as above, but the sender's ``M-d`` blocks are misaligned and
                    only flush the LSD; a 1 makes the receiver *faster*.
``nonmt_evict``     one thread does all three steps under one timer; a 0 is
                    either ``N+1-d`` blocks of set y (stealthy) or nothing (fast).
``nonmt_misalign``  one-thread misalignment; a 0 is the aligned twin blocks
                    (stealthy) or nothing (fast).
``slow_switch``     an LCP-heavy loop whose instruction order carries the bit.

The simulation of a bit is deterministic given the frontend state, so bits
are memoised on (state, bit) and repeated loop iterations are fast-forwarded
once the state enters a cycle.  Noise is drawn afterwards from the recorded
histogram of noiseless delivery costs.
"""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .frontend import DsbGeometry, Frontend, FrontendCounters, MixBlock, Path
from .timing import RAPL_INTERVAL_S, CostModel, base_cost, noisy_total

VARIANTS = ("mt_evict", "mt_misalign", "nonmt_evict", "nonmt_misalign", "slow_switch")
MT_VARIANTS = frozenset({"mt_evict", "mt_misalign"})
MISALIGN_VARIANTS = frozenset({"mt_misalign", "nonmt_misalign"})

CHANNEL_BASE = 0x40_0000
SLOW_SWITCH_BASE = 0x80_0000
ADD_BYTES = 4
LCP_ADD_BYTES = 5


class ChannelError(ValueError):
    """Invalid channel parameters."""


class CalibrationError(RuntimeError):
    """Calibration saw no separation between 0s and 1s."""


@dataclass(frozen=True)
class BitMessage:
    bits: tuple[int, ...]
    pattern: str = "custom"

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("bits must be 0 or 1")

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(map(str, self.bits))

    @classmethod
    def from_string(cls, s: str, pattern: str = "custom") -> BitMessage:
        return cls(tuple(int(c) for c in s), pattern)


@dataclass(frozen=True)
class ChannelParams:
    variant: str = "nonmt_evict"
    stealth: str = "fast"
    d: int | None = None
    M: int = 8
    p: int | None = None
    q: int | None = None
    r: int = 16
    target_set: int = 0
    alternate_set: int | None = None
    enclave: bool = False
    entry_exit_cycles: int = 8000
    enclave_iterations: int = 1000
    threshold_alpha: float = 0.5
    measure: str = "timing"
    rapl_interval_s: float = RAPL_INTERVAL_S

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", 5 if self.variant in MISALIGN_VARIANTS else 6)

    @property
    def multithreaded(self) -> bool:
        return self.variant in MT_VARIANTS

    def iterations(self) -> tuple[int, int]:
        """Effective (p, q) after defaults and enclave override."""
        if self.enclave:
            return self.enclave_iterations, self.enclave_iterations
        if self.measure == "power":
            default = (240_000, 240_000)
        elif self.multithreaded:
            default = (1000, 100)
        else:
            default = (10, 10)
        p = default[0] if self.p is None else self.p
        q = default[1] if self.q is None else self.q
        return p, q

    def y(self, sets: int = 32) -> int:
        return (self.target_set + 1) % sets if self.alternate_set is None else self.alternate_set

    def validate(self, geometry: DsbGeometry = DsbGeometry()) -> None:
        n = geometry.ways
        if self.variant not in VARIANTS:
            raise ChannelError(f"unknown variant {self.variant!r}")
        if self.stealth not in ("stealthy", "fast"):
            raise ChannelError("stealth must be 'stealthy' or 'fast'")
        if self.measure not in ("timing", "power"):
            raise ChannelError("measure must be 'timing' or 'power'")
        if self.measure == "power" and self.variant not in ("nonmt_evict", "nonmt_misalign"):
            raise ChannelError("power measurement is only modelled for non-MT eviction/misalignment")
        if not 0 < self.threshold_alpha < 1:
            raise ChannelError("threshold_alpha must lie in (0, 1)")
        if not 0 <= self.target_set < geometry.sets:
            raise ChannelError("target_set out of range")
        if not 0 <= self.y(geometry.sets) < geometry.sets or self.y(geometry.sets) == self.target_set:
            raise ChannelError("alternate_set must be a different, valid set")
        if self.variant != "slow_switch" and not 1 <= self.d <= n:
            raise ChannelError(f"d must satisfy 1 <= d < N+1 (N={n}), got d={self.d}")
        if self.variant in MISALIGN_VARIANTS:
            if not self.M <= n:
                raise ChannelError(f"M must satisfy M < N+1 (N={n}), got M={self.M}")
            if not self.d < self.M:
                raise ChannelError(f"d must be smaller than M, got d={self.d}, M={self.M}")
        if self.variant == "slow_switch" and self.r < 1:
            raise ChannelError("r must be >= 1")
        p, q = self.iterations()
        if p < 1 or q < 1:
            raise ChannelError("p and q must be >= 1")
        if self.multithreaded:
            if p % q:
                raise ChannelError(f"MT variants need q | p, got p={p}, q={q}")
        elif p != q:
            raise ChannelError(f"non-MT variants need p == q, got p={p}, q={q}")
        if self.entry_exit_cycles < 0:
            raise ChannelError("entry_exit_cycles must be >= 0")
        if self.rapl_interval_s <= 0:
            raise ChannelError("rapl_interval_s must be positive")


def build_block_chain(count: int, set_index: int, misaligned: Sequence[bool] | None = None,
                      base: int = 0, first_slot: int = 0,
                      geometry: DsbGeometry = DsbGeometry()) -> list[MixBlock]:
    """Canonical blocks that all map to ``set_index``, chained into a closed loop.

    Block ``k`` sits at ``base + (first_slot + k) * stride + set_index * window``
    with ``stride = sets * window`` (1 KiB by default); misaligned entries are
    shifted by half a window.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= set_index < geometry.sets:
        raise ValueError(f"set_index {set_index} out of range")
    stride = geometry.sets * geometry.window_bytes
    if base % stride:
        raise ValueError("base must be a multiple of the set stride")
    if misaligned is None:
        misaligned = [False] * count
    if len(misaligned) != count:
        raise ValueError("misaligned must have one flag per block")
    addrs = [base + (first_slot + k) * stride + set_index * geometry.window_bytes
             + (geometry.window_bytes // 2 if misaligned[k] else 0) for k in range(count)]
    return [MixBlock(a, 25, 5, 0, addrs[(k + 1) % count]) for k, a in enumerate(addrs)]


def lcp_add_block(r: int, mixed: bool, addr: int) -> MixBlock:
    """Loop body of ``r`` plain and ``r`` LCP one-uop adds.

    ``mixed`` interleaves them (plain, LCP, plain, LCP, ...); otherwise all
    plain adds come first.
    """
    pattern = (False, True) * r if mixed else (False,) * r + (True,) * r
    return MixBlock(addr, r * (ADD_BYTES + LCP_ADD_BYTES), 2 * r, r, addr, pattern)


# -- per-bit bookkeeping --------------------------------------------------------

TIMED, ELAPSED, PARALLEL = "timed", "elapsed", "parallel"


@dataclass
class _IterTally:
    timed: Counter = field(default_factory=Counter)
    paths: Counter = field(default_factory=Counter)
    untimed_cycles: int = 0
    energy: float = 0.0

    @property
    def cycles(self) -> int:
        return sum(b * n for b, n in self.timed.items()) + self.untimed_cycles


@dataclass
class BitTally:
    """Noiseless record of one bit: iteration tallies in run-length form."""

    segments: list[tuple[list[_IterTally], int]] = field(default_factory=list)
    counters: FrontendCounters = field(default_factory=FrontendCounters)

    def _flat(self):
        for tallies, reps in self.segments:
            if reps:
                for t in tallies:
                    yield t, reps

    @property
    def timed(self) -> Counter:
        out = Counter()
        for t, reps in self._flat():
            for b, n in t.timed.items():
                out[b] += n * reps
        return out

    @property
    def paths(self) -> Counter:
        out = Counter()
        for t, reps in self._flat():
            for k, n in t.paths.items():
                out[k] += n * reps
        return out

    @property
    def untimed_cycles(self) -> int:
        return sum(t.untimed_cycles * reps for t, reps in self._flat())

    @property
    def energy(self) -> float:
        return sum(t.energy * reps for t, reps in self._flat())

    @property
    def cycles(self) -> int:
        return sum(t.cycles * reps for t, reps in self._flat())

    def energy_at(self, cycles: float) -> float:
        """Energy of the iterations completed within the first ``cycles`` cycles."""
        done_c, done_e = 0, 0.0
        for tallies, reps in self.segments:
            if not reps or not tallies:
                continue
            span = sum(t.cycles for t in tallies)
            span_e = sum(t.energy for t in tallies)
            if span > 0:
                full = min(reps, int((cycles - done_c) // span)) if cycles >= done_c else 0
            else:
                full = reps
            done_c += full * span
            done_e += full * span_e
            if full < reps:
                for t in tallies:
                    if done_c + t.cycles > cycles:
                        return done_e
                    done_c += t.cycles
                    done_e += t.energy
                return done_e
        return done_e


@dataclass(frozen=True)
class BitResult:
    bit: int
    observation: float
    elapsed_cycles: float
    tally: BitTally


@dataclass(frozen=True)
class Calibration:
    threshold: float
    polarity: str  # "above" or "below": which side of the threshold means 1
    mean0: float
    mean1: float

    @property
    def gap(self) -> float:
        return abs(self.mean1 - self.mean0)

    def classify(self, observation: float) -> int:
        if self.polarity == "above":
            return int(observation > self.threshold)
        return int(observation < self.threshold)


@dataclass
class Transmission:
    sent: BitMessage
    received: BitMessage
    elapsed_s: float
    observations: list[float]
    l1i_misses: int
    counters: FrontendCounters


class CovertChannel:
    """One configured channel bound to a frontend, a cost model and a random source."""

    def __init__(self, params: ChannelParams, frontend: Frontend, model: CostModel,
                 rng: np.random.Generator | None = None, fast_forward: bool = True):
        params.validate(frontend.dsb_geom)
        if model.noise_sigma > 0 and rng is None:
            raise ValueError("a random generator is required when noise_sigma > 0")
        self.params = params
        self.fe = frontend
        self.model = model
        self.rng = rng
        self.fast_forward = fast_forward
        self.calibration: Calibration | None = None
        self._memo: dict[tuple, tuple[BitTally, tuple]] = {}
        self._clock_cycles = 0.0
        self._energy_total = 0.0
        self._history: list[tuple[float, float, BitTally]] = []
        self._layout()

    # -- block layout ------------------------------------------------------------

    def _layout(self) -> None:
        p, g = self.params, self.fe.dsb_geom
        n, x = g.ways, p.target_set
        self.receiver: list[MixBlock] = []
        self.encode1: list[MixBlock] = []
        self.encode0: list[MixBlock] = []
        if p.variant == "slow_switch":
            self.encode1 = [lcp_add_block(p.r, True, SLOW_SWITCH_BASE)]
            self.encode0 = [lcp_add_block(p.r, False, SLOW_SWITCH_BASE + 0x1000)]
            return
        self.receiver = build_block_chain(p.d, x, base=CHANNEL_BASE, geometry=g)
        if p.variant in MISALIGN_VARIANTS:
            k = p.M - p.d
            self.encode1 = build_block_chain(k, x, [True] * k, CHANNEL_BASE, p.d, g)
            if p.variant == "nonmt_misalign" and p.stealth == "stealthy":
                self.encode0 = build_block_chain(k, x, None, CHANNEL_BASE, p.d, g)
        else:
            k = n + 1 - p.d
            self.encode1 = build_block_chain(k, x, None, CHANNEL_BASE, p.d, g)
            if p.variant == "nonmt_evict" and p.stealth == "stealthy":
                self.encode0 = build_block_chain(k, p.y(g.sets), None, CHANNEL_BASE, p.d, g)

    # -- simulation ----------------------------------------------------------------

    def _touch(self, tally: _IterTally, thread: int, block: MixBlock, role: str) -> None:
        rec = self.fe.access_block(thread, block)
        cost = base_cost(rec, rec.prev_path, self.model)
        tally.energy += block.uop_count * self.model.energy_per_uop(rec.path)
        if role == TIMED:
            tally.timed[cost] += 1
            tally.paths[rec.path] += 1
        elif role == ELAPSED:
            tally.untimed_cycles += cost

    def _loop(self, tally: _IterTally, thread: int, blocks: Sequence[MixBlock], role: str) -> None:
        for b in blocks:
            self._touch(tally, thread, b, role)
        self.fe.end_iteration(thread)

    def _repeat(self, n: int, step: Callable[[], _IterTally], out: BitTally) -> None:
        """Run ``step`` n times, fast-forwarding once the frontend state cycles.

        The frontend is deterministic, so once a state repeats the iterations
        in between repeat forever; their tallies and counter deltas are
        replicated instead of simulated.
        """
        fe = self.fe
        seen: dict[tuple, int] = {}
        history: list[tuple[_IterTally, FrontendCounters]] = []
        prefix: list[_IterTally] = []
        i = 0
        while i < n:
            sig = fe.snapshot() if self.fast_forward else None
            if sig is not None and sig in seen:
                j = seen[sig]
                cycle = history[j:i]
                reps, rem = divmod(n - i, len(cycle))
                out.segments.append((prefix, 1))
                out.segments.append(([t for t, _ in cycle], reps))
                for _, c in cycle:
                    fe.counters.add(c, reps)
                    out.counters.add(c, reps)
                tail = []
                for _ in range(rem):
                    before = fe.counters.copy()
                    tail.append(step())
                    out.counters.add(fe.counters.delta(before))
                out.segments.append((tail, 1))
                return
            if sig is not None:
                seen[sig] = i
            before = fe.counters.copy()
            t = step()
            delta = fe.counters.delta(before)
            out.counters.add(delta)
            history.append((t, delta))
            prefix.append(t)
            i += 1
        out.segments.append((prefix, 1))

    def _simulate_bit(self, m: int) -> BitTally:
        p = self.params
        reps_p, reps_q = p.iterations()
        out = BitTally()
        if p.variant == "slow_switch":
            body = self.encode1 if m else self.encode0

            def step():
                t = _IterTally()
                self._loop(t, 0, body, TIMED)
                return t

            self._repeat(reps_p, step, out)
        elif p.multithreaded:
            per_round = reps_p // reps_q
            recv, send = self.receiver, self.encode1

            def init():
                t = _IterTally()
                self._loop(t, 0, recv, ELAPSED)
                return t

            def round_():
                t = _IterTally()
                if m:
                    for i in range(max(len(recv), len(send))):
                        if i < len(recv):
                            self._touch(t, 0, recv[i], TIMED)
                        if i < len(send):
                            self._touch(t, 1, send[i], PARALLEL)
                    self.fe.end_iteration(0)
                    self.fe.end_iteration(1)
                else:
                    self._loop(t, 0, recv, TIMED)
                for _ in range(per_round - 1):
                    self._loop(t, 0, recv, TIMED)
                return t

            self._repeat(per_round, init, out)
            self._repeat(reps_q, round_, out)
        else:
            enc = self.encode1 if m else self.encode0

            def step():
                t = _IterTally()
                for b in self.receiver:
                    self._touch(t, 0, b, TIMED)
                for b in enc:
                    self._touch(t, 0, b, TIMED)
                for b in self.receiver:
                    self._touch(t, 0, b, TIMED)
                self.fe.end_iteration(0)
                return t

            self._repeat(reps_p, step, out)
        return out

    def bit_tally(self, m: int) -> BitTally:
        """Noiseless simulation of one bit, memoised on the starting state."""
        if m not in (0, 1):
            raise ValueError("bit must be 0 or 1")
        if not self.fast_forward:
            return self._simulate_bit(m)
        key = (self.fe.snapshot(), m)
        hit = self._memo.get(key)
        if hit is not None:
            tally, end = hit
            self.fe.restore(end)
            self.fe.counters.add(tally.counters)
            return tally
        tally = self._simulate_bit(m)
        self._memo[key] = (tally, self.fe.snapshot())
        return tally

    def run_bit(self, m: int) -> BitResult:
        p = self.params
        tally = self.bit_tally(m)
        overhead = p.entry_exit_cycles if p.enclave else 0
        start = self._clock_cycles
        if p.measure == "power":
            elapsed = tally.cycles + overhead
            self._history.append((start, self._energy_total, tally))
            self._clock_cycles += elapsed
            self._energy_total += tally.energy
            observation = self._rapl_read(self._clock_cycles) - self._rapl_read(start)
        else:
            timed = noisy_total(tally.timed, self.model.noise_sigma, self.rng)
            observation = timed + overhead
            elapsed = timed + tally.untimed_cycles + overhead
            self._clock_cycles += elapsed
        return BitResult(m, float(observation), float(elapsed), tally)

    def _rapl_read(self, cycles: float) -> float:
        """Published RAPL value at channel time ``cycles``."""
        interval = self.params.rapl_interval_s * self.model.core_freq_hz
        boundary = np.floor(cycles / interval + 1e-9) * interval
        starts = [h[0] for h in self._history]
        i = bisect.bisect_right(starts, boundary) - 1
        if i < 0:
            return 0.0
        start, energy0, tally = self._history[i]
        return energy0 + tally.energy_at(boundary - start)

    # -- protocol ------------------------------------------------------------------

    def warm_up(self, bits: int = 4) -> None:
        for i in range(bits):
            self.run_bit(i % 2)

    def calibrate(self, bits: int = 32, warmup_bits: int = 4) -> Calibration:
        """Send an alternating pattern and put the threshold between the two means."""
        if bits < 2:
            raise ValueError("calibration needs at least two bits")
        self.warm_up(warmup_bits)
        obs = {0: [], 1: []}
        for i in range(bits):
            m = i % 2
            obs[m].append(self.run_bit(m).observation)
        mean0, mean1 = float(np.mean(obs[0])), float(np.mean(obs[1]))
        if mean0 == mean1:
            raise CalibrationError("0s and 1s produce identical observations; check the cost model")
        alpha = self.params.threshold_alpha
        threshold = mean0 + alpha * (mean1 - mean0)
        self.calibration = Calibration(threshold, "above" if mean1 > mean0 else "below", mean0, mean1)
        return self.calibration

    def transmit(self, message: BitMessage) -> Transmission:
        if self.calibration is None:
            raise RuntimeError("channel is not calibrated")
        before = self.fe.counters.copy()
        elapsed = 0.0
        obs, out = [], []
        for m in message.bits:
            res = self.run_bit(m)
            obs.append(res.observation)
            elapsed += res.elapsed_cycles
            out.append(self.calibration.classify(res.observation))
        delta = self.fe.counters.delta(before)
        return Transmission(message, BitMessage(tuple(out), message.pattern),
                            self.model.seconds(elapsed), obs, delta.l1i_misses, delta)


# -- functional entry points ----------------------------------------------------------


def run_bit(params: ChannelParams, m: int, state: Frontend, model: CostModel,
            rng: np.random.Generator | None = None) -> BitResult:
    return CovertChannel(params, state, model, rng).run_bit(m)


def calibrate_threshold(params: ChannelParams, state: Frontend, model: CostModel,
                        rng: np.random.Generator | None = None, bits: int = 32) -> Calibration:
    return CovertChannel(params, state, model, rng).calibrate(bits)


def transmit(params: ChannelParams, message: BitMessage, state: Frontend, model: CostModel,
             rng: np.random.Generator | None = None,
             calibration: Calibration | None = None) -> Transmission:
    ch = CovertChannel(params, state, model, rng)
    if calibration is None:
        ch.calibrate()
    else:
        ch.warm_up()
        ch.calibration = calibration
    return ch.transmit(message)


def decode_gap(params: ChannelParams, frontend_factory: Callable[[], Frontend],
               model: CostModel) -> tuple[float, int]:
    """Noiseless (decode-time gap, receiver blocks moved to MITE) for one bit pair."""
    ch = CovertChannel(params, frontend_factory(), replace(model, noise_sigma=0.0))
    cal = ch.calibrate(bits=8)
    one = ch.run_bit(1).tally.paths.get(Path.MITE, 0)
    zero = ch.run_bit(0).tally.paths.get(Path.MITE, 0)
    return cal.mean1 - cal.mean0, one - zero


