"""Structural model of the instruction-delivery paths of an x86-style frontend.

Three paths deliver micro-ops to the backend:

* the LSD replays a captured loop out of the decode queue,
* the DSB (micro-op cache) serves already-decoded 32-byte windows,
* MITE decodes from the L1I and fills the DSB as a side effect.

Inclusivity holds in both directions we model: evicting a window from the
DSB flushes any LSD capture that uses it.  The L1I is tracked as a shadow
cache so that attacks can be checked for instruction-cache footprint.

Loop iterations are delimited explicitly with :meth:`Frontend.end_iteration`;
the LSD captures a loop body once it has seen it repeat ``warmup_iterations``
times back to back with every window resident in the DSB.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Iterable, Sequence


class Path(str, Enum):
    LSD = "LSD"
    DSB = "DSB"
    MITE = "MITE"


@dataclass(frozen=True)
class MixBlock:
    """An addressable run of instructions ending in a jump.

    ``lcp_pattern`` optionally lists, per instruction, whether it carries a
    length-changing prefix.  Without it the LCP instructions are assumed to
    follow the plain ones.
    """

    start_addr: int
    byte_len: int = 25
    uop_count: int = 5
    lcp_count: int = 0
    next_addr: int | None = None
    lcp_pattern: tuple[bool, ...] | None = None

    def __post_init__(self):
        if self.start_addr < 0:
            raise ValueError("start_addr must be non-negative")
        if self.byte_len < 1:
            raise ValueError("byte_len must be >= 1")
        if self.uop_count < 1:
            raise ValueError("uop_count must be >= 1")
        if self.lcp_pattern is not None and sum(self.lcp_pattern) != self.lcp_count:
            raise ValueError("lcp_pattern disagrees with lcp_count")

    @property
    def aligned(self) -> bool:
        return self.start_addr % 32 == 0

    @property
    def misaligned(self) -> bool:
        return self.start_addr % 32 == 16

    @property
    def dsb_line_eligible(self) -> bool:
        return self.byte_len <= 32 and self.uop_count <= 6

    @property
    def lcp_stalls(self) -> int:
        """Number of LCP instructions whose predecessor is a plain instruction."""
        if self.lcp_count == 0:
            return 0
        if self.lcp_pattern is None:
            return 1 if self.lcp_count < self.uop_count else 0
        p = self.lcp_pattern
        return sum(1 for i in range(1, len(p)) if p[i] and not p[i - 1])

    def windows(self, window_bytes: int = 32) -> range:
        first = self.start_addr // window_bytes
        last = (self.start_addr + self.byte_len - 1) // window_bytes
        return range(first, last + 1)

    def lines(self, line_bytes: int = 64) -> range:
        first = self.start_addr // line_bytes
        last = (self.start_addr + self.byte_len - 1) // line_bytes
        return range(first, last + 1)


def canonical_block(start_addr: int, next_addr: int | None = None) -> MixBlock:
    """The 4 x mov + jmp block: 25 bytes, 5 micro-ops."""
    return MixBlock(start_addr, 25, 5, 0, start_addr if next_addr is None else next_addr)


@dataclass(frozen=True)
class DsbGeometry:
    sets: int = 32
    ways: int = 8
    uops_per_line: int = 6
    window_bytes: int = 32

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"dsb.{f.name} must be >= 1")
        if self.sets % 2:
            raise ValueError("dsb.sets must be even so it can be split between two threads")

    @property
    def capacity_uops(self) -> int:
        return self.sets * self.ways * self.uops_per_line


@dataclass(frozen=True)
class LsdGeometry:
    capacity_uops: int = 64
    enabled: bool = True
    warmup_iterations: int = 2

    def __post_init__(self):
        if self.capacity_uops < 1:
            raise ValueError("lsd.capacity must be >= 1")
        if self.warmup_iterations < 1:
            raise ValueError("lsd.warmup must be >= 1")


@dataclass(frozen=True)
class L1iGeometry:
    size_bytes: int = 32768
    ways: int = 8
    line_bytes: int = 64

    def __post_init__(self):
        if min(self.size_bytes, self.ways, self.line_bytes) < 1:
            raise ValueError("l1i geometry values must be >= 1")
        if self.size_bytes % (self.ways * self.line_bytes):
            raise ValueError("l1i.size must be a multiple of ways * line")
        s = self.sets
        if s & (s - 1):
            raise ValueError("l1i set count must be a power of two")

    @property
    def sets(self) -> int:
        return self.size_bytes // (self.ways * self.line_bytes)


def dsb_set_index(addr: int, partitioned: bool = False, thread_id: int = 0,
                  geometry: DsbGeometry = DsbGeometry()) -> int:
    """DSB set of ``addr``: bits [9:5] at default geometry.

    When partitioned, thread 0 owns the lower half of the sets and thread 1
    the upper half; the index within a half drops the top index bit.
    """
    window = addr // geometry.window_bytes
    if not partitioned:
        return window % geometry.sets
    half = geometry.sets // 2
    return thread_id * half + window % half


def l1i_set_index(addr: int, geometry: L1iGeometry = L1iGeometry()) -> int:
    """L1I set of ``addr``: bits [11:6] at default geometry."""
    return (addr // geometry.line_bytes) % geometry.sets


# Compositions {aligned, misaligned} of same-set blocks observed to push the
# loop out of the LSD.  The all-misaligned case is handled separately.
LSD_FLUSH_COMPOSITIONS = frozenset({(5, 2), (6, 2), (3, 3), (4, 3), (5, 3), (7, 1)})
ALL_MISALIGNED_FLUSH_AT = 4


def misalignment_rule(aligned: int, misaligned: int) -> bool:
    """True when a same-set mix of aligned/misaligned blocks may stay in the LSD."""
    if aligned < 0 or misaligned < 0:
        raise ValueError("block counts must be non-negative")
    if aligned == 0 and misaligned >= ALL_MISALIGNED_FLUSH_AT:
        return False
    return (aligned, misaligned) not in LSD_FLUSH_COMPOSITIONS


@dataclass
class FrontendCounters:
    lsd_uops: int = 0
    dsb_uops: int = 0
    mite_uops: int = 0
    dsb_evictions: int = 0
    lsd_flushes: int = 0
    dsb_to_mite_switches: int = 0
    lsd_to_dsb_switches: int = 0
    lcp_stall_cycles: int = 0
    l1i_misses: int = 0
    l1i_accesses: int = 0

    def copy(self) -> FrontendCounters:
        return FrontendCounters(**self.as_dict())

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def delta(self, earlier: FrontendCounters) -> FrontendCounters:
        return FrontendCounters(**{k: v - getattr(earlier, k) for k, v in self.as_dict().items()})

    def add(self, other: FrontendCounters, times: int = 1) -> None:
        for k, v in other.as_dict().items():
            setattr(self, k, getattr(self, k) + v * times)

    @staticmethod
    def csv_header() -> list[str]:
        return [f.name for f in fields(FrontendCounters)]

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(list(self.as_dict().values()))
        return buf.getvalue()


@dataclass(frozen=True)
class DeliveryRecord:
    thread_id: int
    block: MixBlock
    path: Path
    prev_path: Path | None
    windows_touched: tuple[int, ...]
    evictions: int = 0
    l1i_misses: int = 0
    speculative: bool = False

    @property
    def cycles_class(self) -> Path:
        return self.path


@dataclass
class _Capture:
    body: tuple[MixBlock, ...]
    windows: frozenset[int]
    head_sets: dict[int, tuple[int, int]]
    pos: int = 0
    foreign: dict[int, frozenset[MixBlock]] = field(default_factory=dict)

    @property
    def uops(self) -> int:
        return sum(b.uop_count for b in set(self.body))


@dataclass
class _LoopTracker:
    current: list[MixBlock] = field(default_factory=list)
    last_body: tuple[MixBlock, ...] | None = None
    repeats: int = 0
    capture: _Capture | None = None
    prev_path: Path | None = None


class Frontend:
    """Mutable frontend state (``FrontendState``) plus the access rules."""

    def __init__(self, dsb: DsbGeometry = DsbGeometry(), lsd: LsdGeometry = LsdGeometry(),
                 l1i: L1iGeometry = L1iGeometry(), lcp_stall: int = 3):
        self.dsb_geom = dsb
        self.lcp_stall = lcp_stall
        self.lsd_geom = lsd
        self.l1i_geom = l1i
        # tag -> owning thread, kept in LRU order (first = least recent)
        self.dsb: list[OrderedDict[int, int]] = [OrderedDict() for _ in range(dsb.sets)]
        self.l1i: list[OrderedDict[int, None]] = [OrderedDict() for _ in range(l1i.sets)]
        self.active_threads = 1
        self.trackers = [_LoopTracker(), _LoopTracker()]
        self.counters = FrontendCounters()

    # -- mapping -----------------------------------------------------------

    @property
    def partitioned(self) -> bool:
        return self.active_threads == 2

    def set_of_window(self, tag: int, thread_id: int) -> int:
        return dsb_set_index(tag * self.dsb_geom.window_bytes, self.partitioned, thread_id,
                             self.dsb_geom)

    def window_resident(self, tag: int, thread_id: int) -> bool:
        return tag in self.dsb[self.set_of_window(tag, thread_id)]

    def lsd_capture(self, thread_id: int = 0) -> _Capture | None:
        return self.trackers[thread_id].capture

    # -- partitioning --------------------------------------------------------

    def set_partition_mode(self, active_threads: int) -> int:
        """Switch between one and two active threads; returns windows evicted."""
        if active_threads not in (1, 2):
            raise ValueError("active_threads must be 1 or 2")
        evicted = 0
        if active_threads == 2 and self.active_threads == 1:
            self.active_threads = 2
            for s, ways in enumerate(self.dsb):
                for tag, owner in list(ways.items()):
                    if self.set_of_window(tag, owner) != s:
                        del ways[tag]
                        evicted += 1
                        self._on_evict(tag)
        elif active_threads == 1 and self.active_threads == 2:
            self.active_threads = 1
            # lines are not relocated; captures whose windows now map elsewhere cannot stream
            for t, tr in enumerate(self.trackers):
                if tr.capture and not all(self.window_resident(w, t) for w in tr.capture.windows):
                    self._flush(tr)
        return evicted

    # -- core access -----------------------------------------------------------

    def access_block(self, thread_id: int, block: MixBlock, speculative: bool = False) -> DeliveryRecord:
        if thread_id not in (0, 1):
            raise ValueError("thread_id must be 0 or 1")
        tr = self.trackers[thread_id]
        tr.current.append(block)
        prev = tr.prev_path
        c = self.counters
        cap = tr.capture
        if cap is not None:
            if self.lsd_geom.enabled and cap.body[cap.pos] == block:
                cap.pos = (cap.pos + 1) % len(cap.body)
                c.lsd_uops += block.uop_count
                tr.prev_path = Path.LSD
                # the other thread's capture still sees this block in its sets
                self._note_foreign(thread_id, block)
                return DeliveryRecord(thread_id, block, Path.LSD, prev, ())
            # control left the captured loop
            tr.capture = None

        w = self.dsb_geom.window_bytes
        tags = tuple(block.windows(w))
        evictions = 0
        if block.lcp_count > 0 or not self._cacheable(block):
            path = Path.MITE
        elif all(self.window_resident(t, thread_id) for t in tags):
            path = Path.DSB
            for t in tags:
                ways = self.dsb[self.set_of_window(t, thread_id)]
                ways.move_to_end(t)
                ways[t] = thread_id
        else:
            path = Path.MITE
            for t in tags:
                evictions += self._fill(t, thread_id)
        misses = self._touch_l1i(block)

        if path is Path.DSB:
            c.dsb_uops += block.uop_count
        else:
            c.mite_uops += block.uop_count
            c.lcp_stall_cycles += block.lcp_stalls * self.lcp_stall
        if prev is Path.LSD:
            c.lsd_to_dsb_switches += 1
        if path is Path.MITE and prev in (Path.DSB, Path.LSD):
            c.dsb_to_mite_switches += 1
        tr.prev_path = path
        if path is not Path.LSD and block.lcp_count == 0:
            self._note_foreign(thread_id, block)
        return DeliveryRecord(thread_id, block, path, prev, tags, evictions, misses, speculative)

    def _cacheable(self, block: MixBlock) -> bool:
        return block.uop_count <= self.dsb_geom.uops_per_line * len(block.windows(self.dsb_geom.window_bytes))

    def _fill(self, tag: int, thread_id: int) -> int:
        ways = self.dsb[self.set_of_window(tag, thread_id)]
        if tag in ways:
            ways.move_to_end(tag)
            ways[tag] = thread_id
            return 0
        evicted = 0
        if len(ways) >= self.dsb_geom.ways:
            victim, _ = ways.popitem(last=False)
            evicted = 1
            self._on_evict(victim)
        ways[tag] = thread_id
        return evicted

    def _on_evict(self, tag: int) -> None:
        self.counters.dsb_evictions += 1
        for tr in self.trackers:
            if tr.capture is not None and tag in tr.capture.windows:
                self._flush(tr)

    def _flush(self, tr: _LoopTracker) -> None:
        tr.capture = None
        tr.repeats = 0
        self.counters.lsd_flushes += 1

    def _touch_l1i(self, block: MixBlock) -> int:
        misses = 0
        g = self.l1i_geom
        for line in block.lines(g.line_bytes):
            ways = self.l1i[line % g.sets]
            self.counters.l1i_accesses += 1
            if line in ways:
                ways.move_to_end(line)
                continue
            misses += 1
            if len(ways) >= g.ways:
                ways.popitem(last=False)
            ways[line] = None
        self.counters.l1i_misses += misses
        return misses

    def _note_foreign(self, thread_id: int, block: MixBlock) -> None:
        """Tally a non-loop block landing in a set used by a captured loop."""
        head = self.set_of_window(block.start_addr // self.dsb_geom.window_bytes, thread_id)
        for tr in self.trackers:
            cap = tr.capture
            if cap is None or head not in cap.head_sets or block in cap.body:
                continue
            seen = cap.foreign.get(head, frozenset())
            if block in seen:
                continue
            seen = seen | {block}
            cap.foreign[head] = seen
            a, m = cap.head_sets[head]
            fa, fm = _composition(seen)
            if not misalignment_rule(a + fa, m + fm):
                self._flush(tr)

    # -- loops -------------------------------------------------------------

    def end_iteration(self, thread_id: int = 0) -> bool:
        """Close the current loop iteration; returns True if the LSD now holds the loop."""
        tr = self.trackers[thread_id]
        body = tuple(tr.current)
        tr.current = []
        if not body:
            return tr.capture is not None
        if body == tr.last_body:
            tr.repeats = min(tr.repeats + 1, self.lsd_geom.warmup_iterations)
        else:
            tr.repeats = 1
            tr.last_body = body
        if tr.capture is not None:
            if tr.capture.body == body:
                tr.capture.pos = 0
                return True
            tr.capture = None
        if tr.repeats >= self.lsd_geom.warmup_iterations and self.lsd_qualifies(body, thread_id):
            tr.capture = self._make_capture(body, thread_id)
            return True
        return False

    def lsd_qualifies(self, body: Sequence[MixBlock], thread_id: int = 0) -> bool:
        if not self.lsd_geom.enabled or not body:
            return False
        distinct = set(body)
        if sum(b.uop_count for b in distinct) > self.lsd_geom.capacity_uops:
            return False
        if any(b.lcp_count or not self._cacheable(b) for b in distinct):
            return False
        w = self.dsb_geom.window_bytes
        if not all(self.window_resident(t, thread_id) for b in distinct for t in b.windows(w)):
            return False
        return all(misalignment_rule(a, m) for a, m in self._head_sets(distinct, thread_id).values())

    def _head_sets(self, blocks: Iterable[MixBlock], thread_id: int) -> dict[int, tuple[int, int]]:
        groups: dict[int, list[MixBlock]] = {}
        w = self.dsb_geom.window_bytes
        for b in blocks:
            groups.setdefault(self.set_of_window(b.start_addr // w, thread_id), []).append(b)
        return {s: _composition(bs) for s, bs in groups.items()}

    def _make_capture(self, body: tuple[MixBlock, ...], thread_id: int) -> _Capture:
        w = self.dsb_geom.window_bytes
        distinct = set(body)
        wins = frozenset(t for b in distinct for t in b.windows(w))
        return _Capture(body, wins, self._head_sets(distinct, thread_id))

    def run_loop(self, thread_id: int, body: Sequence[MixBlock], iterations: int = 1) -> list[DeliveryRecord]:
        out = []
        for _ in range(iterations):
            for b in body:
                out.append(self.access_block(thread_id, b))
            self.end_iteration(thread_id)
        return out

    # -- inspection ----------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = []
        limit = self.dsb_geom.ways
        for s, ways in enumerate(self.dsb):
            if len(ways) > limit:
                problems.append(f"set {s} holds {len(ways)} > {limit} windows")
        for t, tr in enumerate(self.trackers):
            if tr.capture is None:
                continue
            for tag in tr.capture.windows:
                if not self.window_resident(tag, t):
                    problems.append(f"thread {t} LSD window {tag:#x} not resident in DSB")
        return problems

    def snapshot(self) -> tuple:
        """Hashable structural state (counters excluded)."""
        trackers = []
        for tr in self.trackers:
            cap = None
            if tr.capture is not None:
                cap = (tr.capture.body, tr.capture.pos,
                       tuple(sorted((s, tuple(sorted(v, key=_block_key)))
                                    for s, v in tr.capture.foreign.items())))
            trackers.append((tuple(tr.current), tr.last_body, tr.repeats, cap, tr.prev_path))
        return (
            self.active_threads,
            tuple(tuple(ways.items()) for ways in self.dsb),
            tuple(tuple(ways) for ways in self.l1i),
            tuple(trackers),
        )

    def restore(self, snap: tuple) -> None:
        active, dsb, l1i, trackers = snap
        self.active_threads = active
        self.dsb = [OrderedDict(ways) for ways in dsb]
        self.l1i = [OrderedDict.fromkeys(ways) for ways in l1i]
        self.trackers = []
        for t, (current, last_body, repeats, cap, prev) in enumerate(trackers):
            tr = _LoopTracker(list(current), last_body, repeats, None, prev)
            if cap is not None:
                body, pos, foreign = cap
                tr.capture = self._make_capture(body, t)
                tr.capture.pos = pos
                tr.capture.foreign = {s: frozenset(v) for s, v in foreign}
            self.trackers.append(tr)


def _composition(blocks: Iterable[MixBlock]) -> tuple[int, int]:
    a = m = 0
    for b in blocks:
        if b.misaligned:
            m += 1
        elif b.aligned:
            a += 1
    return a, m


def _block_key(b: MixBlock) -> tuple:
    return (b.start_addr, b.byte_len, b.uop_count, b.lcp_count)


def lsd_try_capture(fe: Frontend, loop_trace: Sequence[MixBlock], thread_id: int = 0) -> bool:
    """Run a closed loop until the LSD has had its warm-up; report whether it captured it."""
    if not loop_trace:
        raise ValueError("loop_trace must be non-empty")
    if loop_trace[-1].next_addr != loop_trace[0].start_addr:
        raise ValueError("loop_trace is not closed")
    for _ in range(fe.lsd_geom.warmup_iterations + 1):
        fe.run_loop(thread_id, loop_trace)
        if fe.lsd_capture(thread_id) is not None:
            return True
    return False
