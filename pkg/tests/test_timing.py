from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frontsim.channels import lcp_add_block
from frontsim.frontend import DeliveryRecord, Frontend, MixBlock, Path, canonical_block
from frontsim.timing import (CostModel, RaplCounter, TraceSample, ascii_histogram, cost_of, histogram_rows, measure_sequence, noisy_total, path_samples,
                             rapl_sample)

import oracles

# the constants quoted for the formula examples (not the package defaults)
EXAMPLE = CostModel(cycles_lsd=5, cycles_dsb=7, cycles_mite=12, lsd_to_dsb=6, dsb_to_mite=10, lcp_stall=3)
EXAMPLE_D = dict(lsd=5, dsb=7, mite=12, lsd_to_dsb=6, dsb_to_mite=10, lcp_stall=3)


def rec(path, block=None, prev=None, thread=0):
    return DeliveryRecord(thread, block or canonical_block(0), path, prev, ())


def test_cost_lsd_after_lsd():
    assert cost_of(rec(Path.LSD), Path.LSD, EXAMPLE) == 5


def test_cost_dsb_after_lsd_pays_switch():
    assert cost_of(rec(Path.DSB), Path.LSD, EXAMPLE) == 13


def test_cost_mixed_lcp_block():
    mixed = MixBlock(0, 16 * 9, 32, 16, 0, (False, True) * 16)
    assert cost_of(rec(Path.MITE, mixed), Path.MITE, EXAMPLE) == 60


def test_cost_lsd_to_mite_pays_both_switches():
    assert cost_of(rec(Path.MITE), Path.LSD, EXAMPLE) == 12 + 6 + 10


@given(st.sampled_from(list(Path)), st.sampled_from([None, *Path]), st.integers(0, 8))
def test_cost_matches_formula_oracle(path, prev, lcp):
    pattern = (False, True) * lcp + (False,)
    block = MixBlock(0, 5 * len(pattern), len(pattern), lcp, 0, pattern)
    want = oracles.cost(path.value, prev.value if prev else None, EXAMPLE_D, lcp)
    assert cost_of(rec(path, block), prev, EXAMPLE) == want


def test_noise_requires_rng_and_is_floored():
    m = CostModel(noise_sigma=50)
    with pytest.raises(ValueError):
        cost_of(rec(Path.LSD), None, m)
    vals = [cost_of(rec(Path.LSD), None, m, np.random.default_rng(s)) for s in range(200)]
    assert min(vals) >= 1
    assert vals == [cost_of(rec(Path.LSD), None, m, np.random.default_rng(s)) for s in range(200)]


def test_default_orderings():
    m = CostModel()
    assert m.orderings_hold()
    assert m.cycles_dsb < m.cycles_lsd < m.cycles_mite
    assert m.energy_lsd < m.energy_dsb < m.energy_mite
    assert m.lcp_stall <= 3


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(cycles_lsd=-1)
    with pytest.raises(ValueError):
        CostModel(core_freq_hz=0)
    assert not CostModel(cycles_lsd=5, cycles_dsb=5, cycles_mite=5).orderings_hold()


def test_measure_empty():
    m = measure_sequence([], CostModel())
    assert (m.total_cycles, m.total_energy) == (0, 0.0)


def test_measure_eight_lsd_blocks():
    recs = [rec(Path.LSD, prev=Path.LSD) for _ in range(8)]
    m = measure_sequence(recs, EXAMPLE)
    assert m.total_cycles == 40 and m.total_energy == 40 * EXAMPLE.energy_lsd


def test_measure_sequence_matches_summation_oracle():
    fe = Frontend()
    blocks = [canonical_block(0x1000 + 1024 * k + 64) for k in range(10)]
    recs = fe.run_loop(0, blocks[:6], 5) + fe.run_loop(0, blocks, 3)
    got = measure_sequence(recs, EXAMPLE)
    prev, want = None, 0
    for r in recs:
        want += oracles.cost(r.path.value, prev, EXAMPLE_D)
        prev = r.path.value
    assert got.total_cycles == want
    assert got.total_energy == sum(5 * EXAMPLE.energy_per_uop(r.path) for r in recs)


def test_measure_tracks_previous_path_per_thread():
    recs = [rec(Path.LSD, thread=0), rec(Path.DSB, thread=1), rec(Path.DSB, thread=0)]
    assert measure_sequence(recs, EXAMPLE).total_cycles == 5 + 7 + 13


def test_measure_noise_reproducible_and_energy_noise_free():
    recs = [rec(Path.DSB)] * 50
    m = CostModel(noise_sigma=3)
    a = measure_sequence(recs, m, np.random.default_rng(7))
    b = measure_sequence(recs, m, np.random.default_rng(7))
    assert a == b
    assert a.total_energy == measure_sequence(recs, CostModel()).total_energy


def test_noisy_total_deterministic_and_noiseless_sum():
    counts = Counter({5: 10, 16: 3})
    assert noisy_total(counts, 0, None) == 98
    rng = lambda: np.random.default_rng(11)
    assert noisy_total(counts, 2.0, rng()) == noisy_total(counts, 2.0, rng())


def test_noisy_total_distribution_matches_per_delivery_noise():
    counts = Counter({20: 200})
    sums = [noisy_total(counts, 3.0, np.random.default_rng(s)) for s in range(300)]
    assert abs(np.mean(sums) - 4000) < 3 * 3.0 * np.sqrt(200) / np.sqrt(300) * 3
    assert 0.7 < np.std(sums) / (3.0 * np.sqrt(200)) < 1.3


def test_mixed_issue_slower_than_ordered():
    m = CostModel()
    for r in (1, 4, 16):
        mixed, ordered = lcp_add_block(r, True, 0), lcp_add_block(r, False, 0x1000)
        fe = Frontend()
        a = measure_sequence(fe.run_loop(0, [mixed], 10), m).total_cycles
        b = measure_sequence(fe.run_loop(0, [ordered], 10), m).total_cycles
        assert (a > b) is (r > 1)


# -- RAPL quantisation -------------------------------------------------------------------------

I = 1 / 20000


def linear_trace(n=100, span=4 * I):
    return [TraceSample(k, float(k), span * k / n) for k in range(n + 1)]


def test_rapl_reads_inside_first_interval_see_zero_boundary():
    c = RaplCounter([s.timestamp for s in linear_trace()], [s.value for s in linear_trace()], I)
    assert c.read(0.4 * I) == c.read(0.9 * I) == 0.0


def test_rapl_read_mid_interval_sees_last_boundary():
    tr = linear_trace()
    c = RaplCounter([s.timestamp for s in tr], [s.value for s in tr], I)
    assert c.read(1.5 * I) == c.value_at(1.0 * I) == 25.0


def test_rapl_step_hidden_until_boundary():
    events = [(0.0, 1.0), (1.3 * I, 5.0)]
    trace = [TraceSample(0, 1.0, 0.0), TraceSample(1, 6.0, 1.3 * I)]
    reads = [0.5 * I, 1.4 * I, 1.99 * I, 2.0 * I, 2.7 * I]
    got = rapl_sample(trace, I, reads)
    assert [s.value for s in got] == [oracles.rapl_replay(events, I, t) for t in reads]
    assert [s.value for s in got] == [1.0, 1.0, 1.0, 6.0, 6.0]


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 10 * I), st.floats(0, 5)), min_size=1, max_size=20),
       st.lists(st.floats(0, 12 * I), min_size=1, max_size=10))
def test_rapl_matches_replay_oracle(events, reads):
    events = sorted(events)
    cum, trace = 0.0, []
    for k, (t, e) in enumerate(events):
        cum += e
        trace.append(TraceSample(k, cum, t))
    got = [s.value for s in rapl_sample(trace, I, reads)]
    want = [oracles.rapl_replay(events, I, t) for t in reads]
    assert got == pytest.approx(want)


def test_rapl_default_reads_and_validation():
    out = rapl_sample(linear_trace(), I)
    assert [s.timestamp for s in out] == pytest.approx([0, I, 2 * I, 3 * I, 4 * I])
    with pytest.raises(ValueError):
        rapl_sample(linear_trace(), 0)
    with pytest.raises(ValueError):
        RaplCounter([1.0, 0.0], [0, 0])


# -- histogram ---------------------------------------------------------------------------------


def test_noiseless_histogram_single_spikes():
    m = CostModel()
    rows = histogram_rows(path_samples(m, 100, np.random.default_rng(0)))
    assert rows == [(6, 7, 100, "LSD"), (5, 6, 100, "DSB"), (26, 27, 100, "MITE+DSB")]
    lows = {lab: lo for lo, _, _, lab in rows}
    assert lows["DSB"] < lows["LSD"] < lows["MITE+DSB"]


def test_noisy_histogram_bells_separate():
    m = CostModel(noise_sigma=1.0)
    s = path_samples(m, 5000, np.random.default_rng(1))
    means = {k: np.mean(v) for k, v in s.items()}
    assert means["DSB"] < means["LSD"] < means["MITE+DSB"]
    assert np.std(s["MITE+DSB"]) > 0.5
    assert sum(n for *_, n, lab in histogram_rows(s, 2) if lab == "LSD") == 5000


def test_ascii_histogram_lists_every_path():
    text = ascii_histogram(histogram_rows(path_samples(CostModel(), 3, np.random.default_rng(0))))
    assert [l for l in text.splitlines() if l.endswith(":")] == ["LSD:", "DSB:", "MITE+DSB:"]
    assert ascii_histogram([]) == ""
    with pytest.raises(ValueError):
        histogram_rows({}, 0)
