import numpy as np
import pytest

from frontsim.frontend import Frontend, dsb_set_index, l1i_set_index
from frontsim.spectre import SpectreScenario, parse_secret, spectre_csv
from frontsim.timing import CostModel


def primed(secret=()):
    sc = SpectreScenario(tuple(secret))
    fe = Frontend()
    sc.prime(fe)
    return sc, fe


@pytest.mark.parametrize("chunk", [0, 21, 31])
def test_encode_disturbs_its_set(chunk):
    sc, fe = primed()
    before = [dict(s) for s in fe.dsb]
    sc.transient_encode(fe, chunk)
    changed = [s for s in range(32) if dict(fe.dsb[s]) != before[s]]
    assert changed == [chunk]


def test_probe_recovers_21_without_l1i_misses():
    sc, fe = primed()
    start = fe.counters.l1i_misses
    sc.transient_encode(fe, 21)
    res = sc.probe_all_sets(fe, CostModel(), l1i_before=start)
    assert res.recovered == 21 and not res.ambiguous
    assert res.added_l1i_misses == 0


def test_no_encoding_is_ambiguous():
    sc, fe = primed()
    res = sc.probe_all_sets(fe, CostModel())
    assert res.ambiguous and res.recovered is None
    assert len(set(res.per_set_cycles)) == 1


def test_all_chunks_recovered_and_distinct():
    sc = SpectreScenario(tuple(range(32)))
    res = sc.run(Frontend(), CostModel())
    assert [r.recovered for r in res] == list(range(32))
    assert all(r.added_l1i_misses == 0 for r in res)


def test_recovery_with_mild_noise():
    secret = tuple(np.random.default_rng(2).integers(0, 32, 32))
    sc = SpectreScenario(secret)
    res = sc.run(Frontend(), CostModel(noise_sigma=1.0), np.random.default_rng(2))
    assert [r.recovered for r in res] == list(secret)


def test_probe_layout_fits_l1i():
    sc = SpectreScenario(())
    blocks = [b for chain in sc.probes for b in chain] + sc.transient
    assert all(dsb_set_index(b.start_addr) == s for s, chain in enumerate(sc.probes) for b in chain)
    per_set = {}
    for b in blocks:
        per_set.setdefault(l1i_set_index(b.start_addr), set()).add(b.start_addr // 64)
    assert max(len(v) for v in per_set.values()) <= 8


def test_chunk_range_enforced():
    with pytest.raises(ValueError):
        SpectreScenario((32,))
    sc, fe = primed()
    with pytest.raises(ValueError):
        sc.transient_encode(fe, -1)


def test_parse_secret():
    assert parse_secret("ff") == (31, 28)  # 11111 111 + 00 padding
    assert parse_secret("0x00") == (0, 0)
    rng = np.random.default_rng(0)
    r = parse_secret("random", rng)
    assert len(r) == 32 and all(0 <= v < 32 for v in r)
    with pytest.raises(ValueError):
        parse_secret("xyz")
    with pytest.raises(ValueError):
        parse_secret("random")


def test_spectre_csv_columns():
    sc = SpectreScenario((3, 4))
    text = spectre_csv(sc, sc.run(Frontend(), CostModel()))
    header, *rows = text.splitlines()
    cols = header.split(",")
    assert cols[:3] == ["chunk_index", "true_value", "recovered_value"] and cols[-1] == "added_l1i_misses"
    assert len(cols) == 3 + 32 + 1
    assert [r.split(",")[:3] for r in rows] == [["0", "3", "3"], ["1", "4", "4"]]
