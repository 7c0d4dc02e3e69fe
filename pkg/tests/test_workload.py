import numpy as np
import pytest

from snapdb.txn import Engine, EngineConfig
from snapdb.workload import (
    BRANDS,
    GenConfig,
    TxnMix,
    dataset_checksum,
    execute_script,
    generate,
    N_OLAP_TEMPLATES,
)


@pytest.fixture(scope="module")
def dataset():
    return generate(GenConfig(sf=0.001, seed=7))


def test_generation_deterministic(dataset):
    again = generate(GenConfig(sf=0.001, seed=7))
    assert dataset_checksum(dataset) == dataset_checksum(again)
    other_seed = generate(GenConfig(sf=0.001, seed=8))
    assert dataset_checksum(other_seed) != dataset_checksum(dataset)


def test_row_count_ratios(dataset):
    nl, no, npart = (dataset.rows(t) for t in ("lineitem", "orders", "part"))
    assert nl == 6000 and no == 1500 and npart == 200
    assert nl / no == 4.0
    assert no / npart == 7.5


def test_discount_domain(dataset):
    d = dataset.arrays["lineitem"]["l_discount"]
    assert d.min() >= 0.0 and d.max() <= 0.10


def test_quantity_and_date_domains(dataset):
    q = dataset.arrays["lineitem"]["l_quantity"]
    assert q.min() >= 1 and q.max() <= 50
    from snapdb.workload import D_1992_01_01, D_1998_12_01

    s = dataset.arrays["lineitem"]["l_shipdate"]
    assert s.min() >= D_1992_01_01 and s.max() <= D_1998_12_01


def test_sf_zero_rejected():
    with pytest.raises(ValueError):
        generate(GenConfig(sf=0))


def test_install_into_engine(dataset):
    eng = Engine(EngineConfig(processing="homogeneous"))
    dataset.install(eng)
    assert eng.tables["lineitem"].row_count == 6000
    flag = eng.tables["lineitem"].columns["l_returnflag"]
    assert flag.dictionary.decode(0) == "A"
    brand = eng.tables["part"].columns["p_brand"]
    assert sorted(brand.dictionary.values) == sorted(BRANDS)


def test_same_seed_same_scripts(dataset):
    mix = TxnMix(dataset)
    a = [mix.next_oltp(np.random.default_rng(11)) for _ in range(5)]
    b = [mix.next_oltp(np.random.default_rng(11)) for _ in range(5)]
    assert [s.ops for s in a] == [s.ops for s in b]
    pa = [mix.next_olap(np.random.default_rng(12)).to_text() for _ in range(5)]
    pb = [mix.next_olap(np.random.default_rng(12)).to_text() for _ in range(5)]
    assert pa == pb


def test_pct_draw_bounds(dataset):
    mix = TxnMix(dataset)
    rng = np.random.default_rng(3)
    for _ in range(200):
        f = mix._pct(rng)
        assert 0.90 <= f <= 1.10 and abs(f - 1.0) >= 0.01


def test_olap_draw_uniform_chi_square(dataset):
    mix = TxnMix(dataset)
    rng = np.random.default_rng(99)
    counts = np.zeros(N_OLAP_TEMPLATES)
    draws = 10_000
    kind_table = []
    for _ in range(draws):
        plan = mix.next_olap(rng)
        kind_table.append((plan.kind, plan.table))
    import collections

    freq = collections.Counter(kind_table)
    assert len(freq) == N_OLAP_TEMPLATES
    expected = draws / N_OLAP_TEMPLATES
    chi2 = sum((n - expected) ** 2 / expected for n in freq.values())
    assert chi2 < 22.46  # p = 0.001 at 6 degrees of freedom


def test_every_template_commits_alone(dataset):
    seen = set()
    rng = np.random.default_rng(5)
    mix = TxnMix(dataset)
    for _ in range(120):
        eng = Engine(EngineConfig(processing="homogeneous"))
        dataset.install(eng)
        script = mix.next_oltp(rng)
        seen.add(script.template_id)
        outcome, reason = execute_script(eng, script)
        assert outcome == "committed", (script, reason)
        if len(seen) == 9:
            break
    assert seen == set(range(1, 10))


def test_template_touches_at_most_four_rows(dataset):
    mix = TxnMix(dataset)
    rng = np.random.default_rng(17)
    for _ in range(200):
        script = mix.next_oltp(rng)
        rows = set()
        for op in script.ops:
            if op[0] in ("read", "update_pct", "update_days"):
                rows.add((op[1], op[3]))
        assert len(rows) <= 4


def test_custom_weights(dataset):
    mix = TxnMix(dataset, oltp_weights=[1, 0, 0, 0, 0, 0, 0, 0, 0])
    rng = np.random.default_rng(1)
    assert all(mix.next_oltp(rng).template_id == 1 for _ in range(20))
    with pytest.raises(ValueError):
        TxnMix(dataset, oltp_weights=[1, 2])