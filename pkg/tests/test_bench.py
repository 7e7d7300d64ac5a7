import pytest

from vql.bench import (
    BENCH_COLUMNS,
    TOPK_COLUMNS,
    BenchConfig,
    latency_summary,
    make_world,
    measure_interleaved,
    read_csv,
    run_bench,
    run_throughput,
    run_topk,
    threads_from_env,
    write_csv,
)
from vql.errors import ConfigError, ParameterError

SMALL = dict(lengths=(50, 200), candidates=(5, 20), d=8, codebook_size=10, reps=3,
             n_items=100, topk=10, topk_lengths=(10, 40, 160), topk_queries=16)


@pytest.fixture(scope="module")
def small():
    bc = BenchConfig(tiers=("light", "medium", "heavy"), scales=2, **SMALL)
    return bc, make_world(bc)


def test_sweep_rows_and_csv(tmp_path, small):
    bc, world = small
    rows = run_bench(bc, world)
    # 2 L-arm cells plus 1 B-arm cell, each with an oracle row and 3 tier rows
    assert len(rows) == 3 * 4
    for r in rows:
        assert list(r) == list(BENCH_COLUMNS)
        assert r["median_us"] > 0
        if r["strategy"] == "vql":
            assert r["max_err"] <= r["bound"]
    write_csv(rows, BENCH_COLUMNS, tmp_path / "b.csv")
    back = read_csv(tmp_path / "b.csv")
    assert len(back) == len(rows) and list(back[0]) == list(BENCH_COLUMNS)
    assert float(back[0]["median_us"]) == rows[0]["median_us"]
    s = latency_summary(rows, "heavy")
    assert set(s) == {"l_spread", "b_ratio", "oracle_growth"}


def test_topk_rows_are_monotone(small):
    bc, world = small
    rows = run_topk(bc, world)
    assert [list(r) for r in rows] == [list(TOPK_COLUMNS)] * 3
    fr = [r["mean_discarded"] for r in rows]
    assert fr[0] == 0.0 and fr == sorted(fr)


def test_throughput(small):
    bc, world = small
    rows = run_throughput(BenchConfig(tiers=("heavy",), threads=2, **SMALL), world, n_users=4)
    assert rows[0]["requests"] == 12 and rows[0]["requests_per_s"] > 0


def test_interleaved_measurement_shapes():
    calls = []
    out = measure_interleaved([lambda: calls.append(0), lambda: calls.append(1)], reps=4, warmups=2)
    assert [o.shape for o in out] == [(4,), (4,)]
    assert calls.count(0) == calls.count(1) == 6


def test_threads_env(monkeypatch):
    monkeypatch.delenv("VQL_THREADS", raising=False)
    assert threads_from_env(3) == 3
    monkeypatch.setenv("VQL_THREADS", "4")
    assert threads_from_env() == 4
    for bad in ("0", "x"):
        monkeypatch.setenv("VQL_THREADS", bad)
        with pytest.raises(ConfigError):
            threads_from_env()


def test_config_validation():
    with pytest.raises(ParameterError):
        BenchConfig(reps=0)
    with pytest.raises(ConfigError):
        BenchConfig(tiers=("huge",))
    with pytest.raises(ConfigError):
        BenchConfig(strategies=("magic",))
