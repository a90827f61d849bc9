from dataclasses import replace

import pytest

import detworam.core as core
from detworam.bench import (RAND_R, RAND_W, SEQ_R, SEQ_W, BenchResult, bench, fuzz, random_addresses,
                            read_sequence_trace, snapshot_sequence, workload_addresses, write_sequence_trace)
from detworam.container import ContainerConfig, create
from detworam.core import FreshnessShadow
from detworam.crypto import CipherKey
from detworam.verifier import (check_determinism, check_read_budget, check_snapshot_freshness, check_uniformity,
                               check_write_budget)

key = CipherKey(bytes(range(32)))
B = 512

CONFIGS = {
    'seg': ContainerConfig(block_bytes=B, size_blocks=64, ratio=3, branch=4, mode='seg'),
    'ilv': ContainerConfig(block_bytes=B, size_blocks=64, ratio=2, branch=4, mode='ilv'),
    'toy': ContainerConfig(block_bytes=B, size_blocks=32, ratio=1, mode='toy'),
    'amort': ContainerConfig(block_bytes=B, size_blocks=32, ratio=3, mode='amort'),
    'hive': ContainerConfig(block_bytes=B, size_blocks=32, ratio=2, mode='hive', seed=2),
}


@pytest.mark.parametrize('mode', sorted(CONFIGS))
def test_fuzz_passes(mode):
    result = fuzz(create(CONFIGS[mode], key), 600, seed=1)
    assert result.passed
    assert result.reads + result.writes == 600
    assert 'PASS' in result.to_text()


@pytest.mark.parametrize('mode', sorted(CONFIGS))
def test_fuzz_with_reopens(mode):
    result = fuzz(create(CONFIGS[mode], key), 500, seed=2, reopen_every=37)
    assert result.passed
    assert result.reopens == 500 // 37


def test_fuzz_catches_a_skipped_refresh(monkeypatch):
    original = core.refresh_addresses
    monkeypatch.setattr(core, 'refresh_addresses', lambda i, N, M: [a for a in original(i, N, M) if a != 0])
    config = ContainerConfig(block_bytes=B, size_blocks=4, ratio=3, mode='amort')
    shadow = FreshnessShadow()
    result = fuzz(create(config, key, shadow=shadow), 2000, seed=3)
    assert not result.passed
    assert result.mismatches > 0
    assert shadow.violations > 0
    assert shadow.first_violation[2] == 0
    assert result.summary()['passed'] is False


def test_fuzz_argument_checks():
    handle = create(CONFIGS['toy'], key)
    with pytest.raises(ValueError):
        fuzz(handle, -1)
    with pytest.raises(ValueError):
        fuzz(handle, 10, write_fraction=1.5)


def test_workload_addresses():
    assert workload_addresses(SEQ_W, 6, 4).tolist() == [0, 1, 2, 3, 0, 1]
    randoms = workload_addresses(RAND_R, 100, 4, seed=5)
    assert randoms.min() >= 0 and randoms.max() < 4
    with pytest.raises(ValueError):
        workload_addresses('zipf', 10, 4)


@pytest.mark.parametrize('mode, expected', [('ilv', 2.0), ('hive', 3.0), ('toy', 2.0)])
def test_exact_write_ratios(mode, expected):
    handle = create(CONFIGS[mode], key)
    result = bench(handle, RAND_W, 4 * handle.N, seed=1)
    assert result.write_ratio == expected
    assert result.state_writes == result.logical_writes


def test_amortized_write_ratio():
    handle = create(CONFIGS['amort'], key)
    result = bench(handle, SEQ_W, 3 * handle.M, seed=1)
    assert result.write_ratio == pytest.approx(1 + handle.N / handle.M)


def test_segmented_write_ratio_within_budget():
    handle = create(CONFIGS['seg'], key)
    handle.start_trace()
    result = bench(handle, RAND_W, 3 * handle.M, seed=1)
    assert 1 + handle.N / handle.M <= result.write_ratio <= 2.5
    assert check_write_budget(handle.trace(), result.logical_writes, 2.5).passed


@pytest.mark.parametrize('mode', ['seg', 'ilv', 'amort'])
def test_write_counts_ignore_addresses(mode):
    sequential = bench(create(CONFIGS[mode], key), SEQ_W, 300, seed=1)
    random = bench(create(CONFIGS[mode], key), RAND_W, 300, seed=1)
    assert sequential.physical_writes == random.physical_writes


def test_read_workload_counts():
    handle = create(CONFIGS['ilv'], key)
    bench(handle, SEQ_W, handle.N)
    result = bench(handle, SEQ_R, 200)
    assert result.logical_reads == 200
    assert result.logical_writes == 0
    assert result.physical_writes == 0
    assert result.read_ratio > 0


def test_bench_result_reporting():
    result = BenchResult('seg', SEQ_W, 10, logical_writes=10, physical_writes=15, wall_seconds=0.5)
    assert result.write_ratio == 1.5
    assert result.read_ratio == 0.0
    assert result.ops_per_second == 20
    frame = result.to_frame()
    assert list(frame['write_ratio']) == [1.5]
    assert 'write_ratio=1.5000' in result.to_text()


@pytest.mark.parametrize('mode', ['seg', 'ilv', 'toy', 'amort'])
def test_write_traces_are_address_independent(mode):
    config = CONFIGS[mode]
    traces = [write_sequence_trace(config, key, random_addresses(config.N, 200, seed), seed=seed)
              for seed in range(3)]
    assert check_determinism(traces).passed


def test_hive_write_traces_differ():
    traces = [write_sequence_trace(replace(CONFIGS['hive'], seed=seed), key,
                                   random_addresses(32, 100, seed), seed=seed) for seed in range(2)]
    assert not check_determinism(traces).passed


def test_snapshot_freshness():
    config = CONFIGS['seg']
    series = [snapshot_sequence(config, key, random_addresses(config.N, 300, seed), every=50, seed=seed)
              for seed in range(2)]
    assert len(series[0]) == 7
    assert check_snapshot_freshness(series).passed

    hive = [snapshot_sequence(replace(CONFIGS['hive'], seed=seed), key, random_addresses(32, 100, seed),
                              every=50, seed=seed) for seed in range(2)]
    assert not check_snapshot_freshness(hive).passed
    with pytest.raises(ValueError):
        snapshot_sequence(config, key, [0], every=0)


@pytest.mark.slow
@pytest.mark.parametrize('mode', sorted(CONFIGS))
def test_fuzz_acceptance_size(mode):
    ratio = {'seg': 3, 'amort': 3, 'toy': 1}.get(mode, 2)
    config = ContainerConfig(block_bytes=4096, size_blocks=1024, ratio=ratio, branch=64, mode=mode, seed=0)
    assert fuzz(create(config, key, durable=False), 10 ** 5, seed=0, reopen_every=10 ** 4).passed


def test_twenty_random_sequences_give_identical_traces():
    config = ContainerConfig(block_bytes=4096, size_blocks=256, ratio=2, branch=64, mode='seg')
    traces = [write_sequence_trace(config, key, random_addresses(256, 500, seed), seed=seed) for seed in range(20)]
    assert check_determinism(traces).passed


@pytest.mark.slow
def test_interleaved_acceptance_size():
    config = ContainerConfig(block_bytes=4096, size_blocks=1024, ratio=2, branch=64, mode='ilv')
    trace = write_sequence_trace(config, key, random_addresses(1024, 10 ** 4, 0))
    writes = trace.indices('W').reshape(-1, 2)
    assert len(writes) == 10 ** 4
    assert (writes[:, 1] - writes[:, 0] == 1).all()


@pytest.mark.slow
def test_segmented_acceptance_size():
    config = ContainerConfig(block_bytes=4096, size_blocks=4096, ratio=2, branch=64, mode='seg')
    handle = create(config, key, sparse=True, durable=False)
    result = bench(handle, RAND_W, 10 ** 5)
    assert result.write_ratio <= 2.5


def test_hive_bench_reports_the_stash_high_water_mark():
    handle = create(CONFIGS['hive'], key)
    result = bench(handle, RAND_W, 200, seed=1)
    assert result.extra == {'max_stash': handle.engine.max_stash}
    assert 'max_stash={}'.format(handle.engine.max_stash) in result.to_text()
    assert 'extra' not in result.to_frame()
    assert bench(create(CONFIGS['seg'], key), RAND_W, 20).extra == {}


def test_read_sequence_trace_records_reads_only():
    config = CONFIGS['seg']
    trace = read_sequence_trace(config, key, random_addresses(config.N, 100, 0), 50, seed=0)
    assert trace.meta['logical_reads'] == 50
    assert trace.meta['logical_writes'] == 0
    assert trace.count('W') == 0
    assert check_read_budget(trace, 50, N=config.N, b=config.branch).passed


@pytest.mark.slow
def test_read_cost_grows_slowly_with_size():
    measured = []
    for N in (2 ** 16, 2 ** 22):
        config = ContainerConfig(block_bytes=4096, size_blocks=N, ratio=2, branch=64, mode='seg')
        trace = read_sequence_trace(config, key, random_addresses(N, 2000, 1), 2000, seed=1)
        check = check_read_budget(trace, 2000, N=N, b=64)
        assert check.passed
        measured.append(check.stats['measured'])
    assert 0 <= measured[1] - measured[0] <= 2


@pytest.mark.slow
def test_hive_write_locations_are_uniform():
    config = ContainerConfig(block_bytes=B, size_blocks=1024, ratio=2, mode='hive', seed=11)
    trace = write_sequence_trace(config, key, random_addresses(1024, 33334, 11), seed=11)
    assert trace.count('W') >= 10 ** 5
    assert check_uniformity(trace, trace.meta['payload_start'], config.M).passed
