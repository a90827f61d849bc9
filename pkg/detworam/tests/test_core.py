import numpy as np
import pytest

import detworam.core as core
from detworam.core import (NULL_POINTER, CtrArea, DeamortizedWoram, DetWoram, DictPosMap, FreshnessShadow,
                           Geometry, PosPointer, ToyWoram, bit_diff, get_bit, initial_block, refresh_addresses,
                           refresh_range, region_epoch, write_epoch)
from detworam.crypto import CipherKey, CounterLedger
from detworam.device import MemoryBlockStore, TraceRecorder
from detworam.errors import AddressOutOfRange, ContextReuse, InvalidGeometry, SizeMismatch

key = CipherKey(bytes(32))
B = 64


def make_area(N, M, recorder=None, ledger=None):
    store = MemoryBlockStore(B, 1 + N + M, recorder=recorder,
                             initializer=lambda index: initial_block(key, index, B))
    return CtrArea(store, key, N, M, 1, 1 + N, ledger)


def block(seed):
    return np.random.default_rng(seed).bytes(B)


def run_reference(engine, ops, seed):
    rng = np.random.default_rng(seed)
    reference = {}
    for _ in range(ops):
        a = int(rng.integers(engine.N))
        if rng.random() < 0.5:
            d = rng.bytes(B)
            engine.write(a, d)
            reference[a] = d
        else:
            assert engine.read(a) == reference.get(a, bytes(B))
    return reference


def test_geometry_validation():
    Geometry(4, 12, 64)
    with pytest.raises(InvalidGeometry):
        Geometry(0, 12, 64)
    with pytest.raises(InvalidGeometry):
        Geometry(4, 12, 65)
    with pytest.raises(ValueError):
        Geometry(4, 0, 64)


def test_refresh_schedule():
    assert refresh_range(0, 4, 12) == (0, 0)
    assert refresh_range(2, 4, 12) == (0, 1)
    assert refresh_addresses(2, 4, 12) == [0]
    assert refresh_addresses(1, 4, 12) == []
    assert [refresh_addresses(i, 4, 4) for i in range(5)] == [[0], [1], [2], [3], [0]]


def test_refresh_schedule_covers_every_address_once_per_cycle():
    N, M = 10, 23
    refreshed = [a for i in range(M) for a in refresh_addresses(i, N, M)]
    assert sorted(refreshed) == list(range(N))


def test_refresh_schedule_huge_counters():
    i = 10 ** 30
    s, e = refresh_range(i, 1024, 3072)
    assert 0 <= s < 1024 and 0 <= e < 1024
    assert len(refresh_addresses(i, 1024, 3072)) in (0, 1)


def test_bits():
    old = bytes(8)
    new = bytes([0, 0b1000]) + bytes(6)
    assert bit_diff(new, old) == (11, 1)
    assert bit_diff(old, new) == (11, 0)
    assert get_bit(new, 11) == 1
    assert bit_diff(new, new) == (0, 0)
    with pytest.raises(SizeMismatch):
        bit_diff(new, bytes(4))


def test_epochs():
    assert region_epoch(0, 4, 0) == 0
    assert region_epoch(1, 4, 0) == 1
    assert region_epoch(1, 4, 1) == 0
    assert region_epoch(4, 4, 3) == 1
    assert write_epoch(0, 4) == 1
    assert write_epoch(3, 4) == 1
    assert write_epoch(4, 4) == 2


def test_dict_posmap():
    posmap = DictPosMap()
    assert posmap.getpos(3) == NULL_POINTER
    posmap.setpos(3, PosPointer(7, 5, 1))
    assert posmap.getpos(3) == PosPointer(7, 5, 1)
    posmap.setpos(3, NULL_POINTER)
    assert len(posmap) == 0


def test_fresh_engine_reads_zero_blocks():
    engine = DetWoram(make_area(4, 12), 4, 12)
    assert engine.read(2) == bytes(B)


def test_detworam_read_after_write():
    engine = DetWoram(make_area(4, 12), 4, 12)
    engine.write(1, block(1))
    assert engine.read(1) == block(1)
    engine.write(1, block(2))
    assert engine.read(1) == block(2)
    assert engine.read(0) == bytes(B)


def test_detworam_reference_map():
    engine = DetWoram(make_area(8, 24), 8, 24)
    run_reference(engine, 2000, seed=3)


def test_detworam_equal_main_and_holding_sizes():
    engine = DetWoram(make_area(8, 8), 8, 8)
    run_reference(engine, 1000, seed=4)


def test_toy_reference_map_and_full_refresh():
    engine = ToyWoram(make_area(4, 4), 4)
    for n in range(4):
        engine.write(n % 2, block(n))
    assert len(engine.posmap) == 0
    assert engine.read(0) == block(2)
    assert engine.read(1) == block(3)
    run_reference(ToyWoram(make_area(8, 8), 8), 1000, seed=5)


def test_deamortized_reference_map():
    engine = DeamortizedWoram(make_area(8, 24), 8, 24)
    run_reference(engine, 2000, seed=6)


def test_write_count_per_step_is_address_independent():
    N, M = 8, 24
    writes = []
    for seed in range(3):
        recorder = TraceRecorder()
        engine = DetWoram(make_area(N, M, recorder), N, M)
        rng = np.random.default_rng(seed)
        for _ in range(M):
            engine.write(int(rng.integers(N)), rng.bytes(B))
        writes.append(list(recorder.trace().indices('W')))
    assert writes[0] == writes[1] == writes[2]
    assert len(writes[0]) == M + N


def test_detworam_never_reuses_a_counter():
    ledger = CounterLedger()
    engine = DetWoram(make_area(4, 12, ledger=ledger), 4, 12)
    for n in range(100):
        engine.write(n % 4, block(n))
    assert len(ledger) == 100 + 100 * 4 // 12


def test_ledger_catches_rewound_counters():
    ledger = CounterLedger()
    area = make_area(4, 12, ledger=ledger)
    DetWoram(area, 4, 12).write(0, block(0))
    with pytest.raises(ContextReuse):
        DetWoram(area, 4, 12).write(0, block(1))


def test_out_of_range_address():
    engine = DetWoram(make_area(4, 12), 4, 12)
    with pytest.raises(AddressOutOfRange):
        engine.read(4)
    with pytest.raises(IndexError):
        engine.write(-1, block(0))


def test_restart_from_counter():
    area = make_area(8, 24)
    engine = DetWoram(area, 8, 24)
    reference = run_reference(engine, 500, seed=7)
    posmap = engine.posmap
    restarted = DetWoram(area, 8, 24, posmap=posmap, i=engine.i)
    for a, d in reference.items():
        assert restarted.read(a) == d


@pytest.mark.parametrize('pattern', ['same', 'round_robin', 'random'])
def test_shadow_sees_no_freshest_copy_overwrite(pattern):
    N, M, writes = 16, 48, 3000
    shadow = FreshnessShadow()
    engine = DetWoram(make_area(N, M), N, M, shadow=shadow)
    rng = np.random.default_rng(8)
    for n in range(writes):
        a = {'same': 0, 'round_robin': n % N, 'random': int(rng.integers(N))}[pattern]
        engine.write(a, block(n))
    assert shadow.violations == 0
    assert shadow.first_violation is None


def test_skipped_refresh_is_caught(monkeypatch):
    original = core.refresh_addresses
    monkeypatch.setattr(core, 'refresh_addresses', lambda i, N, M: [a for a in original(i, N, M) if a != 0])

    shadow = FreshnessShadow()
    engine = DetWoram(make_area(4, 12), 4, 12, shadow=shadow)
    engine.write(0, block(100))
    for n in range(12):
        engine.write(1 + n % 3, block(n))
    assert shadow.violations > 0
    assert shadow.first_violation[2] == 0
    assert engine.read(0) != block(100)


@pytest.mark.slow
def test_shadow_acceptance_size():
    N, M = 256, 768
    for pattern in ('same', 'round_robin', 'random'):
        shadow = FreshnessShadow()
        engine = DetWoram(make_area(N, M), N, M, shadow=shadow)
        rng = np.random.default_rng(9)
        data = bytes(B)
        for n in range(10 ** 5):
            a = {'same': 0, 'round_robin': n % N, 'random': int(rng.integers(N))}[pattern]
            data = bytes([n & 0xFF]) + data[1:]
            engine.write(a, data)
        assert shadow.violations == 0


@pytest.mark.slow
def test_detworam_counters_stay_unique_over_long_runs():
    ledger = CounterLedger()
    engine = DetWoram(make_area(64, 192, ledger=ledger), 64, 192)
    rng = np.random.default_rng(12)
    writes = 10 ** 5
    for _ in range(writes):
        engine.write(int(rng.integers(64)), rng.bytes(B))
    assert len(ledger) == writes + writes * 64 // 192
