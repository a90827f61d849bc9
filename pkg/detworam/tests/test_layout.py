import numpy as np
import pytest

from detworam.container import ContainerConfig, create
from detworam.core import Geometry, PosPointer
from detworam.crypto import CipherKey
from detworam.device import MemoryBlockStore, TraceRecorder
from detworam.errors import (BadMagic, CorruptState, InfeasiblePacking, InvalidGeometry, PayloadOverflow,
                             PayloadTooLarge, WrongKey)
from detworam.layout import (BACK, FRONT, HEADER_SIZE, HIVE, INTERLEAVED, SEGMENTED, TOY, HalfBlockRef,
                             InterleavedWoram, PackedNodeArea, Superblock, decode_superblock, encode_superblock,
                             header_mode, interleaved_trie_bytes, plan_layout, resolve_main)
from detworam.trie import empty_node, node_from_bytes, set_slot, trie_params

key = CipherKey(bytes(range(32)))
wrong_key = CipherKey(bytes(range(32, 64)))

N, B, b = 64, 512, 4


def make_interleaved(recorder=None):
    params = trie_params(N, b)
    plan = plan_layout(Geometry(N, 2 * N, B), params, INTERLEAVED)
    store = MemoryBlockStore(B, plan.total_blocks)
    woram = InterleavedWoram(store, key, plan, params)
    for index, data in woram.initial_blocks():
        store.write_block(index, data)
    store.attach(recorder)
    store.reads = store.writes = 0
    return woram, store, plan, params


def test_segmented_plan_sizes():
    params = trie_params(256, 64)
    plan = plan_layout(Geometry(256, 768, 4096), params, SEGMENTED)
    assert plan.pack == 7
    assert plan.regions['superblock'] == (0, 1)
    assert plan.offset('data_main') == 1
    assert plan.offset('data_holding') == 257
    assert plan.length('pos_main') == 1
    assert plan.length('pos_holding') == 1
    assert plan.total_blocks == 1 + 256 + 768 + 1 + 1


def test_segmented_plan_packs_large_tries():
    params = trie_params(4096, 64)
    plan = plan_layout(Geometry(4096, 8192, 4096), params, SEGMENTED)
    assert plan.length('pos_main') == -(-params.N_p // 7)
    assert plan.length('pos_holding') == -(-params.M_p // 7)


def test_interleaved_plan():
    params = trie_params(1024, 64)
    plan = plan_layout(Geometry(1024, 2048, 4096), params, INTERLEAVED)
    assert plan.total_blocks == 1 + 4 * 1024
    assert interleaved_trie_bytes(params) == 1 + (params.h + 1) * 512


def test_interleaved_plan_rejections():
    params = trie_params(1024, 2)
    with pytest.raises(InfeasiblePacking):
        plan_layout(Geometry(1024, 2048, 64), params, INTERLEAVED)
    with pytest.raises(InvalidGeometry):
        plan_layout(Geometry(1024, 3072, 4096), params, INTERLEAVED)
    with pytest.raises(InvalidGeometry):
        plan_layout(Geometry(1024, 2048, 4112), params, INTERLEAVED)
    with pytest.raises(ValueError):
        plan_layout(Geometry(1024, 2048, 4096), None, INTERLEAVED)
    with pytest.raises(ValueError):
        plan_layout(Geometry(1024, 2048, 4096), params, 'raid')


def test_baseline_plans():
    plan = plan_layout(Geometry(8, 24, 64), mode=TOY)
    assert plan.length('data_holding') == 8
    plan = plan_layout(Geometry(8, 16, 64), mode=HIVE, device_block_size=96)
    assert plan.regions['slots'] == (1, 16)
    assert plan.device_block_size == 96
    assert plan.epochs(10, 0) == (0, 0, 0, 0)


def test_resolve_main():
    params = trie_params(N, b)
    plan = plan_layout(Geometry(N, 2 * N, B), params, INTERLEAVED)
    front, back = resolve_main(3, plan)
    assert front == HalfBlockRef(1 + 13, FRONT)
    assert back == HalfBlockRef(1 + 15, BACK)
    seg = plan_layout(Geometry(N, 3 * N, B), params, SEGMENTED)
    assert resolve_main(3, seg) == 4
    with pytest.raises(IndexError):
        resolve_main(N, seg)


def test_epochs_follow_counters():
    params = trie_params(N, b)
    plan = plan_layout(Geometry(N, 3 * N, B), params, SEGMENTED)
    assert plan.epochs(0, 0) == (0, 0, 0, 0)
    i = 3 * N + 5
    main, holding, pos_main, pos_holding = plan.epochs(i, params.h * i)
    assert main == 1 and holding == 1
    assert pos_holding == params.h * i // params.M_p


def test_superblock_round_trip():
    root = empty_node(4)
    set_slot(root, 1, PosPointer(5, 6, 1))
    sb = Superblock(SEGMENTED, 512, 64, 192, 4, 20, 60, 17, 51, (0, 0, 0, 0), root.tobytes(), b'extra')
    block = encode_superblock(key, sb, 512)
    assert len(block) == 512
    assert header_mode(block[:HEADER_SIZE]) == (SEGMENTED, 512)
    decoded = decode_superblock(key, block)
    assert decoded == sb
    assert (node_from_bytes(decoded.root, 4) == root).all()


def test_superblock_persists_differ_but_decode_alike():
    sb = Superblock(TOY, 64, 8, 8, 0, 0, 0, 3, 0, (0, 0, 0, 0))
    first = encode_superblock(key, sb, 256)
    second = encode_superblock(key, sb, 256)
    assert first != second
    assert decode_superblock(key, first) == decode_superblock(key, second)


def test_superblock_errors():
    sb = Superblock(SEGMENTED, 512, 64, 192, 4, 20, 60, 0, 0, (0, 0, 0, 0), empty_node(4).tobytes())
    block = encode_superblock(key, sb, 512)
    with pytest.raises(WrongKey):
        decode_superblock(wrong_key, block)
    with pytest.raises(BadMagic):
        decode_superblock(key, b'NOTAWORM' + block[8:])
    with pytest.raises(BadMagic):
        decode_superblock(key, block[:8] + b'\x09\x00' + block[10:])
    with pytest.raises(BadMagic):
        header_mode(bytes(10))
    with pytest.raises(InvalidGeometry):
        encode_superblock(key, sb, 64)


def test_packed_area_flushes_full_blocks():
    params = trie_params(4096, 64)
    plan = plan_layout(Geometry(4096, 8192, 4096), params, SEGMENTED)
    store = MemoryBlockStore(4096, plan.total_blocks)
    area = PackedNodeArea(store, key, plan)
    for k in range(plan.length('pos_main')):
        store.write_block(plan.offset('pos_main') + k, area.initial_block())
    store.writes = 0

    node = empty_node(64)
    set_slot(node, 0, PosPointer(1, 2, 1))
    for s in range(6):
        area.write_main(s, s, node.tobytes())
        assert area.read_main(s, s + 1) == node.tobytes()
    assert store.writes == 0
    area.write_main(6, 6, node.tobytes())
    assert store.writes == 1 and area.flushes == 1
    area.write_main(7, 7, node.tobytes())
    area.close()
    assert store.writes == 2

    reloaded = PackedNodeArea(store, key, plan)
    assert reloaded.read_main(7, 8) == node.tobytes()
    assert reloaded.read_main(8, 8) == empty_node(64).tobytes()


def test_interleaved_two_consecutive_writes_per_step():
    recorder = TraceRecorder()
    woram, store, plan, _ = make_interleaved(recorder)
    rng = np.random.default_rng(0)
    for _ in range(3 * N):
        woram.write(int(rng.integers(N)), rng.bytes(B))
    writes = recorder.trace().indices('W')
    assert len(writes) == 2 * 3 * N
    pairs = writes.reshape(-1, 2)
    assert (pairs[:, 1] - pairs[:, 0] == 1).all()
    assert list(pairs[:2 * N, 0]) == [plan.offset('payload') + 2 * t for t in range(2 * N)]


def test_interleaved_reference_map():
    woram, _, _, _ = make_interleaved()
    rng = np.random.default_rng(1)
    reference = {}
    for _ in range(1500):
        a = int(rng.integers(N))
        if rng.random() < 0.6:
            d = rng.bytes(B)
            woram.write(a, d)
            reference[a] = d
        else:
            assert woram.read(a) == reference.get(a, bytes(B))


def test_interleaved_restart_mid_block():
    woram, store, plan, params = make_interleaved()
    rng = np.random.default_rng(2)
    reference = {}
    for _ in range(2 * N + 1):
        a = int(rng.integers(N))
        d = rng.bytes(B)
        woram.write(a, d)
        reference[a] = d
    assert woram.i % 2 == 1
    assert len(woram.pending_back) == B // 2

    restarted = InterleavedWoram(store, key, plan, params, i=woram.i, root=woram.trie.root,
                                 pending_back=woram.pending_back)
    for a, d in reference.items():
        assert restarted.read(a) == d
    restarted.write(0, bytes([7]) * B)
    assert restarted.read(0) == bytes([7]) * B
    with pytest.raises(CorruptState):
        InterleavedWoram(store, key, plan, params, i=woram.i, root=woram.trie.root)


def test_interleaved_write_step_overflow():
    woram, _, _, _ = make_interleaved()
    with pytest.raises(PayloadOverflow):
        woram.interleaved_write_step(bytes(B), bytes(B // 2), bytes(woram.trie_bytes + 1))
    with pytest.raises(PayloadOverflow):
        woram.interleaved_write_step(bytes(B), bytes(B // 2 + 1), b'\0')


def test_interleaved_main_halves_land_where_resolve_main_says():
    recorder = TraceRecorder()
    woram, _, plan, _ = make_interleaved(recorder)
    for t in range(2 * N):
        woram.write(t % N, bytes([t % 256]) * B)
    x_blocks = recorder.trace().indices('W')[1::2]
    assert list(x_blocks) == [resolve_main(t // 2, plan)[t % 2].index for t in range(2 * N)]


def test_trie_half_capacity_enforced():
    woram, _, _, _ = make_interleaved()
    with pytest.raises(PayloadTooLarge):
        woram._x_block(0, 1, bytes(B // 2), bytes(B // 2))


def test_segmented_regions_are_written_circularly():
    config = ContainerConfig(block_bytes=B, size_blocks=N, ratio=3, branch=b, mode=SEGMENTED)
    container = create(config, key, durable=False)
    container.start_trace()
    rng = np.random.default_rng(4)
    for _ in range(600):
        container.write(int(rng.integers(N)), rng.bytes(B))
    writes = container.stop_trace().indices('W')
    regions = {name: span for name, span in container.plan.regions.items() if name != 'superblock'}
    assert sorted(regions) == ['data_holding', 'data_main', 'pos_holding', 'pos_main']
    for name, (start, length) in regions.items():
        inside = writes[(writes >= start) & (writes < start + length)] - start
        assert len(inside) > length, name
        assert inside[0] == 0, name
        assert ((np.diff(inside) - 1) % length == 0).all(), name
