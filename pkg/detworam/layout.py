'''
This module contains the physical placement of the WoORAM regions on one device.

SEGMENTED puts the superblock, data main, data holding, position main and
position holding areas one after the other, with trie nodes packed several to a
block. INTERLEAVED (M = 2N) alternates holding blocks with blocks carrying half
of a main block plus the trie nodes written in that step, so each logical write
costs exactly two consecutive physical writes.

The baselines get simple plans of their own so every scheme shares one
container format.

'''

import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .core import (DetWoram, PosPointer, bit_diff, get_bit, region_epoch, write_epoch)
from .crypto import (CtrContext, ctr_encrypt, ctr_decrypt, iv_encrypt, iv_decrypt, iv_blob_size)
from .errors import (AddressOutOfRange, BadMagic, CorruptState, InfeasiblePacking, InvalidGeometry,
                     MalformedPadding, PayloadOverflow, SizeMismatch, WrongKey)
from .trie import (TriePositionMap, empty_node, feasibility, node_from_bytes, pack_capacity,
                   pack_nodes, unpack_nodes)

SEGMENTED = 'seg'
INTERLEAVED = 'ilv'
TOY = 'toy'
AMORTIZED = 'amort'
HIVE = 'hive'
MODES = (SEGMENTED, INTERLEAVED, TOY, AMORTIZED, HIVE)

FRONT = 0
BACK = 1

MAGIC = b'DWORAM01'
VERSION = 1
STATE_TAG = b'DWST'
PAYLOAD_START = 1

_HEADER = struct.Struct('<8sHIQQIQQBQQ4QI')
_MODE_CODES = {mode: code for code, mode in enumerate(MODES)}


class HalfBlockRef(NamedTuple):
    index: int
    half: int


@dataclass
class LayoutPlan:
    '''
    Where every region lives. regions maps a region name to (offset, length) in
    device blocks; block 0 is always the superblock.
    '''
    mode: str
    block_size: int
    N: int
    M: int
    b: int = 0
    N_p: int = 0
    M_p: int = 0
    h: int = 0
    pack: int = 0
    device_block_size: int = 0
    regions: dict = field(default_factory=dict)

    @property
    def total_blocks(self):
        return max(offset + length for offset, length in self.regions.values())

    @property
    def payload_start(self):
        return PAYLOAD_START

    def offset(self, name):
        return self.regions[name][0]

    def length(self, name):
        return self.regions[name][1]

    def epochs(self, i, i_p):
        '''Completed-cycle counts of (data main, data holding, pos main, pos holding).'''
        if self.mode == TOY:
            return (i // self.N, i // self.N, 0, 0)
        if self.mode == HIVE:
            return (0, 0, 0, 0)
        refreshed_p = i_p * self.N_p // self.M_p if self.M_p else 0
        return (i * self.N // self.M // self.N, i // self.M,
                refreshed_p // self.N_p if self.N_p else 0,
                i_p // self.M_p if self.M_p else 0)


def _ceil_div(x, y):
    return -(-x // y)


def interleaved_trie_bytes(params):
    '''Plaintext size of the trie half: a node-count byte plus room for h + 1 nodes.'''
    return 1 + (params.h + 1) * params.node_bytes


def plan_layout(geometry, params=None, mode=SEGMENTED, device_block_size=None):
    '''
    Lays the regions of one scheme out on the device.

    Parameters:
    ------------
        geometry: Geometry

        params: TrieParams, Default None

            Required for SEGMENTED and INTERLEAVED.

        mode: str, Default 'seg'

            One of seg, ilv, toy, amort, hive.

        device_block_size: int, Default None

            Physical block size when it differs from the logical one (HiVE slots).

    Returns:
    ---------
        LayoutPlan
    '''
    if mode not in MODES:
        raise ValueError("mode: Expecting one of {}, got {}".format(list(MODES), mode))

    N, M, B = geometry.N, geometry.M, geometry.block_size
    plan = LayoutPlan(mode, B, N, M, device_block_size=device_block_size or B)
    plan.regions['superblock'] = (0, 1)
    start = PAYLOAD_START

    if mode in (SEGMENTED, INTERLEAVED):
        if params is None:
            raise ValueError("params: Expecting TrieParams for mode {}, got 'None'".format(mode))
        if B > 8192:
            raise InvalidGeometry("block_size: Expecting at most 8192 bytes (16-bit bit offsets), got {}".format(B))
        plan.b, plan.N_p, plan.M_p, plan.h = params.b, params.N_p, params.M_p, params.h

    if mode == SEGMENTED:
        plan.pack = pack_capacity(params.b, B)
        if params.N_p > 0 and plan.pack < 1:
            raise InfeasiblePacking("block_size: Expecting room for one {}-byte node, got {} bytes".format(
                params.node_bytes, B))
        for name, length in (('data_main', N), ('data_holding', M),
                             ('pos_main', _ceil_div(params.N_p, plan.pack) if params.N_p else 0),
                             ('pos_holding', _ceil_div(params.M_p, plan.pack) if params.M_p else 0)):
            plan.regions[name] = (start, length)
            start += length

    elif mode == INTERLEAVED:
        if M != 2 * N:
            raise InvalidGeometry("M: Expecting 2N = {} for the interleaved layout, got {}".format(2 * N, M))
        if B % 32:
            raise InvalidGeometry("block_size: Expecting a multiple of 32 so halves stay AES aligned, got {}".format(B))
        if not feasibility(N, params.b, 8 * B):
            raise InfeasiblePacking("N: {} addresses with b={} do not fit half of a {}-byte block".format(
                N, params.b, B))
        needed = iv_blob_size(interleaved_trie_bytes(params))
        if needed > B // 2:
            raise InfeasiblePacking("block_size: Expecting {} trie bytes per half block, only {} available".format(
                needed, B // 2))
        plan.regions['payload'] = (start, 4 * N)

    elif mode == HIVE:
        plan.regions['slots'] = (start, M)

    else:
        holding = N if mode == TOY else M
        plan.regions['data_main'] = (start, N)
        plan.regions['data_holding'] = (start + N, holding)

    return plan


def resolve_main(a, plan):
    '''
    Physical placement of main block a: one index (SEGMENTED, TOY, AMORTIZED) or
    two HalfBlockRefs (INTERLEAVED).
    '''
    if not 0 <= a < plan.N:
        raise AddressOutOfRange("a: Expecting an address in [0, {}), got {}".format(plan.N, a))
    if plan.mode == INTERLEAVED:
        base = plan.offset('payload')
        return (HalfBlockRef(base + 2 * (2 * a) + 1, FRONT), HalfBlockRef(base + 2 * (2 * a + 1) + 1, BACK))
    if plan.mode == HIVE:
        raise ValueError("plan: HiVE blocks have no fixed main location")
    return plan.offset('data_main') + a


class _PackBuffer:

    def __init__(self, offset, length):
        self.offset = offset
        self.length = length
        self.block = None
        self.nodes = None


class PackedNodeArea:
    '''
    Area for the position engine in the segmented layout. Trie nodes are
    packed pack-per-block; each region keeps one open buffer that is loaded
    from the device when opened and flushed when its last slot is written.

    Parameters:
    ------------
        store: BlockStore

        key: CipherKey

        plan: LayoutPlan
    '''

    def __init__(self, store, key, plan):
        self.store = store
        self.key = key
        self.b = plan.b
        self.pack = plan.pack
        self.block_size = plan.block_size
        self._main = _PackBuffer(plan.offset('pos_main'), plan.N_p)
        self._holding = _PackBuffer(plan.offset('pos_holding'), plan.M_p)
        self.flushes = 0

    def _load(self, buf, k):
        return unpack_nodes(self.key, self.store.read_block(buf.offset + k), self.b, self.pack)

    def _flush(self, buf):
        if buf.block is None:
            return
        self.store.write_block(buf.offset + buf.block, pack_nodes(self.key, buf.nodes, self.block_size))
        self.flushes += 1
        logging.debug("flushed packed block %d", buf.offset + buf.block)
        buf.block = None
        buf.nodes = None

    def _put(self, buf, slot, data):
        k, e = divmod(slot, self.pack)
        if buf.block != k:
            self._flush(buf)
            buf.nodes = self._load(buf, k)
            buf.block = k
        buf.nodes[e] = node_from_bytes(data, self.b)
        if e == self.pack - 1 or slot == buf.length - 1:
            self._flush(buf)

    def _get(self, buf, slot):
        k, e = divmod(slot, self.pack)
        if buf.block == k:
            return buf.nodes[e].tobytes()
        return self._load(buf, k)[e].tobytes()

    def read_main(self, m, refreshed):
        return self._get(self._main, m)

    def write_main(self, m, refreshed, data):
        self._put(self._main, m, data)

    def read_holding(self, s, held):
        return self._get(self._holding, s)

    def write_holding(self, s, held, data):
        self._put(self._holding, s, data)

    def close(self):
        '''Writes back partially filled buffers.'''
        self._flush(self._holding)
        self._flush(self._main)

    def initial_block(self):
        return pack_nodes(self.key, [empty_node(self.b)] * self.pack, self.block_size)


class _InterleavedPosArea:
    '''Position-engine area staged into the current interleaved step.'''

    def __init__(self, owner):
        self.owner = owner

    def write_holding(self, s, held, data):
        self.owner._stage_node(held - self.owner.h * self.owner.i, data)

    def read_holding(self, s, held):
        M_p, h = self.owner.M_p, self.owner.h
        written = held - 1 - ((held - 1 - s) % M_p)
        if written < 0:
            raise CorruptState("pos holding slot {} read before it was ever written".format(s))
        return self.owner._trie_entry(written // h, written % h)

    def write_main(self, m, refreshed, data):
        self.owner._stage_node(self.owner.h, data)

    def read_main(self, m, refreshed):
        N_p = self.owner.N_p
        step = refreshed - 1 - ((refreshed - 1 - m) % N_p)
        if step < 0:
            return self.owner._empty_node
        return self.owner._trie_entry(step, self.owner.h)


class InterleavedWoram:
    '''
    DetWoORAM in the interleaved layout. Step t = i mod M writes holding block
    h_t at base+2t and block X_t at base+2t+1. X_t carries one half of main
    block t // 2 (front half for even t, back half for odd t) and the h + 1
    trie nodes written in that step. The refreshed block is computed at the
    even step; its back half is held as client state until the odd step, and
    reads of that address use the held copy.

    Parameters:
    ------------
        store: BlockStore

        key: CipherKey

        plan: LayoutPlan

        params: TrieParams

        i: int, Default 0

        root: numpy array, Default None

        pending_back: bytes, Default None

            Back half held over from an even step, required when i is odd.

        ledger: CounterLedger, Default None
    '''

    def __init__(self, store, key, plan, params, i=0, root=None, pending_back=None, ledger=None):
        self.store = store
        self.key = key
        self.plan = plan
        self.N, self.M = plan.N, plan.M
        self.B = plan.block_size
        self.half = self.B // 2
        self.base = plan.offset('payload')
        self.h, self.N_p, self.M_p = params.h, params.N_p, params.M_p
        self.node_bytes = params.node_bytes
        self.trie_bytes = interleaved_trie_bytes(params)
        self.trie_blob = iv_blob_size(self.trie_bytes)
        self.ledger = ledger
        self.i = i
        self._empty_node = empty_node(params.b).tobytes()
        self._staged = None

        pos_woram = None
        if self.N_p > 0:
            pos_woram = DetWoram(_InterleavedPosArea(self), self.N_p, self.M_p, i=self.h * i)
        self.pos_woram = pos_woram
        self.trie = TriePositionMap(params, pos_woram, root)

        self.pending = None
        t = i % self.M
        if t % 2 == 1:
            if pending_back is None or len(pending_back) != self.half:
                raise CorruptState("pending_back: Expecting {} held bytes at odd step {}, got {}".format(
                    self.half, t, None if pending_back is None else len(pending_back)))
            j = t // 2
            self.pending = (j, self._read_half(t - 1) + bytes(pending_back))

    @property
    def i_p(self):
        return self.h * self.i

    @property
    def pending_back(self):
        return self.pending[1][self.half:] if self.pending is not None else b''

    def _x_index(self, t):
        return resolve_main(t // 2, self.plan)[t % 2].index

    def _holding_index(self, t):
        return self.base + 2 * t

    def _ctx(self, t, epoch):
        intra = 0 if t % 2 == 0 else self.half // 16
        return CtrContext(epoch, self._x_index(t), intra)

    def _main_slice(self, t):
        return slice(0, self.half) if t % 2 == 0 else slice(self.half, self.B)

    def _trie_slice(self, t):
        start = self.half if t % 2 == 0 else 0
        return slice(start, start + self.trie_blob)

    def _read_half(self, t):
        block = self.store.read_block(self._x_index(t))
        return ctr_decrypt(self.key, self._ctx(t, region_epoch(self.i, self.M, t)), block[self._main_slice(t)])

    def _main_view(self, j):
        if self.pending is not None and self.pending[0] == j:
            return self.pending[1]
        return self._read_half(2 * j) + self._read_half(2 * j + 1)

    def _read_holding(self, s):
        if self._staged is not None and s == self.i % self.M:
            return self._staged['holding']
        index = self._holding_index(s)
        epoch = region_epoch(self.i, self.M, s)
        return ctr_decrypt(self.key, CtrContext(epoch, index), self.store.read_block(index))

    def _stage_node(self, entry, data):
        if not 0 <= entry <= self.h:
            raise PayloadOverflow("entry: Expecting a trie slot in [0, {}], got {}".format(self.h, entry))
        self._staged['nodes'][entry] = data

    def _trie_entry(self, step, entry):
        if self._staged is not None and step == self.i:
            data = self._staged['nodes'][entry]
            if data is None:
                raise CorruptState("trie entry {} of the current step read before it was staged".format(entry))
            return data
        if step < self.i - self.M or step > self.i:
            raise CorruptState("trie entry of step {} is no longer on the device at step {}".format(step, self.i))
        block = self.store.read_block(self._x_index(step % self.M))
        try:
            payload = iv_decrypt(self.key, block[self._trie_slice(step % self.M)])
        except MalformedPadding as e:
            raise CorruptState("trie half of step {} does not decrypt".format(step)) from e
        count = payload[0]
        if entry >= count:
            raise CorruptState("trie half of step {} holds {} nodes, wanted entry {}".format(step, count, entry))
        start = 1 + entry * self.node_bytes
        return payload[start:start + self.node_bytes]

    def read(self, a):
        if not 0 <= a < self.N:
            raise AddressOutOfRange("a: Expecting an address in [0, {}), got {}".format(self.N, a))
        ptr = self.trie.getpos(a)
        main = self._main_view(a)
        if ptr.is_null() or get_bit(main, ptr.o) == ptr.q:
            return main
        return self._read_holding(ptr.a_h)

    def write(self, a, d):
        '''One logical write: exactly two physical writes at consecutive indices.'''
        if not 0 <= a < self.N:
            raise AddressOutOfRange("a: Expecting an address in [0, {}), got {}".format(self.N, a))
        if len(d) != self.B:
            raise SizeMismatch("d: Expecting {} bytes, got {}".format(self.B, len(d)))

        t = self.i % self.M
        j = t // 2
        count = self.h + 1 if self.N_p > 0 else 0
        self._staged = {'holding': bytes(d), 'nodes': [None] * count}
        try:
            o, q = bit_diff(d, self._main_view(a))
            self.trie.setpos(a, PosPointer(t, o, q))

            if t % 2 == 0:
                refreshed = self.read(j)
                pending = (j, refreshed)
                main_half = refreshed[:self.half]
            else:
                if self.pending is None or self.pending[0] != j:
                    raise CorruptState("no held back half for main block {} at step {}".format(j, t))
                pending = None
                main_half = self.pending[1][self.half:]

            nodes = self._staged['nodes']
            if any(node is None for node in nodes):
                raise CorruptState("step {} staged {} of {} trie nodes".format(
                    self.i, sum(node is not None for node in nodes), count))
            trie_payload = bytes([count]) + b''.join(nodes)
            self.interleaved_write_step(self._staged['holding'], main_half, trie_payload)
        finally:
            self._staged = None
        self.pending = pending
        self.i += 1

    def interleaved_write_step(self, holding_data, main_half, trie_payload):
        '''
        Emits the two writes of the current step: the holding block, then the
        block with the main half and the trie payload.
        '''
        if len(trie_payload) > self.trie_bytes:
            raise PayloadOverflow("trie_payload: Expecting at most {} bytes, got {}".format(
                self.trie_bytes, len(trie_payload)))
        if len(main_half) != self.half:
            raise PayloadOverflow("main_half: Expecting {} bytes, got {}".format(self.half, len(main_half)))

        t = self.i % self.M
        epoch = write_epoch(self.i, self.M)
        holding = ctr_encrypt(self.key, CtrContext(epoch, self._holding_index(t)), holding_data, self.ledger)
        self.store.write_block(self._holding_index(t), holding)
        self.store.write_block(self._x_index(t), self._x_block(t, epoch, main_half, trie_payload))

    def _x_block(self, t, epoch, main_half, trie_payload):
        main = ctr_encrypt(self.key, self._ctx(t, epoch), main_half, self.ledger)
        trie = iv_encrypt(self.key, trie_payload.ljust(self.trie_bytes, b'\0'), capacity=self.half)
        trie = trie + bytes(self.half - len(trie))
        return main + trie if t % 2 == 0 else trie + main

    def initial_blocks(self):
        '''Yields (index, bytes) for every payload block as create writes them.'''
        empty = bytes([0])
        for t in range(self.M):
            zero = bytes(self.B)
            yield self._holding_index(t), ctr_encrypt(self.key, CtrContext(0, self._holding_index(t)), zero)
            yield self._x_index(t), self._x_block(t, 0, bytes(self.half), empty)


@dataclass
class Superblock:
    '''Public geometry plus the decrypted client state held in block 0.'''
    mode: str
    block_size: int
    N: int
    M: int
    b: int
    N_p: int
    M_p: int
    i: int
    i_p: int
    epochs: tuple
    root: bytes = b''
    extra: bytes = b''


def encode_superblock(key, sb, device_block_size):
    '''
    Header fields in little-endian fixed width, then an IV-encrypted blob with
    the state tag, the root node and scheme extras.
    '''
    blob = iv_encrypt(key, STATE_TAG + struct.pack('<II', len(sb.root), len(sb.extra)) + sb.root + sb.extra)
    header = _HEADER.pack(MAGIC, VERSION, sb.block_size, sb.N, sb.M, sb.b, sb.N_p, sb.M_p,
                          _MODE_CODES[sb.mode], sb.i, sb.i_p, *sb.epochs, len(blob))
    data = header + blob
    if len(data) > device_block_size:
        raise InvalidGeometry("superblock: Expecting at most {} bytes, got {}".format(device_block_size, len(data)))
    return data + bytes(device_block_size - len(data))


HEADER_SIZE = _HEADER.size


def parse_header(block):
    '''Unpacks the public superblock fields, checking magic and version.'''
    if len(block) < _HEADER.size:
        raise BadMagic("superblock: Expecting at least {} bytes, got {}".format(_HEADER.size, len(block)))
    fields = _HEADER.unpack_from(block)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise BadMagic("magic: Expecting {!r}, got {!r}".format(MAGIC, magic))
    if version != VERSION:
        raise BadMagic("version: Expecting {}, got {}".format(VERSION, version))
    if fields[8] >= len(MODES):
        raise CorruptState("mode: Expecting a code below {}, got {}".format(len(MODES), fields[8]))
    return fields


def header_mode(block):
    '''(mode, logical block size) from the public header.'''
    fields = parse_header(block)
    return MODES[fields[8]], fields[2]


def decode_superblock(key, block):
    '''
    Parses block 0. Raises BadMagic on a foreign or other-version container,
    WrongKey when the state blob does not decrypt.
    '''
    fields = parse_header(block)
    block_size, N, M, b, N_p, M_p, mode_code, i, i_p = fields[2:11]
    epochs = tuple(fields[11:15])
    blob_len = fields[15]
    if _HEADER.size + blob_len > len(block):
        raise CorruptState("superblock: state blob of {} bytes overruns the block".format(blob_len))

    try:
        payload = iv_decrypt(key, block[_HEADER.size:_HEADER.size + blob_len])
    except MalformedPadding as e:
        raise WrongKey("key: state blob does not decrypt, wrong key or damaged container") from e
    if payload[:4] != STATE_TAG or len(payload) < 12:
        raise WrongKey("key: state blob has no valid tag, wrong key or damaged container")
    root_len, extra_len = struct.unpack_from('<II', payload, 4)
    if 12 + root_len + extra_len != len(payload):
        raise WrongKey("key: state blob has an invalid structure")

    return Superblock(MODES[mode_code], block_size, N, M, b, N_p, M_p, i, i_p, epochs,
                      payload[12:12 + root_len], payload[12 + root_len:])
