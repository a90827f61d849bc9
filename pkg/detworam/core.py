'''
This module contains the write-only ORAM engines: the toy construction, the
de-amortized construction with unequal main/holding areas, and the pointer
based construction that uses a one-bit diff to decide between the main and the
holding copy of a block.

Engines never touch the device directly. They talk to an area object exposing
read_main/write_main/read_holding/write_holding, which hides encryption and
physical placement (see CtrArea here and the packed/interleaved areas in layout).

'''

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .crypto import CtrContext, ctr_encrypt, ctr_decrypt
from .errors import AddressOutOfRange, InvalidGeometry, SizeMismatch

NULL_ADDR = 0xFFFFFFFF


class PosPointer(NamedTuple):
    '''Holding address a_h, bit offset o and diff bit q. a_h == NULL_ADDR means no holding copy.'''
    a_h: int
    o: int = 0
    q: int = 0

    def is_null(self):
        return self.a_h == NULL_ADDR


NULL_POINTER = PosPointer(NULL_ADDR, 0, 0)


@dataclass(frozen=True)
class Geometry:
    '''
    N logical (main) blocks, M holding blocks, block_size bytes per block.
    '''
    N: int
    M: int
    block_size: int

    def __post_init__(self):
        if self.N < 1:
            raise InvalidGeometry("N: Expecting at least 1 block, got {}".format(self.N))
        if self.M < 1:
            raise InvalidGeometry("M: Expecting at least 1 block, got {}".format(self.M))
        if self.block_size < 16 or self.block_size % 16:
            raise InvalidGeometry("block_size: Expecting a positive multiple of 16, got {}".format(self.block_size))


@dataclass
class WoramState:
    '''
    The client state that survives a restart, apart from the key and the root node.
    Epochs are the completed-cycle counts of (data main, data holding, pos main, pos holding).
    '''
    i: int = 0
    i_p: int = 0
    epochs: tuple = (0, 0, 0, 0)


class PosMap:
    '''Position map interface: getpos returns the pointer last set for a, NULL_POINTER if never set.'''

    def getpos(self, a):
        raise NotImplementedError

    def setpos(self, a, ptr):
        raise NotImplementedError


class DictPosMap(PosMap):
    '''In-memory position map, used by the toy/de-amortized schemes and as a test reference.'''

    def __init__(self, entries=None):
        self.entries = dict(entries) if entries else {}

    def getpos(self, a):
        return self.entries.get(a, NULL_POINTER)

    def setpos(self, a, ptr):
        if ptr.is_null():
            self.entries.pop(a, None)
        else:
            self.entries[a] = PosPointer(*ptr)

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


def refresh_range(i, N, M):
    '''
    Main-area bounds refreshed at step i: s = floor(i*N/M) mod N,
    e = floor((i+1)*N/M) mod N. The interval [s, e) may be empty and may wrap
    around N. Pure integer arithmetic, so huge i is fine.

    Returns:
    ---------
        (s, e)
    '''
    return (i * N // M) % N, ((i + 1) * N // M) % N


def refresh_addresses(i, N, M):
    '''Main addresses refreshed at step i, in refresh order. Handles a full lap (N <= refreshes) too.'''
    start = i * N // M
    stop = (i + 1) * N // M
    return [k % N for k in range(start, stop)]


def get_bit(block, o):
    '''Bit o of block: (byte[o // 8] >> (o % 8)) & 1.'''
    return (block[o >> 3] >> (o & 7)) & 1


def bit_diff(d_new, d_old):
    '''
    Lowest bit offset o where d_new and d_old differ, and q = bit o of d_new.
    Equal blocks give (0, bit 0 of d_new).

    Parameters:
    ------------
        d_new: bytes

        d_old: bytes

            Same length as d_new.

    Returns:
    ---------
        (o, q)
    '''
    if len(d_new) != len(d_old):
        raise SizeMismatch("d_old: Expecting {} bytes, got {}".format(len(d_new), len(d_old)))

    diff = np.frombuffer(d_new, dtype=np.uint8) ^ np.frombuffer(d_old, dtype=np.uint8)
    nonzero = np.flatnonzero(diff)
    if nonzero.size == 0:
        return 0, get_bit(d_new, 0)

    byte = int(nonzero[0])
    value = int(diff[byte])
    o = byte * 8 + (value & -value).bit_length() - 1
    return o, get_bit(d_new, o)


def region_epoch(count, length, j):
    '''
    Epoch of the ciphertext currently stored at slot j of a circular region of
    the given length after count writes. Epoch 0 is what create wrote; the
    k-th pass over the region writes epoch k.
    '''
    cycle, pos = divmod(count, length)
    return cycle + 1 if j < pos else cycle


def write_epoch(count, length):
    '''Epoch used by the write with sequence number count into a region of the given length.'''
    return count // length + 1


def initial_block(key, index, block_size):
    '''The bytes create stores at physical index: a zero block encrypted at epoch 0.'''
    return ctr_encrypt(key, CtrContext(0, index), bytes(block_size))


class CtrArea:
    '''
    Main and holding areas stored one block per slot, encrypted in counter mode
    with (epoch, physical index). Epochs are never stored; they follow from the
    engine's counters.

    Parameters:
    ------------
        store: BlockStore

        key: CipherKey

        N: int

            Main slots, at physical main_offset .. main_offset+N-1.

        M: int

            Holding slots, at physical holding_offset .. holding_offset+M-1.

        ledger: CounterLedger, Default None
    '''

    def __init__(self, store, key, N, M, main_offset, holding_offset, ledger=None):
        self.store = store
        self.key = key
        self.N = N
        self.M = M
        self.main_offset = main_offset
        self.holding_offset = holding_offset
        self.ledger = ledger

    def _read(self, index, epoch):
        return ctr_decrypt(self.key, CtrContext(epoch, index), self.store.read_block(index))

    def _write(self, index, epoch, data):
        if len(data) != self.store.block_size_bytes:
            raise SizeMismatch("data: Expecting {} bytes, got {}".format(self.store.block_size_bytes, len(data)))
        self.store.write_block(index, ctr_encrypt(self.key, CtrContext(epoch, index), data, self.ledger))

    def read_main(self, j, refreshed):
        return self._read(self.main_offset + j, region_epoch(refreshed, self.N, j))

    def write_main(self, j, refreshed, data):
        self._write(self.main_offset + j, write_epoch(refreshed, self.N), data)

    def read_holding(self, s, held):
        return self._read(self.holding_offset + s, region_epoch(held, self.M, s))

    def write_holding(self, s, held, data):
        self._write(self.holding_offset + s, write_epoch(held, self.M), data)


class FreshnessShadow:
    '''
    Observer that tags every holding slot with the (address, version) it holds
    and counts overwrites of a slot that still held the only copy of the
    newest version of its address.
    '''

    def __init__(self):
        self.latest = {}
        self.in_main = {}
        self.slot_tag = {}
        self.violations = 0
        self.first_violation = None
        self.step = 0

    def on_holding_write(self, s, a):
        tag = self.slot_tag.get(s)
        if tag is not None:
            old_addr, old_version = tag
            if self.latest.get(old_addr) == old_version and self.in_main.get(old_addr) != old_version:
                self.violations += 1
                if self.first_violation is None:
                    self.first_violation = (self.step, s, old_addr)
                    logging.error("holding slot %d overwritten at step %d while it held the newest copy of %d",
                                  s, self.step, old_addr)
        if a is None:
            self.slot_tag[s] = None
        else:
            version = self.latest.get(a, 0) + 1
            self.latest[a] = version
            self.slot_tag[s] = (a, version)
        self.step += 1

    def on_refresh(self, a):
        if a in self.latest:
            self.in_main[a] = self.latest[a]


class _Engine:

    def __init__(self, area, N, M, posmap=None, i=0, shadow=None):
        if N < 1 or M < 1:
            raise InvalidGeometry("N, M: Expecting positive sizes, got N={} M={}".format(N, M))
        self.area = area
        self.N = N
        self.M = M
        self.posmap = posmap if posmap is not None else DictPosMap()
        self.shadow = shadow
        self.i = i
        self.held = i
        self.refreshed = self._refreshed_after(i)

    def _refreshed_after(self, i):
        return i * self.N // self.M

    def _check(self, a):
        if not 0 <= a < self.N:
            raise AddressOutOfRange("a: Expecting an address in [0, {}), got {}".format(self.N, a))

    def _write_holding(self, a, d):
        s = self.i % self.M
        if self.shadow is not None:
            self.shadow.on_holding_write(s, a)
        self.area.write_holding(s, self.i, d)
        self.held = self.i + 1
        return s

    def _write_main(self, target, data):
        self.area.write_main(target, self.refreshed, data)
        self.refreshed += 1
        if self.shadow is not None:
            self.shadow.on_refresh(target)

    def _finish_step(self):
        self.i += 1
        self.held = self.i


class ToyWoram(_Engine):
    '''
    Holding area the same size as the main area. Every write goes to holding
    slot i mod N; once the holding area is full the whole main area is
    rewritten from the freshest copies and the position map is cleared.
    '''

    def __init__(self, area, N, posmap=None, i=0, shadow=None):
        super().__init__(area, N, N, posmap, i, shadow)
        self.refreshed = (i // N) * N

    def read(self, a):
        self._check(a)
        ptr = self.posmap.getpos(a)
        if ptr.is_null():
            return self.area.read_main(a, self.refreshed)
        return self.area.read_holding(ptr.a_h, self.held)

    def write(self, a, d):
        self._check(a)
        s = self._write_holding(a, d)
        self.posmap.setpos(a, PosPointer(s))
        self._finish_step()

        if self.i % self.N == 0:
            fresh = [self.read(x) for x in range(self.N)]
            for x in range(self.N):
                self._write_main(x, fresh[x])
            for x in range(self.N):
                self.posmap.setpos(x, NULL_POINTER)


class DeamortizedWoram(_Engine):
    '''
    Every write goes to holding slot i mod M and refreshes the main addresses of
    refresh_range(i, N, M); a refreshed address points back to its main slot.
    '''

    def read(self, a):
        self._check(a)
        ptr = self.posmap.getpos(a)
        if ptr.is_null():
            return self.area.read_main(a, self.refreshed)
        return self.area.read_holding(ptr.a_h, self.held)

    def write(self, a, d):
        self._check(a)
        s = self._write_holding(a, d)
        self.posmap.setpos(a, PosPointer(s))
        for target in refresh_addresses(self.i, self.N, self.M):
            self._write_main(target, self.read(target))
            self.posmap.setpos(target, NULL_POINTER)
        self._finish_step()


class DetWoram(_Engine):
    '''
    The pointer based deterministic write-only ORAM.

    A write stores d in holding slot i mod M, records (a_h, o, q) where o is the
    lowest bit in which d differs from the current main copy and q is d's bit
    there, then refreshes the main addresses scheduled for step i. A read
    returns the main copy when its bit o equals q, the holding copy otherwise.
    The position map is never updated on refresh.

    Parameters:
    ------------
        area: object

            Provides read_main/write_main/read_holding/write_holding.

        N: int

        M: int

        posmap: PosMap, Default None

            In-memory DictPosMap when None. The trie position map is plugged in here.

        i: int, Default 0

            Number of writes already performed (restored from the superblock).

        shadow: FreshnessShadow, Default None
    '''

    def read(self, a, getpos=None):
        self._check(a)
        ptr = (getpos or self.posmap.getpos)(a)
        main = self.area.read_main(a, self.refreshed)
        if ptr.is_null() or get_bit(main, ptr.o) == ptr.q:
            return main
        return self.area.read_holding(ptr.a_h, self.held)

    def write(self, a, d, setpos=None, getpos=None, resolve=None):
        '''
        Parameters:
        ------------
            a: int

            d: bytes

            setpos: callable, Default None

                Receives (a, PosPointer). Defaults to the engine's position map.

            getpos: callable, Default None

                Position lookups for the refresh reads of this step.

            resolve: callable, Default None

                resolve(address) may return the current plaintext of an address
                directly (or None), bypassing the device for refresh reads.
        '''
        self._check(a)
        s = self._write_holding(a, d)
        o, q = bit_diff(d, self.area.read_main(a, self.refreshed))
        (setpos or self.posmap.setpos)(a, PosPointer(s, o, q))
        self._refresh(getpos, resolve)
        self._finish_step()

    def write_dummy(self, d, getpos=None, resolve=None):
        '''Holding write with no position update, keeping the step schedule.'''
        self._write_holding(None, d)
        self._refresh(getpos, resolve)
        self._finish_step()

    def _refresh(self, getpos, resolve):
        for target in refresh_addresses(self.i, self.N, self.M):
            data = resolve(target) if resolve is not None else None
            if data is None:
                data = self.read(target, getpos=getpos)
            self._write_main(target, data)
