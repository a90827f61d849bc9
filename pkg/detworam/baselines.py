'''
This module contains the comparison schemes.

HiveWoram is the randomized write-only ORAM with a stash: every logical write
touches k uniformly random slots. The DataLair part is a pure simulation of its
write policy plus the distinguishing adversary, used as a Monte-Carlo
demonstration that biasing slot choice towards free blocks leaks.

'''

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .crypto import iv_encrypt, iv_decrypt, iv_blob_size
from .errors import AddressOutOfRange, InvalidGeometry, SizeMismatch

NULL_SLOT_ADDR = 0xFFFFFFFFFFFFFFFF
STASH_WARNING = 50


def hive_slot_size(block_size):
    '''Physical slot size for HiVE: IV-encrypted 8-byte address plus the block.'''
    return iv_blob_size(8 + block_size)


def hive_initial_slot(key, block_size):
    return iv_encrypt(key, struct.pack('<Q', NULL_SLOT_ADDR) + bytes(block_size))


class HiveWoram:
    '''
    Randomized write-only ORAM over M >= 2N slots with an in-memory position map.

    Parameters:
    ------------
        store: BlockStore

            Block size must be hive_slot_size(block_size).

        key: CipherKey

        N: int

        M: int

        block_size: int

            Logical block size.

        k: int, Default 3

            Slots touched per logical write.

        offset: int, Default 0

            Physical index of slot 0.

        seed: int, Default None

        state: dict, Default None

            Client state from client_state(), used when reopening.
    '''

    def __init__(self, store, key, N, M, block_size, k=3, offset=0, seed=None, state=None):
        if M < N:
            raise InvalidGeometry("M: Expecting at least N = {} slots, got {}".format(N, M))
        if k < 1:
            raise InvalidGeometry("k: Expecting at least 1 write per operation, got {}".format(k))
        if store.block_size_bytes != hive_slot_size(block_size):
            raise SizeMismatch("store: Expecting {}-byte slots, got {}".format(
                hive_slot_size(block_size), store.block_size_bytes))

        self.store = store
        self.key = key
        self.N = N
        self.M = M
        self.block_size = block_size
        self.k = k
        self.offset = offset
        self.rng = np.random.default_rng(seed)
        self.pos = np.full(N, -1, dtype=np.int64)
        self.stash = OrderedDict()
        self.slot_addr = np.full(M, -1, dtype=np.int64)
        self.max_stash = 0
        self.writes = 0
        if state is not None:
            self.load_state(state)

    def _read_slot(self, r):
        plain = iv_decrypt(self.key, self.store.read_block(self.offset + r))
        a = struct.unpack_from('<Q', plain)[0]
        return (None if a == NULL_SLOT_ADDR else a), plain[8:]

    def _write_slot(self, r, a, d):
        stored = NULL_SLOT_ADDR if a is None else a
        blob = iv_encrypt(self.key, struct.pack('<Q', stored) + d, capacity=self.store.block_size_bytes)
        self.store.write_block(self.offset + r, blob)

    def _check(self, a):
        if not 0 <= a < self.N:
            raise AddressOutOfRange("a: Expecting an address in [0, {}), got {}".format(self.N, a))

    def read(self, a):
        self._check(a)
        if a in self.stash:
            return self.stash[a]
        if self.pos[a] < 0:
            return bytes(self.block_size)
        return self._read_slot(int(self.pos[a]))[1]

    def write(self, a, d):
        '''Stashes (a, d), then visits exactly k random slots, filling free ones from the stash.'''
        self._check(a)
        if len(d) != self.block_size:
            raise SizeMismatch("d: Expecting {} bytes, got {}".format(self.block_size, len(d)))

        self.stash[a] = bytes(d)
        self.stash.move_to_end(a)
        for _ in range(self.k):
            r = int(self.rng.integers(self.M))
            held, data = self._read_slot(r)
            free = held is None or self.pos[held] != r
            if free and self.stash:
                placed, placed_data = self.stash.popitem(last=False)
                self._write_slot(r, placed, placed_data)
                self.pos[placed] = r
                self.slot_addr[r] = placed
            else:
                self._write_slot(r, held, data)

        self.writes += 1
        if len(self.stash) > self.max_stash:
            self.max_stash = len(self.stash)
            if self.max_stash > STASH_WARNING:
                logging.warning("HiVE stash holds %d blocks after %d writes", self.max_stash, self.writes)

    def occupied_slots(self):
        '''Slots r with pos[D[r].a] == r, from the shadow of stored addresses.'''
        held = self.slot_addr
        mask = held >= 0
        mask[mask] = self.pos[held[mask]] == np.flatnonzero(mask)
        return set(np.flatnonzero(mask).tolist())

    def check_occupancy(self):
        '''Cross-checks the free-slot rule against the position map.'''
        mapped = set(self.pos[self.pos >= 0].tolist())
        return mapped == self.occupied_slots()

    def client_state(self):
        return {'pos': self.pos.copy(), 'stash': OrderedDict(self.stash), 'slot_addr': self.slot_addr.copy(),
                'rng': self.rng.bit_generator.state, 'max_stash': self.max_stash, 'writes': self.writes}

    def load_state(self, state):
        self.pos = np.asarray(state['pos'], dtype=np.int64).copy()
        self.stash = OrderedDict(state['stash'])
        self.slot_addr = np.asarray(state['slot_addr'], dtype=np.int64).copy()
        self.rng.bit_generator.state = state['rng']
        self.max_stash = state['max_stash']
        self.writes = state['writes']


class DataLairState:
    '''
    Occupancy-level simulation of DataLair: 2N slots, which address each slot
    holds, the free list, the stash and the RNG. Block contents are irrelevant
    to the attack and are not modelled.
    '''

    def __init__(self, N, k=3, rng=None):
        if k < 3:
            raise InvalidGeometry("k: Expecting k >= 3, got {}".format(k))
        if N <= 2 * k:
            raise InvalidGeometry("N: Expecting N > 2k = {}, got {}".format(2 * k, N))
        self.N = N
        self.k = k
        self.rng = rng if rng is not None else np.random.default_rng()
        self.slot_addr = [-1] * (2 * N)
        self.addr_slot = {}
        self.free = list(range(2 * N))
        self.free_index = {slot: idx for idx, slot in enumerate(self.free)}
        self.stash = OrderedDict()
        self.last_free = []

    def _take_free(self, slot):
        idx = self.free_index.pop(slot)
        last = self.free.pop()
        if last != slot:
            self.free[idx] = last
            self.free_index[last] = idx

    def _give_free(self, slot):
        self.free_index[slot] = len(self.free)
        self.free.append(slot)

    def is_free(self, slot):
        return slot in self.free_index

    @property
    def occupancy(self):
        return len(self.addr_slot)

    def clone(self, rng=None):
        other = DataLairState.__new__(DataLairState)
        other.N, other.k = self.N, self.k
        other.rng = rng if rng is not None else np.random.default_rng(int(self.rng.integers(2 ** 63)))
        other.slot_addr = list(self.slot_addr)
        other.addr_slot = dict(self.addr_slot)
        other.free = list(self.free)
        other.free_index = dict(self.free_index)
        other.stash = OrderedDict(self.stash)
        other.last_free = []
        return other


def datalair_write(state, a, d=None):
    '''
    One DataLair write of address a. Builds S0 (k random free slots) and a
    disjoint S1 (k random slots, colliding draws resampled), then k times flips
    a coin b and removes a random slot from S_b; a slot from S0 receives the
    oldest stash item when the stash is not empty.

    Returns:
    ---------
        U: list of the k touched slots, in draw order.
    '''
    rng, k = state.rng, state.k
    state.stash[a] = d
    state.stash.move_to_end(a)

    s0 = [state.free[idx] for idx in rng.choice(len(state.free), k, replace=False)]
    taken = set(s0)
    s1 = []
    while len(s1) < k:
        r = int(rng.integers(2 * state.N))
        if r not in taken:
            taken.add(r)
            s1.append(r)

    touched = []
    state.last_free = []
    for _ in range(k):
        b = int(rng.integers(2))
        pool = s1 if b else s0
        u = pool.pop(int(rng.integers(len(pool))))
        state.last_free.append(state.is_free(u))
        if not b and state.stash:
            placed, _ = state.stash.popitem(last=False)
            old = state.addr_slot.get(placed)
            if old is not None:
                state.slot_addr[old] = -1
                state._give_free(old)
            state._take_free(u)
            state.slot_addr[u] = placed
            state.addr_slot[placed] = u
        touched.append(u)
    return touched


def datalair_init(N, k=3, rng=None, lam=None, attempts=100):
    '''
    Writes addresses 0..N-1, then address 0 lam more times, until exactly N
    slots are occupied and the stash is empty.
    '''
    rng = rng if rng is not None else np.random.default_rng()
    lam = N if lam is None else lam
    for _ in range(attempts):
        state = DataLairState(N, k, rng)
        for a in range(N):
            datalair_write(state, a)
        for _ in range(lam):
            datalair_write(state, 0)
        if state.occupancy == N and not state.stash:
            return state
    raise RuntimeError("datalair_init: no state with exactly {} occupied slots after {} attempts".format(N, attempts))


def datalair_adversary(trace, rng=None):
    '''
    Given the slot sets (U1, U2, U3) of three writes, outputs 0 when the first
    slot of U1 is absent from U2 and present in U3, a fair coin otherwise.
    '''
    u1, u2, u3 = trace
    if u1[0] not in u2 and u1[0] in u3:
        return 0
    rng = rng if rng is not None else np.random.default_rng()
    return int(rng.integers(2))


def event_e(trace):
    u1, u2, u3 = trace
    return u1[0] not in u2 and u1[0] in u3


SEQUENCES = {0: (0, 0, 2), 1: (0, 1, 2)}


def _attack_batch(N, k, seq, trials, seed, pool_size, lam):
    rng = np.random.default_rng(list(seed) + [seq, 0])
    pool = [datalair_init(N, k, np.random.default_rng(list(seed) + [2, n + 1]), lam) for n in range(pool_size)]
    zeros = 0
    events = 0
    addresses = SEQUENCES[seq]
    for _ in range(trials):
        state = pool[int(rng.integers(pool_size))].clone(rng)
        trace = [datalair_write(state, a) for a in addresses]
        if event_e(trace):
            events += 1
            zeros += 1
        elif not rng.integers(2):
            zeros += 1
    return zeros, events


def wilson_interval(successes, total, confidence=0.99):
    '''Wilson score interval for a binomial proportion.'''
    if total <= 0:
        return (0.0, 1.0)
    z = stats.norm.ppf(0.5 + confidence / 2)
    p = successes / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = (p + z2 / (2.0 * total)) / denom
    margin = (z * ((p * (1.0 - p) / total + z2 / (4.0 * total * total)) ** 0.5)) / denom
    return (max(0.0, center - margin), min(1.0, center + margin))


def newcombe_interval(s0, n0, s1, n1, confidence=0.99):
    '''Interval for p0 - p1 from the two Wilson intervals (Newcombe's hybrid score method).'''
    p0, p1 = s0 / n0, s1 / n1
    l0, u0 = wilson_interval(s0, n0, confidence)
    l1, u1 = wilson_interval(s1, n1, confidence)
    diff = p0 - p1
    lower = diff - ((p0 - l0) ** 2 + (u1 - p1) ** 2) ** 0.5
    upper = diff + ((u0 - p0) ** 2 + (p1 - l1) ** 2) ** 0.5
    return lower, upper


def advantage_bound(N, k):
    '''The analytic lower bound (N - 2k) / (4 N^2) on Pr[E | seq0] - Pr[E | seq1].'''
    return (N - 2 * k) / (4 * N * N)


@dataclass
class AttackReport:
    N: int
    k: int
    trials: int
    seed: int
    events0: int
    events1: int
    zeros0: int
    zeros1: int
    confidence: float = 0.99

    @property
    def p0(self):
        return self.events0 / self.trials

    @property
    def p1(self):
        return self.events1 / self.trials

    @property
    def advantage(self):
        return self.p0 - self.p1

    @property
    def bound(self):
        return advantage_bound(self.N, self.k)

    def intervals(self):
        return (wilson_interval(self.events0, self.trials, self.confidence),
                wilson_interval(self.events1, self.trials, self.confidence))

    def difference_interval(self):
        return newcombe_interval(self.events0, self.trials, self.events1, self.trials, self.confidence)

    @property
    def distinguishes(self):
        '''The difference interval excludes zero.'''
        return self.difference_interval()[0] > 0

    @property
    def exceeds_bound(self):
        lower, upper = self.difference_interval()
        return self.distinguishes and self.advantage >= self.bound - (upper - lower) / 2

    def summary(self):
        (l0, u0), (l1, u1) = self.intervals()
        lower, upper = self.difference_interval()
        return {'N': self.N, 'k': self.k, 'trials': self.trials, 'seed': self.seed,
                'p0': self.p0, 'p1': self.p1, 'p0_interval': [l0, u0], 'p1_interval': [l1, u1],
                'adversary_zero0': self.zeros0 / self.trials, 'adversary_zero1': self.zeros1 / self.trials,
                'advantage': self.advantage, 'advantage_interval': [lower, upper],
                'bound': self.bound, 'distinguishes': self.distinguishes, 'exceeds_bound': self.exceeds_bound}

    def to_text(self):
        s = self.summary()
        lines = ['DataLair distinguishing attack N={N} k={k} trials={trials} seed={seed}'.format(**s),
                 'p0 = {:.6f}  [{:.6f}, {:.6f}]'.format(s['p0'], *s['p0_interval']),
                 'p1 = {:.6f}  [{:.6f}, {:.6f}]'.format(s['p1'], *s['p1_interval']),
                 'advantage = {:.6f}  [{:.6f}, {:.6f}]'.format(s['advantage'], *s['advantage_interval']),
                 'bound (N-2k)/(4N^2) = {:.6f}'.format(s['bound']),
                 'distinguishes: {}  exceeds bound: {}'.format(s['distinguishes'], s['exceeds_bound'])]
        return '\n'.join(lines)


def run_attack(N=64, k=3, trials=10 ** 6, seed=0, n_jobs=1, batches=None, pool_size=16, lam=None):
    '''
    Runs the distinguisher trials times against each write sequence, in
    parallel batches with independent seeds, and merges the counts.

    Parameters:
    ------------
        N: int, Default 64

        k: int, Default 3

        trials: int, Default 1000000

            Trials per sequence.

        seed: int, Default 0

        n_jobs: int, Default 1

            Passed to joblib.Parallel.

        batches: int, Default None

            Number of batches per sequence, max(1, n_jobs) * 4 when None.

        pool_size: int, Default 16

            Distinct initial states per batch; trials start from copies.

    Returns:
    ---------
        AttackReport
    '''
    if trials < 1:
        raise ValueError("trials: Expecting a positive count, got {}".format(trials))
    batches = batches or max(1, n_jobs if n_jobs and n_jobs > 0 else 4) * 4
    batches = min(batches, trials)
    sizes = [trials // batches + (1 if n < trials % batches else 0) for n in range(batches)]

    jobs = [delayed(_attack_batch)(N, k, seq, size, (seed, n), pool_size, lam)
            for seq in (0, 1) for n, size in enumerate(sizes)]
    results = Parallel(n_jobs=n_jobs)(jobs)

    zeros0 = sum(r[0] for r in results[:batches])
    events0 = sum(r[1] for r in results[:batches])
    zeros1 = sum(r[0] for r in results[batches:])
    events1 = sum(r[1] for r in results[batches:])
    report = AttackReport(N, k, trials, seed, events0, events1, zeros0, zeros1)
    logging.info("attack N=%d k=%d trials=%d: p0=%.5f p1=%.5f advantage=%.5f bound=%.5f",
                 N, k, trials, report.p0, report.p1, report.advantage, report.bound)
    return report


def free_choice_rate(N=64, k=3, writes=10 ** 5, seed=0):
    '''
    Fraction of touched slots that were free when drawn, over writes random
    writes after init. Anything above 1/2 is the bias the attack exploits.
    '''
    rng = np.random.default_rng(seed)
    state = datalair_init(N, k, rng)
    free = 0
    for _ in range(writes):
        datalair_write(state, int(rng.integers(N)))
        free += sum(state.last_free)
    return free / (writes * k)
