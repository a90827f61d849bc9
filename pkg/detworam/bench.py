'''
This module contains the workload drivers run against a live container: the
reference-map fuzzer used as the correctness oracle and the op-count benchmark.

'''

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .container import create
from .layout import HIVE

SEQ_W = 'seqw'
SEQ_R = 'seqr'
RAND_W = 'randw'
RAND_R = 'randr'
WORKLOADS = (SEQ_W, SEQ_R, RAND_W, RAND_R)


@dataclass
class FuzzResult:
    ops: int
    reads: int = 0
    writes: int = 0
    reopens: int = 0
    mismatches: int = 0
    first_mismatch: tuple = None

    @property
    def passed(self):
        return self.mismatches == 0

    def to_text(self):
        line = 'fuzz ops={} reads={} writes={} reopens={} mismatches={} result {}'.format(
            self.ops, self.reads, self.writes, self.reopens, self.mismatches, 'PASS' if self.passed else 'FAIL')
        if self.first_mismatch is not None:
            line += ' first_mismatch="op {} address {}"'.format(*self.first_mismatch)
        return line + '\n'

    def summary(self):
        values = asdict(self)
        values['passed'] = self.passed
        return values


def fuzz(handle, ops, seed=0, write_fraction=0.5, reopen_every=None):
    '''
    Runs a seeded random read/write workload and checks every read against an
    in-memory reference map. Unwritten addresses must read back as zero blocks.

    Parameters:
    ------------
        handle: Container

        ops: int

            Number of logical operations.

        seed: int, Default 0

        write_fraction: float, Default 0.5

            Probability that an operation is a write.

        reopen_every: int, Default None

            Rebuild client state from the device every this many operations.

    Returns:
    ---------
        FuzzResult
    '''
    if ops is None or ops < 0:
        raise ValueError("ops: Expecting a non-negative count, got {}".format(ops))
    if not 0 <= write_fraction <= 1:
        raise ValueError("write_fraction: Expecting a value in [0, 1], got {}".format(write_fraction))

    rng = np.random.default_rng(seed)
    zero = bytes(handle.block_size)
    reference = {}
    result = FuzzResult(ops)

    for n in range(ops):
        a = int(rng.integers(handle.N))
        if rng.random() < write_fraction:
            d = rng.bytes(handle.block_size)
            handle.write(a, d)
            reference[a] = d
            result.writes += 1
        else:
            result.reads += 1
            if handle.read(a) != reference.get(a, zero):
                result.mismatches += 1
                if result.first_mismatch is None:
                    result.first_mismatch = (n, a)
                    logging.error("fuzz: read of address %d at op %d disagrees with the reference map", a, n)
        if reopen_every and (n + 1) % reopen_every == 0:
            handle.reopen()
            result.reopens += 1

    logging.info("fuzz %s: %d ops, %d mismatches", handle.mode, ops, result.mismatches)
    return result


@dataclass
class BenchResult:
    '''
    Operation counts of one workload run. Physical counts are payload-only:
    superblock writes are reported separately in state_writes. Scheme specific
    figures such as the HiVE stash high-water mark go to extra, which the CSV
    row leaves out.
    '''
    scheme: str
    workload: str
    ops: int
    logical_reads: int = 0
    logical_writes: int = 0
    physical_reads: int = 0
    physical_writes: int = 0
    state_writes: int = 0
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def write_ratio(self):
        return self.physical_writes / self.logical_writes if self.logical_writes else 0.0

    @property
    def read_ratio(self):
        return self.physical_reads / self.logical_reads if self.logical_reads else 0.0

    @property
    def ops_per_second(self):
        return self.ops / self.wall_seconds if self.wall_seconds > 0 else float('inf')

    def summary(self):
        values = asdict(self)
        values.update(write_ratio=self.write_ratio, read_ratio=self.read_ratio)
        return values

    def to_frame(self):
        return pd.DataFrame([self.summary()]).drop(columns=['extra'])

    def to_text(self):
        line = ('bench scheme={} workload={} ops={} logical_writes={} logical_reads={} physical_writes={} '
                'physical_reads={} state_writes={} write_ratio={:.4f} read_ratio={:.4f} wall_seconds={:.3f}').format(
                    self.scheme, self.workload, self.ops, self.logical_writes, self.logical_reads,
                    self.physical_writes, self.physical_reads, self.state_writes, self.write_ratio,
                    self.read_ratio, self.wall_seconds)
        for name, value in sorted(self.extra.items()):
            line += ' {}={}'.format(name, value)
        return line + '\n'


def workload_addresses(workload, ops, N, seed=0):
    '''Logical addresses a workload touches, in order.'''
    if workload not in WORKLOADS:
        raise ValueError("workload: Expecting one of {}, got {}".format(list(WORKLOADS), workload))
    if workload in (SEQ_W, SEQ_R):
        return np.arange(ops, dtype=np.int64) % N
    return np.random.default_rng(seed).integers(N, size=ops)


def bench(handle, workload, ops, seed=0):
    '''
    Runs one workload and reports logical and physical counts. Read workloads
    read whatever the container holds; run a write workload first to fill it.

    Parameters:
    ------------
        handle: Container

        workload: str

            One of seqw, seqr, randw, randr.

        ops: int

        seed: int, Default 0

            Seeds the random addresses and the written data.

    Returns:
    ---------
        BenchResult
    '''
    if ops is None or ops < 0:
        raise ValueError("ops: Expecting a non-negative count, got {}".format(ops))

    addresses = workload_addresses(workload, ops, handle.N, seed)
    data_rng = np.random.default_rng(seed + 1)
    writing = workload in (SEQ_W, RAND_W)
    store = handle.store
    reads0, writes0, state0 = store.reads, store.writes, handle.state_writes

    start = time.perf_counter()
    for a in addresses:
        if writing:
            handle.write(int(a), data_rng.bytes(handle.block_size))
        else:
            handle.read(int(a))
    elapsed = time.perf_counter() - start

    state_writes = handle.state_writes - state0
    result = BenchResult(handle.mode, workload, ops,
                         logical_reads=0 if writing else ops,
                         logical_writes=ops if writing else 0,
                         physical_reads=store.reads - reads0,
                         physical_writes=store.writes - writes0 - state_writes,
                         state_writes=state_writes, wall_seconds=elapsed)
    if handle.mode == HIVE:
        result.extra['max_stash'] = handle.engine.max_stash
    logging.info("bench %s %s: write ratio %.4f, read ratio %.4f", handle.mode, workload,
                 result.write_ratio, result.read_ratio)
    return result


def random_addresses(N, writes, seed):
    return np.random.default_rng(seed).integers(N, size=writes)


def write_sequence_trace(config, key, addresses, seed=0):
    '''
    Writes the address sequence into a fresh in-memory container and returns
    the recorded trace. Data is random, drawn from seed.
    '''
    handle = create(config, key, sparse=True, durable=False)
    rng = np.random.default_rng(seed)
    handle.start_trace()
    for a in addresses:
        handle.write(int(a), rng.bytes(handle.block_size))
    return handle.stop_trace()


def snapshot_sequence(config, key, addresses, every, seed=0):
    '''
    Device images of a fresh in-memory container taken before the first write
    and after every `every` writes of the address sequence.
    '''
    if every < 1:
        raise ValueError("every: Expecting a positive interval, got {}".format(every))
    handle = create(config, key, durable=False)
    rng = np.random.default_rng(seed)
    snapshots = [handle.store.snapshot()]
    for n, a in enumerate(addresses, start=1):
        handle.write(int(a), rng.bytes(handle.block_size))
        if n % every == 0:
            if handle.pos_area is not None:
                handle.pos_area.close()
            snapshots.append(handle.store.snapshot())
    return snapshots


def read_sequence_trace(config, key, addresses, reads, seed=0):
    '''
    Writes the address sequence into a fresh in-memory container, then returns
    the trace of reads uniformly random logical reads.
    '''
    handle = create(config, key, sparse=True, durable=False)
    rng = np.random.default_rng(seed)
    for a in addresses:
        handle.write(int(a), rng.bytes(handle.block_size))
    handle.start_trace()
    for a in random_addresses(config.N, reads, seed + 1):
        handle.read(int(a))
    return handle.stop_trace()
