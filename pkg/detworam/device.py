'''
This module contains the fixed-size block storage every scheme talks to, and the
recorder that captures the physical access pattern (the trace) as it happens.

Two backends are provided: an in-memory store backed by a numpy array (or a
sparse dict when an initializer is supplied) and a file store doing positioned
I/O into a region of one container file.

'''

import json
import logging
import operator
import os
import threading
from typing import NamedTuple

import numpy as np
import pandas as pd

from .errors import IndexOutOfRange, SizeMismatch, IoFailure

READ = 'R'
WRITE = 'W'


class TraceEvent(NamedTuple):
    seq: int
    kind: str
    index: int

    def to_line(self):
        return '{},{},{}\n'.format(self.seq, self.kind, self.index)


class Trace:
    '''
    An ordered list of TraceEvents plus the metadata needed to interpret them
    (scheme name, geometry, where the payload region starts, logical op counts).

    Parameters:
    ------------
        events: list of TraceEvent

        meta: dict, Default None

            Free-form metadata, kept JSON serialisable.
    '''

    def __init__(self, events=None, meta=None):
        self.events = list(events) if events is not None else []
        self.meta = dict(meta) if meta else {}

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, item):
        return self.events[item]

    def indices(self, kind=None):
        '''Physical indices of the events as an int64 array, optionally of one kind only.'''
        return np.fromiter((e.index for e in self.events if kind is None or e.kind == kind),
                           dtype=np.int64)

    def count(self, kind=None):
        if kind is None:
            return len(self.events)
        return sum(1 for e in self.events if e.kind == kind)

    def to_frame(self):
        '''Returns the trace as a DataFrame with columns seq, kind, index.'''
        return pd.DataFrame(self.events, columns=['seq', 'kind', 'index'])


class TraceRecorder:
    '''
    Collects TraceEvents in issue order. Appends are serialised with a lock so a
    recorder can be shared by several stores (the seq counter stays global).

    Parameters:
    ------------
        meta: dict, Default None

            Metadata copied into every Trace produced by this recorder.

        sink: file object, Default None

            When given, every event is also streamed to it in the trace line format.

        keep: bool, Default True

            Keep events in memory. Switch off for long streamed runs.
    '''

    def __init__(self, meta=None, sink=None, keep=True):
        self.meta = dict(meta) if meta else {}
        self.sink = sink
        self.keep = keep
        self._events = []
        self._seq = 0
        self._lock = threading.Lock()

    def record(self, kind, index):
        with self._lock:
            event = TraceEvent(self._seq, kind, index)
            self._seq += 1
            if self.keep:
                self._events.append(event)
            if self.sink is not None:
                self.sink.write(event.to_line())

    def trace(self):
        with self._lock:
            return Trace(self._events, self.meta)

    def clear(self):
        with self._lock:
            self._events = []
            self._seq = 0


def filter_writes(trace):
    '''
    Keeps only the WRITE events of a trace, order preserved. This is the WOnly
    view an adversary gets in the write-only model.

    Parameters:
    ------------
        trace: Trace

    Returns:
    ---------
        Trace with the same metadata and only WRITE events.
    '''
    if trace is None:
        raise ValueError("trace: Expecting a Trace, got 'None'")

    return Trace([e for e in trace if e.kind == WRITE], trace.meta)


def write_trace(trace, path):
    '''
    Exports a trace as ASCII: a '#' header line holding the JSON metadata, then
    one '<seq>,<R|W>,<index>' line per event.
    '''
    with open(path, 'w') as out:
        out.write('# ' + json.dumps(trace.meta, sort_keys=True) + '\n')
        for event in trace:
            out.write(event.to_line())


def read_trace(path):
    '''Reads a trace written by write_trace (or streamed by a TraceRecorder sink).'''
    events = []
    meta = {}
    with open(path) as src:
        for lineno, line in enumerate(src):
            line = line.strip()
            if not line:
                continue
            if line.startswith('#'):
                meta.update(json.loads(line[1:].strip() or '{}'))
                continue
            try:
                seq, kind, index = line.split(',')
            except ValueError:
                raise ValueError("{}:{}: Expecting '<seq>,<R|W>,<index>', got {!r}".format(path, lineno + 1, line))
            if kind not in (READ, WRITE):
                raise ValueError("{}:{}: Expecting kind R or W, got {!r}".format(path, lineno + 1, kind))
            events.append(TraceEvent(int(seq), kind, int(index)))

    return Trace(events, meta)


class BlockStore:
    '''
    Base class for fixed-size block storage. Every read and write moves exactly
    block_size_bytes bytes; indices outside [0, num_blocks) are errors.

    Subclasses implement _read and _write. Physical operation counters are always
    kept; trace events are appended only when a recorder is attached.

    Reads and writes are serialised through one lock, and trace events are recorded
    under it, so a trace lists operations in the order the device ran them.
    '''

    def __init__(self, block_size_bytes, num_blocks, recorder=None):
        if block_size_bytes is None or int(block_size_bytes) <= 0:
            raise ValueError("block_size_bytes: Expecting a positive integer, got {}".format(block_size_bytes))
        if num_blocks is None or int(num_blocks) <= 0:
            raise ValueError("num_blocks: Expecting a positive integer, got {}".format(num_blocks))

        self.block_size_bytes = int(block_size_bytes)
        self.num_blocks = int(num_blocks)
        self.recorder = recorder
        self.reads = 0
        self.writes = 0
        self._lock = threading.Lock()

    def attach(self, recorder):
        '''Starts recording into recorder (None detaches).'''
        self.recorder = recorder

    def _check_index(self, index):
        index = operator.index(index)
        if not 0 <= index < self.num_blocks:
            raise IndexOutOfRange("index: Expecting a value in [0, {}), got {}".format(self.num_blocks, index))
        return index

    def read_block(self, index):
        index = self._check_index(index)
        with self._lock:
            data = self._read(index)
            self.reads += 1
            if self.recorder is not None:
                self.recorder.record(READ, index)
        return data

    def write_block(self, index, data):
        index = self._check_index(index)
        if data is None or len(data) != self.block_size_bytes:
            raise SizeMismatch("data: Expecting {} bytes, got {}".format(
                self.block_size_bytes, None if data is None else len(data)))
        with self._lock:
            self._write(index, bytes(data))
            self.writes += 1
            if self.recorder is not None:
                self.recorder.record(WRITE, index)

    def snapshot(self):
        '''Full device image as a (num_blocks, block_size_bytes) uint8 array.'''
        raise NotImplementedError

    def flush(self):
        pass

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read(self, index):
        raise NotImplementedError

    def _write(self, index, data):
        raise NotImplementedError


class MemoryBlockStore(BlockStore):
    '''
    In-memory block store. Fresh blocks read as zero bytes.

    Parameters:
    ------------
        block_size_bytes: int

        num_blocks: int

        recorder: TraceRecorder, Default None

        initializer: callable, Default None

            When given the store is sparse: a block that was never written is
            produced by initializer(index) on first touch and kept from then on.
            Used to stand in for the bytes a container create would have written
            without materialising every block.
    '''

    def __init__(self, block_size_bytes, num_blocks, recorder=None, initializer=None):
        super().__init__(block_size_bytes, num_blocks, recorder)
        self.initializer = initializer
        if initializer is None:
            self._blocks = np.zeros((self.num_blocks, self.block_size_bytes), dtype=np.uint8)
        else:
            self._sparse = {}

    def _read(self, index):
        if self.initializer is None:
            return self._blocks[index].tobytes()
        data = self._sparse.get(index)
        if data is None:
            data = bytes(self.initializer(index))
            self._sparse[index] = data
        return data

    def _write(self, index, data):
        if self.initializer is None:
            self._blocks[index] = np.frombuffer(data, dtype=np.uint8)
        else:
            self._sparse[index] = data

    def snapshot(self):
        with self._lock:
            if self.initializer is None:
                return self._blocks.copy()
            image = np.empty((self.num_blocks, self.block_size_bytes), dtype=np.uint8)
            for index in range(self.num_blocks):
                image[index] = np.frombuffer(self._read(index), dtype=np.uint8)
            return image


class FileBlockStore(BlockStore):
    '''
    Block store over a region of a container file, using positioned I/O.

    Parameters:
    ------------
        path: str, Path

            Container file.

        block_size_bytes: int

        num_blocks: int

        offset: int, Default 0

            Byte offset of block 0 inside the file.

        create: bool, Default False

            Create (or extend) the file so the region exists, zero-filled.

        recorder: TraceRecorder, Default None
    '''

    def __init__(self, path, block_size_bytes, num_blocks, offset=0, create=False, recorder=None):
        super().__init__(block_size_bytes, num_blocks, recorder)
        self.path = os.fspath(path)
        self.offset = int(offset)
        flags = os.O_RDWR | (os.O_CREAT if create else 0)
        try:
            self._fd = os.open(self.path, flags, 0o600)
            end = self.offset + self.num_blocks * self.block_size_bytes
            if create and os.fstat(self._fd).st_size < end:
                os.ftruncate(self._fd, end)
        except OSError as e:
            raise IoFailure("path: Could not open container {}: {}".format(self.path, e)) from e

        logging.debug("opened %s (%d x %d bytes at offset %d)", self.path,
                      self.num_blocks, self.block_size_bytes, self.offset)

    def _position(self, index):
        return self.offset + index * self.block_size_bytes

    def _read(self, index):
        try:
            data = os.pread(self._fd, self.block_size_bytes, self._position(index))
        except OSError as e:
            raise IoFailure("read_block: I/O error at block {}: {}".format(index, e)) from e
        if len(data) != self.block_size_bytes:
            raise IoFailure("read_block: Short read at block {}, got {} bytes".format(index, len(data)))
        return data

    def _write(self, index, data):
        try:
            written = os.pwrite(self._fd, data, self._position(index))
        except OSError as e:
            raise IoFailure("write_block: I/O error at block {}: {}".format(index, e)) from e
        if written != self.block_size_bytes:
            raise IoFailure("write_block: Short write at block {}, wrote {} bytes".format(index, written))

    def snapshot(self):
        with self._lock:
            raw = os.pread(self._fd, self.num_blocks * self.block_size_bytes, self.offset)
        return np.frombuffer(raw, dtype=np.uint8).reshape(self.num_blocks, self.block_size_bytes).copy()

    def flush(self):
        if self._fd is not None:
            os.fsync(self._fd)

    def close(self):
        if getattr(self, '_fd', None) is not None:
            os.close(self._fd)
            self._fd = None
