'''
This module contains everything relating to container lifecycle: the
configuration, create, open, the live handle that reads and writes logical
blocks, and persistence of client state.

A container is one file (or one in-memory store): block 0 is the superblock,
the payload regions follow as laid out by layout.plan_layout. Baseline schemes
keep their client-side position map in a joblib sidecar next to the file.

'''

import json
import logging
import os
from dataclasses import asdict, dataclass

import joblib

from .baselines import HiveWoram, hive_initial_slot, hive_slot_size
from .core import (CtrArea, DeamortizedWoram, DetWoram, DictPosMap, Geometry, ToyWoram, WoramState, initial_block)
from .crypto import CounterLedger
from .device import FileBlockStore, MemoryBlockStore, TraceRecorder
from .errors import CorruptState, InvalidGeometry, IoFailure, SizeMismatch
from .layout import (AMORTIZED, HEADER_SIZE, HIVE, INTERLEAVED, MODES, PAYLOAD_START, SEGMENTED, TOY,
                     InterleavedWoram, PackedNodeArea, Superblock, decode_superblock, encode_superblock,
                     header_mode, plan_layout)
from .trie import TriePositionMap, node_from_bytes, trie_params

SIDECAR_SUFFIX = '.client.jbl'


@dataclass
class ContainerConfig:
    '''
    Parameters:
    ------------
        path: str, Default None

            Container file. None keeps the container in memory.

        block_bytes: int, Default 4096

        size_blocks: int, Default 1024

            N, the number of logical blocks.

        ratio: int, Default 3

            M = ratio * N holding blocks (2 for the interleaved layout).

        branch: int, Default 64

            Trie branching factor b.

        mode: str, Default 'seg'

            One of seg, ilv, toy, amort, hive.

        k: int, Default 3

            HiVE writes per logical write.

        seed: int, Default None

            HiVE slot sampling seed.
    '''
    path: str = None
    block_bytes: int = 4096
    size_blocks: int = 1024
    ratio: int = 3
    branch: int = 64
    mode: str = SEGMENTED
    k: int = 3
    seed: int = None

    @property
    def N(self):
        return self.size_blocks

    @property
    def M(self):
        return self.ratio * self.size_blocks

    def validate(self):
        if self.mode not in MODES:
            raise ValueError("mode: Expecting one of {}, got {}".format(list(MODES), self.mode))
        if self.size_blocks is None or self.size_blocks < 2:
            raise InvalidGeometry("size_blocks: Expecting at least 2 blocks, got {}".format(self.size_blocks))
        if self.ratio is None or self.ratio < 1:
            raise InvalidGeometry("ratio: Expecting a positive ratio, got {}".format(self.ratio))
        if self.mode == INTERLEAVED and self.ratio != 2:
            raise InvalidGeometry("ratio: Expecting 2 for the interleaved layout, got {}".format(self.ratio))
        return self

    def to_json(self, path):
        with open(path, 'w') as configfile:
            json.dump(asdict(self), configfile, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as configfile:
            return cls(**json.load(configfile))


def _params_for(mode, N, b):
    if mode in (SEGMENTED, INTERLEAVED):
        return trie_params(N, b)
    return None


def _device_block_size(mode, block_bytes):
    return hive_slot_size(block_bytes) if mode == HIVE else block_bytes


def _initializer(mode, key, plan, params):
    '''
    Function producing the bytes create stores at a physical index. Also
    serves as the initializer of sparse in-memory stores.
    '''
    if mode == HIVE:
        return lambda index: hive_initial_slot(key, plan.block_size) if index else bytes(plan.device_block_size)

    if mode == INTERLEAVED:
        template = InterleavedWoram(None, key, plan, params)
        base = plan.offset('payload')

        def interleaved(index):
            if index < base:
                return bytes(plan.block_size)
            t, odd = divmod(index - base, 2)
            if odd:
                return template._x_block(t, 0, bytes(template.half), bytes([0]))
            return initial_block(key, index, plan.block_size)
        return interleaved

    packed = None
    if mode == SEGMENTED and params.N_p > 0:
        pos_start = plan.offset('pos_main')
        empty = PackedNodeArea(None, key, plan).initial_block

        def packed(index):
            return empty() if index >= pos_start else None

    def plain(index):
        if index < PAYLOAD_START:
            return bytes(plan.block_size)
        if packed is not None:
            block = packed(index)
            if block is not None:
                return block
        return initial_block(key, index, plan.block_size)
    return plain


class Container:
    '''
    A live, opened container.

    Parameters:
    ------------
        store: BlockStore

        key: CipherKey

        plan: LayoutPlan

        superblock: Superblock

        config: ContainerConfig

        durable: bool, Default True

            Persist the superblock after every logical write; otherwise only on close.

        sidecar: dict, Default None

            Client state of a baseline scheme.

        debug: bool, Default False

            Track encryption counters and raise ContextReuse on any repeat.
    '''

    def __init__(self, store, key, plan, superblock, config, durable=True, sidecar=None, debug=False, shadow=None):
        self.store = store
        self.key = key
        self.plan = plan
        self.config = config
        self.mode = plan.mode
        self.N = plan.N
        self.M = plan.M
        self.block_size = plan.block_size
        self.durable = durable
        self.ledger = CounterLedger() if debug else None
        self.shadow = shadow
        self.params = _params_for(self.mode, plan.N, plan.b) if self.mode in (SEGMENTED, INTERLEAVED) else None
        self.logical_reads = 0
        self.logical_writes = 0
        self.state_writes = 0
        self.recorder = None
        self._memory_sidecar = sidecar
        self._build(superblock, sidecar)

    def _build(self, sb, sidecar):
        plan, store, key = self.plan, self.store, self.key
        self.pos_area = None
        self.trie = None

        if self.mode == SEGMENTED:
            area = CtrArea(store, key, plan.N, plan.M, plan.offset('data_main'), plan.offset('data_holding'),
                           self.ledger)
            pos_woram = None
            if plan.N_p > 0:
                self.pos_area = PackedNodeArea(store, key, plan)
                pos_woram = DetWoram(self.pos_area, plan.N_p, plan.M_p, i=sb.i_p)
            self.trie = TriePositionMap(self.params, pos_woram, self._root(sb))
            self.engine = DetWoram(area, plan.N, plan.M, posmap=self.trie, i=sb.i, shadow=self.shadow)

        elif self.mode == INTERLEAVED:
            self.engine = InterleavedWoram(store, key, plan, self.params, i=sb.i, root=self._root(sb),
                                           pending_back=sb.extra or None, ledger=self.ledger)
            self.trie = self.engine.trie

        elif self.mode in (TOY, AMORTIZED):
            holding = plan.N if self.mode == TOY else plan.M
            area = CtrArea(store, key, plan.N, holding, plan.offset('data_main'), plan.offset('data_holding'),
                           self.ledger)
            posmap = DictPosMap((sidecar or {}).get('posmap'))
            if self.mode == TOY:
                self.engine = ToyWoram(area, plan.N, posmap=posmap, i=sb.i, shadow=self.shadow)
            else:
                self.engine = DeamortizedWoram(area, plan.N, plan.M, posmap=posmap, i=sb.i, shadow=self.shadow)

        else:
            self.engine = HiveWoram(store, key, plan.N, plan.M, plan.block_size, k=self.config.k,
                                    offset=plan.offset('slots'), seed=self.config.seed,
                                    state=(sidecar or {}).get('hive'))

    def _root(self, sb):
        if not sb.root:
            return None
        if len(sb.root) != self.plan.b * 8:
            raise CorruptState("root: Expecting {} bytes, got {}".format(self.plan.b * 8, len(sb.root)))
        return node_from_bytes(sb.root, self.plan.b)

    @property
    def i(self):
        if self.mode == HIVE:
            return self.engine.writes
        return self.engine.i

    @property
    def i_p(self):
        if self.mode == SEGMENTED:
            return self.trie.pos_woram.i if self.trie.pos_woram is not None else 0
        if self.mode == INTERLEAVED:
            return self.engine.i_p
        return 0

    def read(self, a):
        data = self.engine.read(a)
        self.logical_reads += 1
        return data

    def write(self, a, d):
        if d is None or len(d) != self.block_size:
            raise SizeMismatch("d: Expecting {} bytes, got {}".format(self.block_size, None if d is None else len(d)))
        self.engine.write(a, bytes(d))
        self.logical_writes += 1
        if self.durable:
            self.state_persist()

    @property
    def state(self):
        return WoramState(self.i, self.i_p, self.plan.epochs(self.i, self.i_p))

    def superblock(self):
        root = self.trie.root.tobytes() if self.trie is not None else b''
        extra = self.engine.pending_back if self.mode == INTERLEAVED else b''
        plan, state = self.plan, self.state
        return Superblock(self.mode, plan.block_size, plan.N, plan.M, plan.b, plan.N_p, plan.M_p,
                          state.i, state.i_p, state.epochs, root, extra)

    def state_persist(self):
        '''Rewrites the superblock at block 0. Not part of the payload write budget.'''
        self.store.write_block(0, encode_superblock(self.key, self.superblock(), self.plan.device_block_size))
        self.state_writes += 1

    def client_state(self):
        if self.mode in (TOY, AMORTIZED):
            return {'posmap': dict(self.engine.posmap.entries)}
        if self.mode == HIVE:
            return {'hive': self.engine.client_state()}
        return None

    def sidecar_path(self):
        return self.config.path + SIDECAR_SUFFIX if self.config.path else None

    def save_sidecar(self):
        state = self.client_state()
        if state is None:
            return
        self._memory_sidecar = state
        path = self.sidecar_path()
        if path:
            joblib.dump(state, path)

    def start_trace(self, sink=None, keep=True):
        '''Attaches a fresh TraceRecorder and resets the logical counters.'''
        self.recorder = TraceRecorder(self.trace_meta(), sink=sink, keep=keep)
        self.logical_reads = 0
        self.logical_writes = 0
        self.store.attach(self.recorder)
        return self.recorder

    def stop_trace(self):
        trace = self.trace()
        self.store.attach(None)
        self.recorder = None
        return trace

    def trace_meta(self):
        return {'scheme': self.mode, 'payload_start': self.plan.payload_start,
                'geometry': {'N': self.N, 'M': self.M, 'block_size': self.block_size, 'b': self.plan.b},
                'logical_writes': self.logical_writes, 'logical_reads': self.logical_reads}

    def trace(self):
        if self.recorder is None:
            return None
        trace = self.recorder.trace()
        trace.meta.update(self.trace_meta())
        return trace

    def _flush_engine(self):
        if self.pos_area is not None:
            self.pos_area.close()
        self.state_persist()
        self.save_sidecar()

    def reopen(self):
        '''Flushes, then rebuilds all client state from the device (and sidecar) only.'''
        before = self.state
        self._flush_engine()
        sb = decode_superblock(self.key, self.store.read_block(0))
        _check_superblock(sb, self.plan)
        self._build(sb, self._memory_sidecar)
        if self.state != before:
            raise CorruptState("superblock: restored {} but the client was at {}".format(self.state, before))
        return self

    def close(self):
        self._flush_engine()
        self.store.flush()
        self.store.close()
        logging.info("closed %s container %s at i=%d", self.mode, self.config.path or '<memory>', self.i)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _plan_for(config, params):
    geometry = Geometry(config.N, config.M, config.block_bytes)
    return plan_layout(geometry, params, config.mode, _device_block_size(config.mode, config.block_bytes))


def create(config, key, sparse=False, durable=True, debug=False, shadow=None):
    '''
    Creates a container: every payload block is written encrypted (zero data
    blocks, all-NULL trie nodes, empty HiVE slots), counters start at zero and
    the superblock is written last.

    Parameters:
    ------------
        config: ContainerConfig

        key: CipherKey

        sparse: bool, Default False

            In-memory only: materialise blocks on first touch instead of writing them all.

    Returns:
    ---------
        Container
    '''
    if config is None:
        raise ValueError("config: Expecting a ContainerConfig, got 'None'")
    config.validate()
    params = _params_for(config.mode, config.N, config.branch)
    plan = _plan_for(config, params)
    init = _initializer(config.mode, key, plan, params)

    if config.path is None:
        store = MemoryBlockStore(plan.device_block_size, plan.total_blocks, initializer=init if sparse else None)
    else:
        if sparse:
            raise ValueError("sparse: Expecting an in-memory container (path None) for sparse stores")
        if os.path.exists(config.path):
            raise IoFailure("path: container {} already exists".format(config.path))
        store = FileBlockStore(config.path, plan.device_block_size, plan.total_blocks, create=True)

    if not sparse:
        for index in range(PAYLOAD_START, plan.total_blocks):
            store.write_block(index, init(index))

    sb = Superblock(config.mode, plan.block_size, plan.N, plan.M, plan.b, plan.N_p, plan.M_p, 0, 0,
                    (0, 0, 0, 0))
    container = Container(store, key, plan, sb, config, durable=durable, sidecar=None, debug=debug, shadow=shadow)
    container.state_persist()
    container.save_sidecar()
    store.reads = store.writes = 0
    container.state_writes = 0
    logging.info("created %s container %s: N=%d M=%d B=%d, %d blocks", config.mode, config.path or '<memory>',
                 plan.N, plan.M, plan.block_size, plan.total_blocks)
    return container


def _check_superblock(sb, plan):
    if (sb.N, sb.M, sb.block_size, sb.N_p, sb.M_p) != (plan.N, plan.M, plan.block_size, plan.N_p, plan.M_p):
        raise CorruptState("superblock: geometry does not match its own trie parameters")
    if tuple(sb.epochs) != plan.epochs(sb.i, sb.i_p):
        raise CorruptState("epochs: Expecting {} for i={} i_p={}, got {}".format(
            plan.epochs(sb.i, sb.i_p), sb.i, sb.i_p, tuple(sb.epochs)))
    if plan.mode == SEGMENTED and plan.N_p > 0 and sb.i_p != plan.h * sb.i:
        raise CorruptState("i_p: Expecting h*i = {}, got {}".format(plan.h * sb.i, sb.i_p))
    if plan.mode == INTERLEAVED and sb.i_p != plan.h * sb.i:
        raise CorruptState("i_p: Expecting h*i = {}, got {}".format(plan.h * sb.i, sb.i_p))


def open_container(path, key, durable=True, debug=False, shadow=None, k=3, seed=None):
    '''
    Opens an existing container file, restoring (i, i_p, epochs, root) from the
    superblock and baseline client state from the sidecar.

    Raises:
    ---------
        BadMagic, WrongKey, CorruptState, IoFailure
    '''
    if not os.path.exists(path):
        raise IoFailure("path: container {} does not exist".format(path))

    with open(path, 'rb') as raw:
        header = raw.read(HEADER_SIZE)
    mode, block_bytes = header_mode(header)
    device_block_size = _device_block_size(mode, block_bytes)
    size = os.path.getsize(path)
    store = FileBlockStore(path, device_block_size, size // device_block_size)

    try:
        sb = decode_superblock(key, store.read_block(0))
        config = ContainerConfig(path=path, block_bytes=sb.block_size, size_blocks=sb.N,
                                 ratio=sb.M // sb.N, branch=sb.b or 64, mode=sb.mode, k=k, seed=seed)
        params = _params_for(sb.mode, sb.N, sb.b)
        plan = _plan_for(config, params)
        if plan.total_blocks > store.num_blocks:
            raise CorruptState("path: container holds {} blocks, layout needs {}".format(
                store.num_blocks, plan.total_blocks))
        _check_superblock(sb, plan)

        sidecar = None
        if mode in (TOY, AMORTIZED, HIVE):
            sidecar_path = path + SIDECAR_SUFFIX
            if not os.path.exists(sidecar_path):
                raise CorruptState("sidecar: {} client state {} is missing".format(mode, sidecar_path))
            sidecar = joblib.load(sidecar_path)
    except Exception:
        store.close()
        raise

    store.reads = 0
    logging.info("opened %s container %s at i=%d", mode, path, sb.i)
    return Container(store, key, plan, sb, config, durable=durable, sidecar=sidecar, debug=debug, shadow=shadow)
