'''
This module contains the trie position map: a heap-indexed b-ary trie whose
nodes hold position pointers and are themselves stored in a second, smaller
DetWoORAM instance, so the trie is its own position map.

Heap addresses 1..N_p are trie nodes, address 0 is the root (client state),
and data address a sits at heap address N_p + 1 + a.

'''

import logging
from dataclasses import dataclass

import numpy as np

from .core import NULL_ADDR, PosMap, PosPointer
from .crypto import iv_encrypt, iv_decrypt, iv_blob_size, iv_capacity
from .errors import AddressOutOfRange, CorruptPointer, InvalidGeometry, PackOverflow

DATA = 'data'
TRIE = 'trie'

POINTER_BYTES = 8
# b little-endian (a_h u32, o u16, flags u16) entries per node, flags bit 0 = q.
NODE_DTYPE = np.dtype([('a_h', '<u4'), ('o', '<u2'), ('flags', '<u2')])


@dataclass(frozen=True)
class TrieParams:
    '''
    N data addresses, branching factor b, N_p stored trie nodes (root excluded),
    h node writes per setpos, M_p position-holding slots, tau the
    ceil(log_b N_p) dummy threshold and the range of data path lengths.
    '''
    N: int
    b: int
    N_p: int
    h: int
    M_p: int
    tau: int
    min_path: int
    max_path: int

    @property
    def node_bytes(self):
        return self.b * POINTER_BYTES

    def data_heap(self, a):
        return self.N_p + 1 + a


def path_indices(a, b):
    '''
    Child indices from the root down to heap address a: [] for a == 0, else
    path_indices((a-1)//b) + [(a-1) % b].
    '''
    if a < 0:
        raise ValueError("a: Expecting a non-negative heap address, got {}".format(a))
    indices = []
    while a > 0:
        a, c = divmod(a - 1, b)
        indices.append(c)
    indices.reverse()
    return indices


def path_length(a, b):
    '''Number of stored (non-root) trie nodes on the path to heap address a.'''
    return max(len(path_indices(a, b)) - 1, 0)


def _ceil_log(x, b):
    t = 0
    while b ** t < x:
        t += 1
    return t


def trie_params(N, b, M_p=None):
    '''
    Sizes the trie for N data addresses and branching factor b.

    Parameters:
    ------------
        N: int

            Number of data addresses, at least 2.

        b: int

            Branching factor, at least 2.

        M_p: int, Default None

            Position-holding size. N_p * h when None, which gives exactly one
            position-main refresh per setpos.

    Returns:
    ---------
        TrieParams
    '''
    if N is None or N < 2:
        raise InvalidGeometry("N: Expecting at least 2 addresses, got {}".format(N))
    if b is None or b < 2:
        raise InvalidGeometry("b: Expecting a branching factor of at least 2, got {}".format(b))

    N_p = (N - 2) // (b - 1)
    tau = _ceil_log(N_p, b)
    min_path = path_length(N_p + 1, b)
    max_path = path_length(N_p + N, b)
    h = max(tau, max_path) if N_p > 0 else 0

    literal = {length + (length != tau) for length in (min_path, max_path)}
    if N_p > 0 and (len(literal) > 1 or literal != {h}):
        logging.warning("trie N=%d b=%d: paths of %d..%d nodes with threshold %d; padding every setpos to %d writes",
                        N, b, min_path, max_path, tau, h)

    if M_p is None:
        M_p = N_p * h
    elif N_p > 0 and M_p < 1:
        raise InvalidGeometry("M_p: Expecting a positive size, got {}".format(M_p))

    return TrieParams(N, b, N_p, h, M_p, tau, min_path, max_path)


def empty_node(b):
    node = np.zeros(b, dtype=NODE_DTYPE)
    node['a_h'] = NULL_ADDR
    return node


def node_from_bytes(data, b):
    return np.frombuffer(data, dtype=NODE_DTYPE, count=b).copy()


def get_slot(node, c):
    entry = node[c]
    return PosPointer(int(entry['a_h']), int(entry['o']), int(entry['flags']) & 1)


def set_slot(node, c, ptr):
    node[c] = (ptr.a_h, ptr.o, ptr.q & 1)


def pack_capacity(b, block_size):
    '''How many b-ary nodes fit one IV-encrypted block.'''
    return max(iv_capacity(block_size), 0) // (b * POINTER_BYTES)


def pack_nodes(key, nodes, block_size):
    '''
    Encrypts the concatenated nodes under a fresh IV into one block: IV at offset 0,
    then the ciphertext, zero padded to block_size.
    '''
    plaintext = b''.join(node.tobytes() for node in nodes)
    size = iv_blob_size(len(plaintext))
    if size > block_size:
        raise PackOverflow("nodes: Expecting at most {} bytes of nodes per block, got {}".format(
            iv_capacity(block_size), len(plaintext)))
    return iv_encrypt(key, plaintext) + bytes(block_size - size)


def unpack_nodes(key, block, b, count):
    '''Inverse of pack_nodes for a block holding count nodes.'''
    node_bytes = b * POINTER_BYTES
    plaintext = iv_decrypt(key, block[:iv_blob_size(count * node_bytes)])
    return [node_from_bytes(plaintext[k * node_bytes:(k + 1) * node_bytes], b) for k in range(count)]


def _ceil_lg(x):
    return (x - 1).bit_length()


def feasibility(N, b, B_bits):
    '''
    Whether h+1 trie pointers fit half a block:
    (h+1) * (ceil(lg 2N) + ceil(lg B) + 1) <= B/2, with B in bits and M = 2N.
    '''
    h = trie_params(N, b).h
    return (h + 1) * (_ceil_lg(2 * N) + _ceil_lg(B_bits) + 1) <= B_bits // 2


def feasibility_boundary(b, B_bits, start=4):
    '''
    Largest N for which feasibility holds, found by doubling then binary search.
    Returns None when even start is infeasible.
    '''
    if not feasibility(start, b, B_bits):
        return None
    lo, hi = start, start * 2
    while feasibility(hi, b, B_bits):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasibility(mid, b, B_bits):
            lo = mid
        else:
            hi = mid
    return lo


class TriePositionMap(PosMap):
    '''
    Position map backed by the trie. Node x (1 <= x <= N_p) lives at address
    x - 1 of pos_woram; the root is held here.

    Parameters:
    ------------
        params: TrieParams

        pos_woram: DetWoram

            Engine storing the N_p trie nodes (None when N_p == 0).

        root: numpy array of NODE_DTYPE, Default None

            Restored root node, all-NULL when None.
    '''

    def __init__(self, params, pos_woram=None, root=None):
        if params.N_p > 0 and pos_woram is None:
            raise ValueError("pos_woram: Expecting a position engine for {} trie nodes, got 'None'".format(params.N_p))
        self.params = params
        self.b = params.b
        self.pos_woram = pos_woram
        self.root = root.copy() if root is not None else empty_node(params.b)
        self._dummy = empty_node(params.b).tobytes()
        self._active = {}

    def _fetch(self, x, ptr):
        if not ptr.is_null() and ptr.a_h >= self.params.M_p:
            raise CorruptPointer("ptr: Expecting a holding address below {} for trie node {}, got {}".format(
                self.params.M_p, x, ptr.a_h))
        data = self.pos_woram.read(x - 1, getpos=lambda _: ptr)
        return node_from_bytes(data, self.b)

    def path_nodes(self, indices):
        '''
        Nodes [B_0 .. B_l] along the child indices, B_0 the root. Each child is
        read through the pointer its parent holds, never through a map lookup.

        Returns:
        ---------
            (nodes, heap addresses)
        '''
        nodes = [self._active.get(0, self.root)]
        heaps = [0]
        x = 0
        for c in indices:
            x = self.b * x + c + 1
            node = self._active.get(x)
            if node is None:
                node = self._fetch(x, get_slot(nodes[-1], c))
            nodes.append(node)
            heaps.append(x)
        return nodes, heaps

    def _heap(self, a, src):
        if src == DATA:
            if not 0 <= a < self.params.N:
                raise AddressOutOfRange("a: Expecting a data address in [0, {}), got {}".format(self.params.N, a))
            return self.params.data_heap(a)
        if not 1 <= a <= self.params.N_p:
            raise AddressOutOfRange("a: Expecting a trie node in [1, {}], got {}".format(self.params.N_p, a))
        return a

    def getpos_trie(self, a, src=DATA):
        indices = path_indices(self._heap(a, src), self.b)
        nodes, _ = self.path_nodes(indices[:-1])
        return get_slot(nodes[-1], indices[-1])

    def getpos(self, a):
        return self.getpos_trie(a, DATA)

    def setpos(self, a, ptr):
        self.setpos_trie(a, ptr)

    def _trie_getpos(self, m):
        return self.getpos_trie(m + 1, TRIE)

    def _resolve(self, m):
        node = self._active.get(m + 1)
        return node.tobytes() if node is not None else None

    def setpos_trie(self, a, ptr):
        '''
        Sets the leaf slot of data address a, then rewrites the path bottom-up:
        each node goes through the position engine, whose new pointer is stored
        in the in-memory parent. Dummy writes pad every call to h node writes.
        '''
        indices = path_indices(self._heap(a, DATA), self.b)
        nodes, heaps = self.path_nodes(indices[:-1])
        nodes = [node.copy() for node in nodes]
        set_slot(nodes[-1], indices[-1], ptr)

        length = len(nodes) - 1
        self._active = dict(zip(heaps, nodes))
        try:
            for j in range(length, 0, -1):
                parent, c = nodes[j - 1], indices[j - 1]

                def assign(_, new_ptr, parent=parent, c=c):
                    set_slot(parent, c, new_ptr)

                self.pos_woram.write(heaps[j] - 1, nodes[j].tobytes(), setpos=assign,
                                     getpos=self._trie_getpos, resolve=self._resolve)
            for _ in range(self.params.h - length):
                self.pos_woram.write_dummy(self._dummy, getpos=self._trie_getpos, resolve=self._resolve)
        finally:
            self._active = {}
        self.root = nodes[0]
