'''
This module contains the block encryption services.

Data blocks are encrypted with AES in counter mode, keyed by the pair
(epoch, physical index) so no IV is stored on the device. Packed trie blocks
and the superblock state use a fresh random IV stored in front of an AES-CBC
ciphertext.

'''

import logging
import os
import struct
from typing import NamedTuple

import numpy as np
from scipy import stats
from Crypto.Cipher import AES
from Crypto.Random import get_random_bytes
from Crypto.Util.Padding import pad, unpad

from .errors import ContextReuse, PayloadTooLarge, MalformedPadding

KEY_BYTES = 32
IV_BYTES = AES.block_size
KEY_ENV = 'DETWORAM_KEY_FILE'

_MAX_EPOCH = (1 << 64) - 1
_MAX_INDEX = (1 << 32) - 1


class CipherKey:
    '''
    Secret key material. The raw bytes never end up in the container; only
    the key file (or the caller) holds them.

    Parameters:
    ------------
        key_bytes: bytes

            16, 24 or 32 bytes of AES key.
    '''

    def __init__(self, key_bytes):
        if key_bytes is None:
            raise ValueError("key_bytes: Expecting 16, 24 or 32 bytes, got 'None'")
        key_bytes = bytes(key_bytes)
        if len(key_bytes) not in (16, 24, 32):
            raise ValueError("key_bytes: Expecting 16, 24 or 32 bytes, got {}".format(len(key_bytes)))
        self.key_bytes = key_bytes

    @classmethod
    def generate(cls, size=KEY_BYTES):
        return cls(get_random_bytes(size))

    @classmethod
    def from_file(cls, path):
        with open(path, 'rb') as keyfile:
            return cls(keyfile.read())

    def to_file(self, path):
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, 'wb') as keyfile:
            keyfile.write(self.key_bytes)

    def __eq__(self, other):
        return isinstance(other, CipherKey) and other.key_bytes == self.key_bytes

    def __hash__(self):
        return hash(self.key_bytes)

    def __repr__(self):
        return 'CipherKey(<{} bytes>)'.format(len(self.key_bytes))


def load_key(path=None, create=False):
    '''
    Loads the raw key file at path, falling back to the DETWORAM_KEY_FILE
    environment variable.

    Parameters:
    ------------
        path: str, Default None

        create: bool, Default False

            Generate and save a fresh key when the file does not exist yet.

    Returns:
    ---------
        CipherKey
    '''
    path = path or os.environ.get(KEY_ENV)
    if not path:
        raise ValueError("key: Expecting a key file path or {} to be set, got 'None'".format(KEY_ENV))

    if create and not os.path.exists(path):
        key = CipherKey.generate()
        key.to_file(path)
        logging.info("generated new key file %s", path)
        return key

    return CipherKey.from_file(path)


class CtrContext(NamedTuple):
    '''Counter block = epoch (64 bits) || index (32 bits) || intra-block counter (32 bits).'''
    epoch: int
    index: int
    intra: int = 0

    def nonce(self):
        if not 0 <= self.epoch <= _MAX_EPOCH:
            raise ValueError("epoch: Expecting a 64-bit unsigned value, got {}".format(self.epoch))
        if not 0 <= self.index <= _MAX_INDEX:
            raise ValueError("index: Expecting a 32-bit unsigned value, got {}".format(self.index))
        return struct.pack('>QI', self.epoch, self.index)


class CounterLedger:
    '''
    Debug aid: remembers every counter context used for encryption and raises
    ContextReuse on a repeat.
    '''

    def __init__(self):
        self.used = set()

    def claim(self, ctx):
        if ctx in self.used:
            raise ContextReuse("ctx: counter (epoch={}, index={}, intra={}) already used".format(*ctx))
        self.used.add(ctx)

    def __len__(self):
        return len(self.used)


def _ctr_cipher(key, ctx):
    return AES.new(key.key_bytes, AES.MODE_CTR, nonce=ctx.nonce(), initial_value=ctx.intra)


def ctr_encrypt(key, ctx, plaintext, ledger=None):
    '''
    Counter-mode encryption of a block (or half block) under ctx.

    Parameters:
    ------------
        key: CipherKey

        ctx: CtrContext

            Must not have been used under key before.

        plaintext: bytes

        ledger: CounterLedger, Default None

            When given, a reused context raises ContextReuse.

    Returns:
    ---------
        ciphertext of the same length.
    '''
    if ledger is not None:
        ledger.claim(ctx)
    return _ctr_cipher(key, ctx).encrypt(bytes(plaintext))


def ctr_decrypt(key, ctx, ciphertext):
    return _ctr_cipher(key, ctx).decrypt(bytes(ciphertext))


def iv_blob_size(plaintext_len):
    '''Size of iv_encrypt output for a plaintext of plaintext_len bytes.'''
    return IV_BYTES + (plaintext_len // AES.block_size + 1) * AES.block_size


def iv_capacity(blob_len):
    '''Largest plaintext that still fits a blob_len byte region after IV and padding.'''
    if blob_len < 2 * AES.block_size:
        return -1
    return ((blob_len - IV_BYTES) // AES.block_size) * AES.block_size - 1


def iv_encrypt(key, plaintext, capacity=None):
    '''
    Encrypts plaintext under a fresh random IV, returning IV || AES-CBC(pad(plaintext)).

    Parameters:
    ------------
        key: CipherKey

        plaintext: bytes

        capacity: int, Default None

            Number of bytes the blob must fit in. PayloadTooLarge is raised if it doesn't.
    '''
    plaintext = bytes(plaintext)
    if capacity is not None and iv_blob_size(len(plaintext)) > capacity:
        raise PayloadTooLarge("plaintext: Expecting at most {} bytes, got {}".format(
            iv_capacity(capacity), len(plaintext)))

    iv = get_random_bytes(IV_BYTES)
    cipher = AES.new(key.key_bytes, AES.MODE_CBC, iv=iv)
    return iv + cipher.encrypt(pad(plaintext, AES.block_size))


def iv_decrypt(key, blob):
    blob = bytes(blob)
    if len(blob) < 2 * AES.block_size or len(blob) % AES.block_size:
        raise MalformedPadding("blob: Expecting a multiple of {} bytes of at least {}, got {}".format(
            AES.block_size, 2 * AES.block_size, len(blob)))

    cipher = AES.new(key.key_bytes, AES.MODE_CBC, iv=blob[:IV_BYTES])
    try:
        return unpad(cipher.decrypt(blob[IV_BYTES:]), AES.block_size)
    except ValueError as e:
        raise MalformedPadding("blob: Padding is incorrect, wrong key or corrupted block") from e


def byte_uniformity(ciphertexts):
    '''
    Chi-square goodness of fit of the byte histogram of ciphertexts against the
    uniform distribution. A smoke test for encryption output, nothing more.

    Returns:
    ---------
        (statistic, p-value)
    '''
    data = np.frombuffer(b''.join(bytes(c) for c in ciphertexts), dtype=np.uint8)
    if data.size == 0:
        raise ValueError("ciphertexts: Expecting at least one non-empty ciphertext, got none")
    counts = np.bincount(data, minlength=256)
    result = stats.chisquare(counts)
    return float(result.statistic), float(result.pvalue)
