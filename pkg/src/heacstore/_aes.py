"""AES-128 as a keyed PRP over 16-byte blocks.

Tree derivation re-keys the cipher at every level, so key-schedule cost is what
matters.  The high-level ``cryptography`` API spends ~10 us building a cipher
object; the raw OpenSSL ``AES_set_encrypt_key``/``AES_encrypt`` pair reached
through ctypes costs well under 1 us.  Batches of blocks under one key go
through OpenSSL's EVP interface in a single call.  The ctypes path is used when
a system libcrypto is loadable, otherwise ``cryptography`` serves as the
fallback.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import threading

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

_AES_KEY_SIZE = 256  # sizeof(AES_KEY) is 244 on every supported platform


def _load_libcrypto():
    # PyDLL keeps the GIL across the call: the functions run well under a
    # microsecond, so releasing and re-taking the lock would cost more than it saves.
    for name in (ctypes.util.find_library("crypto"), "libcrypto.so.3", "libcrypto.so"):
        if not name:
            continue
        try:
            return ctypes.PyDLL(name)
        except OSError:
            continue
    return None


def _bind(lib):
    try:
        aes = lib.AES_set_encrypt_key, lib.AES_encrypt
    except AttributeError:
        return None, None
    try:
        # EVP dispatches to AES-NI; re-initialising it per key is slower than the
        # raw key schedule, but one update over many blocks is much faster.
        lib.EVP_CIPHER_CTX_new.restype = ctypes.c_void_p
        lib.EVP_aes_128_ecb.restype = ctypes.c_void_p
        evp = lib.EVP_CIPHER_CTX_new, ctypes.c_void_p(lib.EVP_aes_128_ecb()), \
            lib.EVP_EncryptInit_ex, lib.EVP_EncryptUpdate
    except AttributeError:
        evp = None
    return aes, evp


_lib = _load_libcrypto()
_native, _evp = _bind(_lib) if _lib is not None else (None, None)
_tls = threading.local()
_BITS = ctypes.c_int(128)


def _buffers():
    """Per-thread key schedule, output block and a cache of constant buffers."""
    try:
        return _tls.bufs
    except AttributeError:
        _tls.bufs = (ctypes.create_string_buffer(_AES_KEY_SIZE), ctypes.create_string_buffer(16), {})
        return _tls.bufs


def _evp_ctx():
    try:
        return _tls.evp
    except AttributeError:
        _tls.evp = (ctypes.c_void_p(_evp[0]()), ctypes.c_int())
        return _tls.evp


def _const(cache: dict, block: bytes):
    buf = cache.get(block)
    if buf is None:
        buf = cache[block] = ctypes.create_string_buffer(block, 16)
    return buf


def backend() -> str:
    return "libcrypto-ctypes" if _native is not None else "cryptography"


if _native is not None:
    _set_key, _encrypt = _native

    def aes_blocks(key: bytes, blocks) -> list[bytes]:
        ks, out, _ = _buffers()
        _set_key(key, _BITS, ks)
        res = []
        for blk in blocks:
            _encrypt(blk, out, ks)
            res.append(out.raw)
        return res

    def _aes_ecb_raw(key: bytes, blocks) -> bytes:
        ks, _, cache = _buffers()
        n = len(blocks)
        slot = cache.get(n)
        if slot is None:
            big = ctypes.create_string_buffer(16 * n)
            base = ctypes.addressof(big)
            slot = cache[n] = (big, [ctypes.c_void_p(base + 16 * i) for i in range(n)])
        big, ptrs = slot
        _set_key(key, _BITS, ks)
        encrypt = _encrypt
        for blk, p in zip(blocks, ptrs):
            encrypt(blk, p, ks)
        return big.raw

    if _evp is not None:
        _, _ecb_cipher, _evp_init, _evp_update = _evp

        def aes_ecb(key: bytes, blocks) -> bytes:
            """Concatenated encryptions of ``blocks`` under one key."""
            if isinstance(blocks, (bytes, bytearray)):
                data = blocks
            else:
                data = b"".join(blocks)
            ctx, outl = _evp_ctx()
            _, _, cache = _buffers()
            out = cache.get(("evp", len(data)))
            if out is None:
                out = cache[("evp", len(data))] = ctypes.create_string_buffer(len(data) + 16)
            if not _evp_init(ctx, _ecb_cipher, None, key, None) or \
                    not _evp_update(ctx, out, ctypes.byref(outl), data, len(data)):
                return _aes_ecb_raw(key, [data[o:o + 16] for o in range(0, len(data), 16)])
            return out.raw[:len(data)]
    else:  # pragma: no cover - libcrypto without the EVP interface
        def aes_ecb(key: bytes, blocks) -> bytes:
            """Concatenated encryptions of ``blocks`` under one key."""
            if isinstance(blocks, (bytes, bytearray)):
                blocks = [blocks[o:o + 16] for o in range(0, len(blocks), 16)]
            return _aes_ecb_raw(key, blocks)

    def aes_block(key: bytes, block: bytes) -> bytes:
        ks, out, _ = _buffers()
        _set_key(key, _BITS, ks)
        _encrypt(block, out, ks)
        return out.raw

    def aes_walk(key: bytes, path: int, nbits: int, block0: bytes, block1: bytes) -> bytes:
        """Re-key along a bit path: ``key = AES_key(block_bit)`` for each bit, MSB first.

        The running key never leaves the output buffer between levels.
        """
        if nbits == 0:
            return key
        ks, out, consts = _buffers()
        b0, b1 = _const(consts, block0), _const(consts, block1)
        set_key, encrypt, bits = _set_key, _encrypt, _BITS
        ctypes.memmove(out, key, 16)
        for blk in [b1 if (path >> s) & 1 else b0 for s in range(nbits - 1, -1, -1)]:
            set_key(out, bits, ks)
            encrypt(blk, out, ks)
        return out.raw

    def aes_walk_path(key: bytes, path: int, nbits: int, block0: bytes, block1: bytes) -> bytes:
        """Like :func:`aes_walk` but returns every intermediate key, concatenated (16 * nbits bytes)."""
        if nbits == 0:
            return b""
        ks, _, cache = _buffers()
        b0, b1 = _const(cache, block0), _const(cache, block1)
        slot = cache.get(("walk", nbits))
        if slot is None:
            big = ctypes.create_string_buffer(16 * (nbits + 1))
            base = ctypes.addressof(big)
            slot = cache[("walk", nbits)] = (big, [ctypes.c_void_p(base + 16 * i) for i in range(nbits + 1)])
        big, ptrs = slot
        set_key, encrypt, bits = _set_key, _encrypt, _BITS
        ctypes.memmove(big, key, 16)
        for lv in range(nbits):
            set_key(ptrs[lv], bits, ks)
            encrypt(b1 if (path >> (nbits - 1 - lv)) & 1 else b0, ptrs[lv + 1], ks)
        return big.raw[16:16 * (nbits + 1)]

else:  # pragma: no cover - exercised only without a system libcrypto

    def aes_blocks(key: bytes, blocks) -> list[bytes]:
        enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
        data = enc.update(b"".join(blocks))
        return [data[o:o + 16] for o in range(0, len(data), 16)]

    def aes_ecb(key: bytes, blocks) -> bytes:
        data = blocks if isinstance(blocks, (bytes, bytearray)) else b"".join(blocks)
        return Cipher(algorithms.AES(key), modes.ECB()).encryptor().update(data)

    def aes_block(key: bytes, block: bytes) -> bytes:
        return Cipher(algorithms.AES(key), modes.ECB()).encryptor().update(block)

    def aes_walk(key: bytes, path: int, nbits: int, block0: bytes, block1: bytes) -> bytes:
        for shift in range(nbits - 1, -1, -1):
            key = aes_block(key, block1 if (path >> shift) & 1 else block0)
        return key

    def aes_walk_path(key: bytes, path: int, nbits: int, block0: bytes, block1: bytes) -> bytes:
        out = []
        for shift in range(nbits - 1, -1, -1):
            key = aes_block(key, block1 if (path >> shift) & 1 else block0)
            out.append(key)
        return b"".join(out)


def aes_reference(key: bytes, data: bytes) -> bytes:
    """ECB encryption through ``cryptography``; an independent check of the fast path."""
    return Cipher(algorithms.AES(key), modes.ECB()).encryptor().update(data)
