"""Additively homomorphic symmetric encryption over Z_{2^64}.

A plaintext ``m`` for keystream position ``i`` is masked with the difference of
two consecutive keys, ``c = m + k_i - k_{i+1} mod 2^64``.  Summing ciphertexts
over a contiguous index range telescopes the inner keys away, so the sum over
``[i, j)`` decrypts with only the two boundary keys ``k_i`` and ``k_j``.

Ciphertexts carry no integrity: decrypting with the wrong keys silently yields
a wrong value.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LayoutMismatch, SpanMismatch

MODULUS = 1 << 64
MASK64 = MODULUS - 1
SLOT_BYTES = 8


def lm_hash(secret: bytes) -> int:
    """Fold a 128-bit secret into a 64-bit mask by XOR of its halves."""
    if len(secret) != 16:
        raise ValueError("secret must be 16 bytes")
    return int.from_bytes(secret[:8], "big") ^ int.from_bytes(secret[8:], "big")


_BIG_ENDIAN = sys.byteorder == "big"


def lm_hash_many(secrets: bytes) -> np.ndarray:
    """Vectorised :func:`lm_hash` over a concatenation of 16-byte secrets."""
    # XOR is bytewise, so fold in native order and fix the byte order once
    words = np.frombuffer(secrets, dtype=np.uint64)
    folded = words[0::2] ^ words[1::2]
    return folded if _BIG_ENDIAN else folded.byteswap()


def encode_signed(v: int) -> int:
    """Two's-complement embedding of a signed integer into Z_{2^64}."""
    return v & MASK64


def decode_signed(m: int) -> int:
    m &= MASK64
    return m - MODULUS if m >= 1 << 63 else m


def heac_encrypt(m: int, k_i: int, k_next: int) -> int:
    return (m + k_i - k_next) & MASK64


def heac_decrypt(c: int, k_i: int, k_next: int) -> int:
    return (c - k_i + k_next) & MASK64


@dataclass(frozen=True)
class DigestLayout:
    """Slot layout of a digest: sum, count, sum of squares, then histogram bins.

    ``bin_boundaries`` holds B+1 strictly increasing edges; bin ``b`` counts
    values in ``[edges[b], edges[b+1])``.  No boundaries means no bins.
    """

    bin_boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        edges = tuple(int(b) for b in self.bin_boundaries)
        if len(edges) == 1:
            raise ValueError("a histogram needs at least two boundaries")
        if any(lo >= hi for lo, hi in zip(edges, edges[1:])):
            raise ValueError("bin boundaries must be strictly increasing")
        for b in edges:
            if not -(1 << 63) <= b < 1 << 63:
                raise ValueError("bin boundary outside signed 64-bit range")
        object.__setattr__(self, "bin_boundaries", edges)

    @classmethod
    def uniform(cls, start: int, width: int, bins: int) -> "DigestLayout":
        return cls(tuple(start + width * b for b in range(bins + 1)))

    @property
    def bin_count(self) -> int:
        return max(len(self.bin_boundaries) - 1, 0)

    @property
    def components(self) -> tuple[str, ...]:
        return ("sum", "count", "sumsq") + tuple(f"bin{b}" for b in range(self.bin_count))

    def __len__(self) -> int:
        return 3 + self.bin_count


@dataclass(frozen=True, eq=False)
class EncryptedDigest:
    """Vector of mod-2^64 ciphertexts covering the chunk interval ``[span[0], span[1])``."""

    slots: np.ndarray
    span: tuple[int, int]

    def __post_init__(self):
        slots = np.asarray(self.slots)
        if slots.dtype != np.uint64:
            slots = np.array([int(s) & MASK64 for s in slots], dtype=np.uint64)
        object.__setattr__(self, "slots", slots)
        i, j = self.span
        if not i < j:
            raise SpanMismatch(f"empty or inverted span [{i}, {j})")
        object.__setattr__(self, "span", (int(i), int(j)))

    def __len__(self) -> int:
        return len(self.slots)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncryptedDigest):
            return NotImplemented
        return self.span == other.span and np.array_equal(self.slots, other.slots)

    def values(self) -> list[int]:
        return [int(s) for s in self.slots]

    def to_bytes(self) -> bytes:
        """Slots only, 8 bytes big-endian each; the span is implied by the index address."""
        return self.slots.astype(">u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, span: tuple[int, int]) -> "EncryptedDigest":
        if len(data) % SLOT_BYTES:
            raise ValueError("digest bytes not a multiple of 8")
        return cls(np.frombuffer(data, dtype=">u8").astype(np.uint64), span)


def heac_add(a: EncryptedDigest, b: EncryptedDigest) -> EncryptedDigest:
    """Slot-wise modular sum of two digests over adjacent spans."""
    if len(a.slots) != len(b.slots):
        raise LayoutMismatch(f"{len(a.slots)} slots vs {len(b.slots)}")
    if a.span[1] != b.span[0]:
        raise SpanMismatch(f"spans {a.span} and {b.span} are not adjacent")
    return EncryptedDigest(a.slots + b.slots, (a.span[0], b.span[1]))


def _as_masks(k, n: int) -> np.ndarray:
    if isinstance(k, (int, np.integer)):
        return np.full(n, int(k) & MASK64, dtype=np.uint64)
    arr = np.asarray(k)
    if arr.dtype != np.uint64:
        arr = np.array([int(x) & MASK64 for x in k], dtype=np.uint64)
    if len(arr) != n:
        raise LayoutMismatch(f"{len(arr)} boundary masks for {n} slots")
    return arr


def heac_decrypt_range(agg: EncryptedDigest, k_i, k_j) -> list[int]:
    """Decrypt an aggregate over ``[i, j)`` with the two boundary masks only.

    ``k_i`` and ``k_j`` are either one mask applied to every slot or one mask
    per slot (each slot runs its own keystream).
    """
    n = len(agg.slots)
    plain = agg.slots - _as_masks(k_i, n) + _as_masks(k_j, n)
    return [int(v) for v in plain]


def encrypt_slots(plain: Sequence[int], k_i, k_next, span: tuple[int, int]) -> EncryptedDigest:
    """Encrypt a plaintext digest vector slot by slot under per-slot masks."""
    n = len(plain)
    m = np.array([int(v) & MASK64 for v in plain], dtype=np.uint64)
    return EncryptedDigest(m + _as_masks(k_i, n) - _as_masks(k_next, n), span)
