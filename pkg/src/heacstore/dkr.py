"""Dual key regression and key envelopes for resolution-restricted access.

Two hash chains run in opposite directions.  The primary chain is generated
backwards from a seed at index ``n`` (``s1[i-1] = MSB(G(s1[i]))``), the
secondary forwards from a seed at index 0 (``s2[i+1] = MSB(G(s2[i]))``).
Key ``j`` is ``LSB(G(s1[j] xor s2[j]))``.  Holding ``s1[u]`` and ``s2[l]``
yields exactly the keys ``l..u``.  ``G`` is the tree PRG: its left output is
the MSB half and its right output the LSB half.

Resolution keys wrap the boundary leaf secrets of stride-``r`` windows into
key envelopes stored server-side.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, InvalidLength, InvalidRange, OutOfShareRange
from .keytree import SECRET_BYTES, prg_left, prg_right

PRIMARY, SECONDARY = "primary", "secondary"
NONCE_BYTES = 12


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(SECRET_BYTES, "big")


class GeneratorCounter:
    """Counts chain-generator calls per chain; used to check the O(sqrt n) bound."""

    def __init__(self):
        self.primary = 0
        self.secondary = 0

    def reset(self):
        self.primary = self.secondary = 0


GEN_COUNTER = GeneratorCounter()


def _step(state: bytes, chain: str) -> bytes:
    if chain == PRIMARY:
        GEN_COUNTER.primary += 1
    else:
        GEN_COUNTER.secondary += 1
    return prg_left(state)


def _iterate(state: bytes, steps: int, chain: str) -> bytes:
    for _ in range(steps):
        state = _step(state, chain)
    return state


@dataclass(frozen=True)
class DkrChainState:
    value: bytes = field(repr=False)
    index: int
    chain: str


@dataclass(frozen=True)
class ResolutionKey:
    key: bytes = field(repr=False)
    index: int


def _resolution_key(s1: bytes, s2: bytes, j: int) -> ResolutionKey:
    return ResolutionKey(prg_right(_xor(s1, s2)), j)


@dataclass(frozen=True)
class DkrShare:
    """Primary state at ``u`` and secondary state at ``l``; grants keys ``l..u``."""

    primary_state: DkrChainState
    secondary_state: DkrChainState

    @property
    def lower(self) -> int:
        return self.secondary_state.index

    @property
    def upper(self) -> int:
        return self.primary_state.index

    def key(self, j: int) -> ResolutionKey:
        l, u = self.lower, self.upper
        if not l <= j <= u:
            raise OutOfShareRange(f"key {j} outside share [{l}, {u}]")
        s1 = _iterate(self.primary_state.value, u - j, PRIMARY)
        s2 = _iterate(self.secondary_state.value, j - l, SECONDARY)
        return _resolution_key(s1, s2, j)

    def keys(self) -> list[ResolutionKey]:
        """Every key ``l..u`` in one sweep of each chain, O(u - l) generator calls."""
        l, u = self.lower, self.upper
        primary = [self.primary_state.value]
        for _ in range(u - l):
            primary.append(_step(primary[-1], PRIMARY))
        primary.reverse()
        out, s2 = [], self.secondary_state.value
        for j in range(l, u + 1):
            if j > l:
                s2 = _step(s2, SECONDARY)
            out.append(_resolution_key(primary[j - l], s2, j))
        return out

    def to_bytes(self) -> bytes:
        return (struct.pack(">QQ", self.lower, self.upper)
                + self.primary_state.value + self.secondary_state.value)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DkrShare":
        if len(data) != 16 + 2 * SECRET_BYTES:
            raise ValueError("share must be 48 bytes")
        l, u = struct.unpack_from(">QQ", data)
        if l > u:
            raise InvalidRange(f"share bounds l={l} > u={u}")
        return cls(DkrChainState(bytes(data[16:32]), u, PRIMARY),
                   DkrChainState(bytes(data[32:48]), l, SECONDARY))


class DualKeyRegression:
    """Owner side: both seeds plus checkpoints every ceil(sqrt(n)) indices of each chain."""

    def __init__(self, n: int, primary_seed: bytes | None = None, secondary_seed: bytes | None = None):
        if n < 1:
            raise InvalidLength(f"chain length must be >= 1, got {n}")
        self.n = n
        self.stride = math.isqrt(n - 1) + 1  # ceil(sqrt(n))
        s1 = primary_seed if primary_seed is not None else os.urandom(SECRET_BYTES)
        s2 = secondary_seed if secondary_seed is not None else os.urandom(SECRET_BYTES)
        if len(s1) != SECRET_BYTES or len(s2) != SECRET_BYTES:
            raise ValueError("seeds must be 16 bytes")
        c = self.stride
        self._primary = {n: s1}
        state = s1
        for i in range(n - 1, -1, -1):
            state = prg_left(state)
            if i % c == 0:
                self._primary[i] = state
        self._secondary = {0: s2}
        state = s2
        for i in range(1, n + 1):
            state = prg_left(state)
            if i % c == 0:
                self._secondary[i] = state

    def _check(self, j: int):
        if not 0 <= j <= self.n:
            raise OutOfShareRange(f"index {j} outside chain [0, {self.n}]")

    def primary_state(self, j: int) -> bytes:
        self._check(j)
        c = self.stride
        top = min(-(-j // c) * c, self.n)
        return _iterate(self._primary[top], top - j, PRIMARY)

    def secondary_state(self, j: int) -> bytes:
        self._check(j)
        base = (j // self.stride) * self.stride
        return _iterate(self._secondary[base], j - base, SECONDARY)

    def key(self, j: int) -> ResolutionKey:
        return _resolution_key(self.primary_state(j), self.secondary_state(j), j)

    def share(self, l: int, u: int) -> DkrShare:
        if not 0 <= l <= u <= self.n:
            raise InvalidRange(f"share [{l}, {u}] outside [0, {self.n}]")
        return DkrShare(DkrChainState(self.primary_state(u), u, PRIMARY),
                        DkrChainState(self.secondary_state(l), l, SECONDARY))


def dkr_setup(n: int, primary_seed: bytes | None = None, secondary_seed: bytes | None = None) -> DualKeyRegression:
    return DualKeyRegression(n, primary_seed, secondary_seed)


def dkr_key(holder: DualKeyRegression | DkrShare, j: int) -> ResolutionKey:
    return holder.key(j)


def dkr_share(owner: DualKeyRegression, l: int, u: int) -> DkrShare:
    return owner.share(l, u)


@dataclass(frozen=True)
class KeyEnvelope:
    index: int
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">Q", self.index) + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyEnvelope":
        if len(data) < 8 + NONCE_BYTES + 16:
            raise ValueError("envelope too short")
        (j,) = struct.unpack_from(">Q", data)
        return cls(j, bytes(data[8:8 + NONCE_BYTES]), bytes(data[8 + NONCE_BYTES:]))


def _aad(j: int) -> bytes:
    return b"heacstore/envelope" + struct.pack(">Q", j)


def envelope_wrap(outer_secret: bytes, rk: ResolutionKey) -> KeyEnvelope:
    nonce = os.urandom(NONCE_BYTES)
    ct = AESGCM(rk.key).encrypt(nonce, outer_secret, _aad(rk.index))
    return KeyEnvelope(rk.index, nonce, ct)


def envelope_unwrap(env: KeyEnvelope, rk: ResolutionKey) -> bytes:
    if env.index != rk.index:
        raise AuthFailure(f"envelope {env.index} opened with resolution key {rk.index}")
    try:
        return AESGCM(rk.key).decrypt(env.nonce, env.ciphertext, _aad(env.index))
    except InvalidTag:
        raise AuthFailure(f"envelope {env.index} failed authentication") from None
