"""Encrypted time-series storage with key-derived access control.

Producers seal fixed-interval chunks and encrypt per-chunk digests with a
key-canceling additive cipher; the server folds ciphertexts in a k-ary index
without holding any key; consumers decrypt range statistics from the two
boundary keys their grants let them derive.
"""

from .chunking import DataPoint, PlainDigest, SealedChunk, StreamConfig, open_chunk, seal_chunk
from .client import Client, Consumer, ConsumerGrant, Owner, Producer, StatResult, connect
from .dkr import DkrShare, DualKeyRegression, KeyEnvelope, envelope_unwrap, envelope_wrap
from .errors import HeacStoreError
from .heac import DigestLayout, EncryptedDigest, heac_add, heac_decrypt, heac_decrypt_range, heac_encrypt
from .identity import Identity, PublicIdentity
from .index import EncryptedIndex, NodeCache, decompose_range
from .keytree import AccessTokenSet, KeyDerivationTree, NodeLabel, derive_leaf, expand_tokens, range_cover
from .kvstore import FileKvStore, KvStore, MemoryKvStore
from .server import Engine, TcpServer

__version__ = "0.1.0"

__all__ = [
    "AccessTokenSet", "Client", "Consumer", "ConsumerGrant", "DataPoint", "DigestLayout", "DkrShare",
    "DualKeyRegression", "EncryptedDigest", "EncryptedIndex", "Engine", "FileKvStore",
    "HeacStoreError", "Identity", "KeyDerivationTree", "KeyEnvelope", "KvStore", "MemoryKvStore",
    "NodeCache", "NodeLabel", "Owner", "PlainDigest", "Producer", "PublicIdentity", "SealedChunk",
    "StatResult", "StreamConfig", "TcpServer", "connect", "decompose_range", "derive_leaf",
    "envelope_unwrap", "envelope_wrap", "expand_tokens", "heac_add", "heac_decrypt",
    "heac_decrypt_range", "heac_encrypt", "open_chunk", "range_cover", "seal_chunk",
]
