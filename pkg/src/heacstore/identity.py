"""Local principal keypairs: Ed25519 for request signatures, X25519 for grants.

Grants are hybrid-encrypted: an ephemeral X25519 exchange with the recipient's
public key feeds HKDF-SHA256, whose output keys AES-GCM over the grant blob.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure

_RAW = dict(encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw)
_RAW_PRIV = dict(encoding=serialization.Encoding.Raw, format=serialization.PrivateFormat.Raw,
                 encryption_algorithm=serialization.NoEncryption())
_HYBRID_INFO = b"heacstore/grant/v1"


@dataclass(frozen=True)
class PublicIdentity:
    principal_id: str
    sign_pub: bytes
    kex_pub: bytes

    def verify(self, signature: bytes, message: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.sign_pub).verify(signature, message)
            return True
        except InvalidSignature:
            return False


class Identity:
    def __init__(self, principal_id: str, sign_key: Ed25519PrivateKey | None = None,
                 kex_key: X25519PrivateKey | None = None):
        self.principal_id = principal_id
        self.sign_key = sign_key or Ed25519PrivateKey.generate()
        self.kex_key = kex_key or X25519PrivateKey.generate()

    @property
    def public(self) -> PublicIdentity:
        return PublicIdentity(self.principal_id,
                              self.sign_key.public_key().public_bytes(**_RAW),
                              self.kex_key.public_key().public_bytes(**_RAW))

    def sign(self, message: bytes) -> bytes:
        return self.sign_key.sign(message)

    def open(self, sealed: bytes, aad: bytes = b"") -> bytes:
        return hybrid_decrypt(self.kex_key, sealed, aad)

    def save(self, path: str | os.PathLike):
        doc = {"principal_id": self.principal_id,
               "sign": self.sign_key.private_bytes(**_RAW_PRIV).hex(),
               "kex": self.kex_key.private_bytes(**_RAW_PRIV).hex()}
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc))
        p.chmod(0o600)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Identity":
        doc = json.loads(Path(path).read_text())
        return cls(doc["principal_id"],
                   Ed25519PrivateKey.from_private_bytes(bytes.fromhex(doc["sign"])),
                   X25519PrivateKey.from_private_bytes(bytes.fromhex(doc["kex"])))


def _hkdf(shared: bytes, eph_pub: bytes, rcpt_pub: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=eph_pub + rcpt_pub, info=_HYBRID_INFO).derive(shared)


def hybrid_encrypt(recipient_kex_pub: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    """``ephemeral_pub (32) | nonce (12) | AES-GCM body``."""
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(**_RAW)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_kex_pub))
    nonce = os.urandom(12)
    body = AESGCM(_hkdf(shared, eph_pub, recipient_kex_pub)).encrypt(nonce, plaintext, aad)
    return eph_pub + nonce + body


def hybrid_decrypt(kex_key: X25519PrivateKey, sealed: bytes, aad: bytes = b"") -> bytes:
    if len(sealed) < 32 + 12 + 16:
        raise AuthFailure("hybrid ciphertext too short")
    eph_pub, nonce, body = sealed[:32], sealed[32:44], sealed[44:]
    own_pub = kex_key.public_key().public_bytes(**_RAW)
    shared = kex_key.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    try:
        return AESGCM(_hkdf(shared, eph_pub, own_pub)).decrypt(nonce, body, aad)
    except InvalidTag:
        raise AuthFailure("grant ciphertext failed authentication") from None
