"""Hashing, domain reduction, deterministic Ed25519 keys and signatures.

All primitives are pure functions over value-like inputs and safe to call
from any thread.  Digests are 32-byte SHA3-256 values ordered as big-endian
unsigned integers; signatures are deterministic Ed25519, so signing the same
message twice with the same key yields identical bytes (the misbehavior-proof
logic relies on that).
"""

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

__all__ = [
    "DIGEST_SIZE",
    "CryptoError",
    "KeyPair",
    "hash_bytes",
    "hash_to_domain",
    "keygen",
    "sign",
    "verify",
    "issue_token",
    "verify_token",
]

DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
KEY_SIZE = 32


class CryptoError(ValueError):
    """Malformed key material, signature length, or domain parameter."""


def hash_bytes(data: bytes) -> bytes:
    """SHA3-256 digest of `data`."""
    return hashlib.sha3_256(data).digest()


def hash_to_domain(data: bytes, domain_size: int) -> int:
    """Map arbitrary bytes onto [0, domain_size) by hashing and reducing.

    The digest is read as a big-endian integer and reduced modulo
    `domain_size`.  With domain_size = 2**256 this is the identity on the
    digest.  The modulo introduces a small bias for domains that do not
    divide 2**256; acceptable at desk scale and documented in the README.
    """
    if domain_size < 1:
        raise CryptoError(f"domain size must be >= 1, got {domain_size}")
    return int.from_bytes(hash_bytes(data), "big") % domain_size


@dataclass(frozen=True)
class KeyPair:
    """Deterministic Ed25519 key pair; `sk` is the 32-byte private seed."""

    pk: bytes
    sk: bytes
    _priv: Ed25519PrivateKey = field(repr=False, compare=False)


def keygen(seed: bytes) -> KeyPair:
    """Derive an Ed25519 key pair from 32 bytes of entropy."""
    if len(seed) != KEY_SIZE:
        raise CryptoError(f"key seed must be {KEY_SIZE} bytes, got {len(seed)}")
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    pk = priv.public_key().public_bytes_raw()
    return KeyPair(pk=pk, sk=seed, _priv=priv)


def sign(keypair: KeyPair, message: bytes) -> bytes:
    return keypair._priv.sign(message)


_verify_cache: dict[tuple[bytes, bytes, bytes], bool] = {}


def verify(pk: bytes, message: bytes, sig: bytes) -> bool:
    """Check an Ed25519 signature; False on any mismatch, error on bad lengths.

    Results are memoized: the same container signatures get re-verified by
    many simulated players, and Ed25519 verification dominates runtime
    otherwise.
    """
    if len(pk) != KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        raise CryptoError("malformed key or signature length")
    key = (pk, hashlib.sha3_256(message).digest(), sig)
    cached = _verify_cache.get(key)
    if cached is not None:
        return cached
    try:
        Ed25519PublicKey.from_public_bytes(pk).verify(sig, message)
        ok = True
    except InvalidSignature:
        ok = False
    if len(_verify_cache) > 1_000_000:
        _verify_cache.clear()
    _verify_cache[key] = ok
    return ok


def issue_token(authority: KeyPair, pk: bytes) -> bytes:
    """Authorization token: the authority's signature over a player key."""
    return sign(authority, pk)


def verify_token(authority_pk: bytes, pk: bytes, token: bytes) -> bool:
    return verify(authority_pk, pk, token)
