"""Canonical byte encoding for everything that gets hashed or signed.

Every multi-field structure is serialized as length-prefixed fields in a
fixed declaration order, starting with a short ASCII type tag.  Length
prefixes remove concatenation ambiguity; the tag separates hash domains
so structures of different types can never collide byte-wise.
"""

__all__ = [
    "enc_bytes",
    "enc_uint",
    "enc_uint256",
    "enc_bits",
    "encode_fields",
]

_U64_MAX = 2**64 - 1


def enc_bytes(data: bytes) -> bytes:
    """4-byte big-endian length prefix followed by the raw bytes."""
    if len(data) > 0xFFFFFFFF:
        raise ValueError("field too long")
    return len(data).to_bytes(4, "big") + data


def enc_uint(value: int) -> bytes:
    """Fixed-width 8-byte big-endian unsigned integer."""
    if not 0 <= value <= _U64_MAX:
        raise ValueError(f"uint64 out of range: {value}")
    return value.to_bytes(8, "big")


def enc_uint256(value: int) -> bytes:
    """Fixed-width 32-byte big-endian unsigned integer (digest-domain values)."""
    if not 0 <= value < 2**256:
        raise ValueError("uint256 out of range")
    return value.to_bytes(32, "big")


def enc_bits(value: int, width: int) -> bytes:
    """A bit string of `width` bits, MSB-first, zero-padded to whole bytes.

    Encodes the bit length so "0" and "00" stay distinct.
    """
    if width < 0 or value < 0 or (width == 0 and value != 0) or value.bit_length() > width:
        raise ValueError(f"bit string out of range: value={value} width={width}")
    nbytes = (width + 7) // 8
    packed = (value << (nbytes * 8 - width)).to_bytes(nbytes, "big") if width else b""
    return enc_uint(width) + enc_bytes(packed)


def encode_fields(tag: str, *fields: bytes) -> bytes:
    """Concatenate a type tag and pre-encoded fields in declaration order."""
    return enc_bytes(tag.encode("ascii")) + b"".join(fields)
