"""Binary-tree identifier space, XOR metric, subtree algebra and k-buckets.

Identifiers (KIDs) are fixed-width bit strings placing each player at a leaf
of a binary tree of height `bits`.  A subtree is named by its root depth and
the bit prefix leading to it.  Bucket `d` of a routing table holds contacts
from the sibling subtree at depth d: the subtree hanging off the owner's
path at its d-th edge.  Iterative lookups over a transport live with the
simulated node; everything here is pure data manipulation.
"""

from dataclasses import dataclass

from . import crypto
from .encoding import enc_bits, enc_bytes, encode_fields

__all__ = [
    "Kid",
    "SubtreeId",
    "Contact",
    "RoutingTable",
    "OverlayError",
    "derive_kid",
    "kid_from_int",
    "xor_distance",
    "sibling_subtree",
    "home_subtree",
]


class OverlayError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Kid:
    """A `width`-bit overlay identifier, stored MSB-first as an integer."""

    value: int
    width: int

    def __post_init__(self):
        if not 1 <= self.width <= 256:
            raise OverlayError(f"kid width out of range: {self.width}")
        if not 0 <= self.value < (1 << self.width):
            raise OverlayError("kid value exceeds width")

    def bit(self, index: int) -> int:
        """Bit at position `index`, counted from the most significant bit."""
        return (self.value >> (self.width - 1 - index)) & 1

    def prefix(self, depth: int) -> "SubtreeId":
        """The depth-`depth` subtree containing this leaf."""
        if not 0 <= depth <= self.width:
            raise OverlayError(f"depth out of range: {depth}")
        return SubtreeId(self.value >> (self.width - depth), depth, self.width)

    def bits_str(self) -> str:
        return format(self.value, f"0{self.width}b")

    def encode(self) -> bytes:
        return encode_fields("KID", enc_bits(self.value, self.width))

    def __str__(self) -> str:
        return self.bits_str()


@dataclass(frozen=True, slots=True)
class SubtreeId:
    """A subtree named by its `depth`-bit prefix within a `bits`-wide tree."""

    prefix: int
    depth: int
    bits: int

    def __post_init__(self):
        if not 0 <= self.depth <= self.bits:
            raise OverlayError(f"subtree depth out of range: {self.depth}")
        if not 0 <= self.prefix < (1 << self.depth) or (self.depth == 0 and self.prefix != 0):
            raise OverlayError("subtree prefix exceeds depth")

    def contains(self, kid: Kid) -> bool:
        if kid.width != self.bits:
            raise OverlayError("kid width does not match tree size")
        return kid.value >> (self.bits - self.depth) == self.prefix if self.depth else True

    def sibling(self) -> "SubtreeId":
        if self.depth == 0:
            raise OverlayError("the whole tree has no sibling")
        return SubtreeId(self.prefix ^ 1, self.depth, self.bits)

    def parent(self) -> "SubtreeId":
        if self.depth == 0:
            raise OverlayError("the whole tree has no parent")
        return SubtreeId(self.prefix >> 1, self.depth - 1, self.bits)

    def is_sibling_of(self, other: "SubtreeId") -> bool:
        return (
            self.bits == other.bits
            and self.depth == other.depth
            and self.depth > 0
            and self.prefix ^ other.prefix == 1
        )

    def random_kid_within(self, rng) -> Kid:
        """A uniformly random leaf identifier inside this subtree."""
        low_bits = self.bits - self.depth
        return Kid((self.prefix << low_bits) | rng.getrandbits(low_bits), self.bits)

    def bits_str(self) -> str:
        return format(self.prefix, f"0{self.depth}b") if self.depth else ""

    def encode(self) -> bytes:
        return encode_fields("SUB", enc_bits(self.prefix, self.depth), enc_bits(self.bits, 16))

    def __str__(self) -> str:
        return f"[{self.bits_str() or 'root'}]"


def derive_kid(token: bytes, bits: int) -> Kid:
    """First `bits` bits of the token hash: the player's leaf position."""
    if not 1 <= bits <= 256:
        raise OverlayError(f"kid size must be in [1, 256], got {bits}")
    digest = int.from_bytes(crypto.hash_bytes(token), "big")
    return Kid(digest >> (256 - bits), bits)


def kid_from_int(value: int, bits: int) -> Kid:
    """Project a 256-bit integer onto the identifier space (top `bits` bits)."""
    if not 0 <= value < 2**256:
        raise OverlayError("value out of 256-bit range")
    return Kid(value >> (256 - bits), bits)


def xor_distance(a: Kid, b: Kid) -> int:
    if a.width != b.width:
        raise OverlayError(f"kid width mismatch: {a.width} vs {b.width}")
    return a.value ^ b.value


def sibling_subtree(kid: Kid, depth: int) -> SubtreeId:
    """The subtree rooted at the sibling of kid's depth-`depth` ancestor.

    Its members share the first depth-1 bits with `kid` and differ in the
    next one; the sibling subtrees for depth 1..width partition the rest of
    the tree around the leaf.
    """
    if depth == 0:
        raise OverlayError("no sibling subtree at the root")
    return kid.prefix(depth).sibling()


def home_subtree(kid: Kid, depth: int) -> SubtreeId:
    return kid.prefix(depth)


@dataclass(frozen=True, slots=True)
class Contact:
    """What a node stores about a peer: identity, key material, address."""

    kid: Kid
    pk: bytes
    token: bytes
    address: int


class RoutingTable:
    """Per-node contact store: one bucket of at most `k` peers per depth.

    Bucket `d` only ever holds contacts whose kid lies in the owner's
    sibling subtree at depth d.  There is no eviction: membership is frozen
    per lottery round, so the first k contacts seen for a bucket stay.
    """

    def __init__(self, own_kid: Kid, k: int, authority_pk: bytes):
        if k < 1:
            raise OverlayError("bucket capacity must be >= 1")
        self.own_kid = own_kid
        self.k = k
        self.authority_pk = authority_pk
        self.buckets: dict[int, list[Contact]] = {}
        self._by_kid: dict[Kid, Contact] = {}

    def bucket_depth(self, kid: Kid) -> int:
        """Depth of the sibling subtree containing `kid` (1 = first bit differs)."""
        dist = xor_distance(self.own_kid, kid)
        if dist == 0:
            raise OverlayError("own kid has no bucket")
        return self.own_kid.width - dist.bit_length() + 1

    def insert(self, contact: Contact) -> bool:
        """Place a contact in its bucket; returns False when dropped.

        Rejects contacts whose token does not verify under the authority key
        (callers count that as a misbehavior observation).
        """
        if contact.kid == self.own_kid:
            return False
        if derive_kid(contact.token, self.own_kid.width) != contact.kid:
            raise OverlayError("contact kid does not match its token")
        if not crypto.verify_token(self.authority_pk, contact.pk, contact.token):
            raise OverlayError("contact token does not verify")
        if contact.kid in self._by_kid:
            return False
        depth = self.bucket_depth(contact.kid)
        bucket = self.buckets.setdefault(depth, [])
        if len(bucket) >= self.k:
            return False
        bucket.append(contact)
        self._by_kid[contact.kid] = contact
        return True

    def bucket(self, depth: int) -> list[Contact]:
        return list(self.buckets.get(depth, ()))

    def bucket_full(self, depth: int) -> bool:
        return len(self.buckets.get(depth, ())) >= self.k

    def contacts(self) -> list[Contact]:
        out: list[Contact] = []
        for depth in sorted(self.buckets):
            out.extend(self.buckets[depth])
        return out

    def closest(self, target: Kid, limit: int) -> list[Contact]:
        """Up to `limit` known contacts ordered by XOR distance to `target`."""
        ranked = sorted(self._by_kid.values(), key=lambda c: (xor_distance(c.kid, target), c.kid.value))
        return ranked[:limit]

    def members_within(self, subtree: SubtreeId) -> list[Contact]:
        return [c for c in self.contacts() if subtree.contains(c.kid)]

    def __contains__(self, kid: Kid) -> bool:
        return kid in self._by_kid

    def __len__(self) -> int:
        return len(self._by_kid)
