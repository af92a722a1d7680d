"""Aggregate containers, their combination algebra, and the fault-tolerance rules.

A container carries one subtree's aggregate value plus the bookkeeping that
makes the tree verifiable: the leaf count, references to the child
containers it was built from, and the subtree it stands for.  Its hash
covers every field, so any verifier can recompute it.  Confirmation,
majority voting and equivocation proofs operate on signatures over the
triple (container hash, depth, count).
"""

from dataclasses import dataclass
from functools import cached_property

from . import crypto
from .encoding import enc_bytes, enc_uint, encode_fields
from .overlay import Kid, SubtreeId, derive_kid

__all__ = [
    "AggregateContainer",
    "ContainerSignature",
    "ConfirmedContainer",
    "MisbehaviorProof",
    "AggregationError",
    "combine_aggregates",
    "make_leaf_container",
    "combine_containers",
    "lift_container",
    "sign_container",
    "signature_message",
    "verify_signature",
    "confirmation_failures",
    "try_confirm",
    "majority_select",
    "detect_equivocation",
    "SignatureLog",
    "chain_failures",
]


class AggregationError(ValueError):
    pass


def combine_aggregates(a1: bytes, a2: bytes) -> bytes:
    """Merge two aggregate values into their parent value.

    The inputs are concatenated in ascending big-endian order before
    hashing, which makes the operation commutative.
    """
    lo, hi = (a1, a2) if a1 <= a2 else (a2, a1)
    return crypto.hash_bytes(lo + hi)


@dataclass(frozen=True)
class AggregateContainer:
    """One subtree's aggregate plus the context needed to verify it.

    `children` holds zero (leaf), one (lifted past an empty sibling) or two
    (combined) references of (child hash, child leaf count), two-child
    references sorted ascending by hash so the parent hash is independent of
    which side arrived first.
    """

    aggregate: bytes
    count: int
    children: tuple[tuple[bytes, int], ...]
    subtree: SubtreeId

    def __post_init__(self):
        if len(self.aggregate) != crypto.DIGEST_SIZE:
            raise AggregationError("aggregate must be a digest")
        if self.count < 1:
            raise AggregationError("count must be positive")
        if len(self.children) > 2:
            raise AggregationError("at most two children")
        if len(self.children) == 2 and self.children[0][0] > self.children[1][0]:
            raise AggregationError("children must be sorted by hash")
        child_sum = sum(c for _, c in self.children)
        if self.children and child_sum != self.count:
            raise AggregationError("count must equal the sum of child counts")

    def payload(self) -> bytes:
        """Canonical serialization of every field but the hash itself."""
        parts = [enc_bytes(self.aggregate), enc_uint(self.count), enc_uint(len(self.children))]
        for child_hash, child_count in self.children:
            parts.append(enc_bytes(child_hash))
            parts.append(enc_uint(child_count))
        parts.append(self.subtree.encode())
        return encode_fields("AGC", *parts)

    @cached_property
    def hash(self) -> bytes:
        return crypto.hash_bytes(self.payload())

    @property
    def depth(self) -> int:
        return self.subtree.depth

    def has_child(self, child_hash: bytes, child_count: int) -> bool:
        return (child_hash, child_count) in self.children

    def to_json(self) -> dict:
        return {
            "aggregate": self.aggregate.hex(),
            "count": self.count,
            "children": [{"hash": h.hex(), "count": c} for h, c in self.children],
            "subtree": {"prefix": self.subtree.bits_str(), "bits": self.subtree.bits},
            "hash": self.hash.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AggregateContainer":
        prefix = obj["subtree"]["prefix"]
        subtree = SubtreeId(int(prefix, 2) if prefix else 0, len(prefix), obj["subtree"]["bits"])
        return cls(
            aggregate=bytes.fromhex(obj["aggregate"]),
            count=obj["count"],
            children=tuple((bytes.fromhex(c["hash"]), c["count"]) for c in obj["children"]),
            subtree=subtree,
        )


def make_leaf_container(aggregate: bytes, kid: Kid) -> AggregateContainer:
    """The starting container: one player's initial aggregate at its leaf."""
    return AggregateContainer(
        aggregate=aggregate,
        count=1,
        children=(),
        subtree=kid.prefix(kid.width),
    )


def combine_containers(left: AggregateContainer, right: AggregateContainer) -> AggregateContainer:
    """Combine the containers of two sibling subtrees into their parent's."""
    if not left.subtree.is_sibling_of(right.subtree):
        raise AggregationError(f"subtrees are not siblings: {left.subtree} vs {right.subtree}")
    children = ((left.hash, left.count), (right.hash, right.count))
    if children[0][0] > children[1][0]:
        children = (children[1], children[0])
    return AggregateContainer(
        aggregate=combine_aggregates(left.aggregate, right.aggregate),
        count=left.count + right.count,
        children=children,
        subtree=left.subtree.parent(),
    )


def lift_container(child: AggregateContainer) -> AggregateContainer:
    """Promote a container one level when the sibling subtree is empty.

    Value and count carry over unchanged; the single child reference and the
    new subtree id still change the hash, so every level has a distinct,
    recomputable container.
    """
    if child.depth == 0:
        raise AggregationError("root container cannot be lifted")
    return AggregateContainer(
        aggregate=child.aggregate,
        count=child.count,
        children=((child.hash, child.count),),
        subtree=child.subtree.parent(),
    )


@dataclass(frozen=True)
class ContainerSignature:
    """A player's endorsement of the container (hash, depth, count) triple."""

    signer_pk: bytes
    signer_token: bytes
    container_hash: bytes
    depth: int
    count: int
    sig: bytes

    def signer_kid(self, bits: int) -> Kid:
        return derive_kid(self.signer_token, bits)

    def to_json(self) -> dict:
        return {
            "signer_pk": self.signer_pk.hex(),
            "signer_token": self.signer_token.hex(),
            "container_hash": self.container_hash.hex(),
            "depth": self.depth,
            "count": self.count,
            "sig": self.sig.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContainerSignature":
        return cls(
            signer_pk=bytes.fromhex(obj["signer_pk"]),
            signer_token=bytes.fromhex(obj["signer_token"]),
            container_hash=bytes.fromhex(obj["container_hash"]),
            depth=obj["depth"],
            count=obj["count"],
            sig=bytes.fromhex(obj["sig"]),
        )


def signature_message(container_hash: bytes, depth: int, count: int) -> bytes:
    return encode_fields("CSG", enc_bytes(container_hash), enc_uint(depth), enc_uint(count))


def sign_container(
    keypair: crypto.KeyPair, token: bytes, container: AggregateContainer
) -> ContainerSignature:
    """Sign a container one has computed; honest signers stay inside its subtree."""
    own_kid = derive_kid(token, container.subtree.bits)
    if not container.subtree.contains(own_kid):
        raise AggregationError("refusing to sign a container for a foreign subtree")
    return ContainerSignature(
        signer_pk=keypair.pk,
        signer_token=token,
        container_hash=container.hash,
        depth=container.depth,
        count=container.count,
        sig=crypto.sign(keypair, signature_message(container.hash, container.depth, container.count)),
    )


def verify_signature(sig: ContainerSignature, authority_pk: bytes) -> bool:
    """Token chains to the authority and the signature covers (h, d, c)."""
    if not crypto.verify_token(authority_pk, sig.signer_pk, sig.signer_token):
        return False
    message = signature_message(sig.container_hash, sig.depth, sig.count)
    return crypto.verify(sig.signer_pk, message, sig.sig)


@dataclass(frozen=True)
class ConfirmedContainer:
    """A container plus the signature evidence a verifier re-checks.

    `sigs_on_hash` endorse the container itself; `child_evidence` holds
    signatures on the child container hashes (the computing player's own
    child, and the sibling provider's when there is one).
    """

    container: AggregateContainer
    sigs_on_hash: tuple[ContainerSignature, ...]
    child_evidence: tuple[ContainerSignature, ...]

    def signer_pks(self) -> set[bytes]:
        return {s.signer_pk for s in self.sigs_on_hash}

    def to_json(self) -> dict:
        return {
            "container": self.container.to_json(),
            "sigs_on_hash": [s.to_json() for s in self.sigs_on_hash],
            "child_evidence": [s.to_json() for s in self.child_evidence],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConfirmedContainer":
        return cls(
            container=AggregateContainer.from_json(obj["container"]),
            sigs_on_hash=tuple(ContainerSignature.from_json(s) for s in obj["sigs_on_hash"]),
            child_evidence=tuple(ContainerSignature.from_json(s) for s in obj["child_evidence"]),
        )


def confirmation_failures(
    confirmed: ConfirmedContainer,
    authority_pk: bytes,
    sig_threshold: int,
    reachable: int | None = None,
    signer_allowed=None,
) -> list[str]:
    """Why a confirmed container does not satisfy the confirmation rule.

    Empty list means it verifies: all signatures are valid and from members
    of the claimed subtree, every populated child half contributed a signer,
    each child reference carries a signature, and the count of distinct
    signers reaches min(sig_threshold, reachable).  `reachable` defaults to
    the container's own leaf count, the best estimate a remote verifier has.
    `signer_allowed` optionally enforces the membership-snapshot rule.
    """
    container = confirmed.container
    bits = container.subtree.bits
    reachable = container.count if reachable is None else reachable
    failures: list[str] = []

    valid_signers: dict[bytes, Kid] = {}
    for sig in confirmed.sigs_on_hash:
        if sig.container_hash != container.hash or sig.depth != container.depth or sig.count != container.count:
            failures.append("signature targets a different container")
            continue
        if not verify_signature(sig, authority_pk):
            failures.append("invalid signature on container hash")
            continue
        kid = sig.signer_kid(bits)
        if not container.subtree.contains(kid):
            failures.append("signer outside the container subtree")
            continue
        if signer_allowed is not None and not signer_allowed(kid):
            failures.append("signer not in the membership snapshot")
            continue
        valid_signers[sig.signer_pk] = kid

    if len(valid_signers) < min(sig_threshold, max(reachable, 1)):
        failures.append(
            f"only {len(valid_signers)} distinct signers, need {min(sig_threshold, max(reachable, 1))}"
        )

    for half in _populated_halves(container):
        if not any(half.contains(kid) for kid in valid_signers.values()):
            failures.append(f"no signer from child subtree {half}")

    by_child: dict[tuple[bytes, int], bool] = {ref: False for ref in container.children}
    for sig in confirmed.child_evidence:
        ref = (sig.container_hash, sig.count)
        if ref not in by_child or sig.depth != container.depth + 1:
            continue
        if not verify_signature(sig, authority_pk):
            continue
        kid = sig.signer_kid(bits)
        if not container.subtree.contains(kid):
            continue
        if signer_allowed is not None and not signer_allowed(kid):
            continue
        by_child[ref] = True
    for ref, seen in by_child.items():
        if not seen:
            failures.append(f"missing signature on child container {ref[0].hex()[:12]}")

    return failures


def _populated_halves(container: AggregateContainer) -> list[SubtreeId]:
    """The child subtrees that demonstrably hold players.

    Two children mean both halves were populated and each must contribute a
    signer.  With one child the populated half is wherever the members sit,
    so the requirement reduces to the signer-count threshold.
    """
    if len(container.children) != 2:
        return []
    sub = container.subtree
    return [
        SubtreeId(sub.prefix << 1, sub.depth + 1, sub.bits),
        SubtreeId((sub.prefix << 1) | 1, sub.depth + 1, sub.bits),
    ]


def try_confirm(
    container: AggregateContainer,
    sigs_on_hash,
    child_evidence,
    authority_pk: bytes,
    sig_threshold: int,
    reachable: int,
    signer_allowed=None,
) -> ConfirmedContainer | None:
    """Assemble a confirmed container if the gathered evidence suffices."""
    seen: set[bytes] = set()
    unique = []
    for sig in sigs_on_hash:
        if sig.signer_pk not in seen and sig.container_hash == container.hash:
            seen.add(sig.signer_pk)
            unique.append(sig)
    candidate = ConfirmedContainer(
        container=container,
        sigs_on_hash=tuple(unique),
        child_evidence=tuple(child_evidence),
    )
    failures = confirmation_failures(
        candidate, authority_pk, sig_threshold, reachable=reachable, signer_allowed=signer_allowed
    )
    return candidate if not failures else None


def majority_select(candidates: dict[bytes, int]) -> bytes:
    """The container hash with the most distinct signers; ties to the smaller hash."""
    if not candidates:
        raise AggregationError("majority vote needs at least one candidate")
    return min(candidates, key=lambda h: (-candidates[h], h))


@dataclass(frozen=True)
class MisbehaviorProof:
    """Two signatures by one signer on different containers for the same (d, c).

    `certain` marks deviations provable outright: with count <= the signature
    threshold the signer either signed two initial containers or endorsed an
    unconfirmed one, so no honest explanation remains.
    """

    first: ContainerSignature
    second: ContainerSignature
    certain: bool

    def to_json(self) -> dict:
        return {
            "first": self.first.to_json(),
            "second": self.second.to_json(),
            "certain": self.certain,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MisbehaviorProof":
        return cls(
            first=ContainerSignature.from_json(obj["first"]),
            second=ContainerSignature.from_json(obj["second"]),
            certain=obj["certain"],
        )


def detect_equivocation(
    s1: ContainerSignature, s2: ContainerSignature, sig_threshold: int
) -> MisbehaviorProof | None:
    """A proof when one signer endorsed two different hashes for the same (d, c)."""
    if s1.signer_pk != s2.signer_pk:
        return None
    if (s1.depth, s1.count) != (s2.depth, s2.count):
        return None
    if s1.container_hash == s2.container_hash:
        return None
    first, second = sorted((s1, s2), key=lambda s: s.container_hash)
    return MisbehaviorProof(first=first, second=second, certain=s1.count <= sig_threshold)


class SignatureLog:
    """Every valid signature a player has seen, indexed for equivocation checks."""

    def __init__(self, sig_threshold: int):
        self.sig_threshold = sig_threshold
        self._seen: dict[tuple[bytes, int, int], dict[bytes, ContainerSignature]] = {}

    def record(self, sig: ContainerSignature) -> MisbehaviorProof | None:
        """Store a signature; returns a proof when it contradicts an earlier one."""
        key = (sig.signer_pk, sig.depth, sig.count)
        variants = self._seen.setdefault(key, {})
        if sig.container_hash in variants:
            return None
        proof = None
        if variants:
            other = next(iter(variants.values()))
            proof = detect_equivocation(other, sig, self.sig_threshold)
        variants[sig.container_hash] = sig
        return proof


def chain_failures(
    chain: list[ConfirmedContainer],
    leaf_kid: Kid,
    authority_pk: bytes,
    sig_threshold: int,
    root_hash: bytes | None = None,
) -> list[str]:
    """Validate a leaf-to-root container chain used as a participation proof.

    Checks the leaf sits at the claimed identifier, every link is the child
    of the next container, each container satisfies the confirmation rule,
    and the final container is the tree root (matching `root_hash` if given).
    """
    failures: list[str] = []
    if not chain:
        return ["empty container chain"]
    leaf = chain[0].container
    if leaf.subtree != leaf_kid.prefix(leaf_kid.width):
        failures.append("leaf container does not sit at the claimed identifier")
    if leaf.count != 1 or leaf.children:
        failures.append("leaf container malformed")
    for lower, upper in zip(chain, chain[1:]):
        if upper.container.subtree != lower.container.subtree.parent():
            failures.append("chain containers do not step one level at a time")
            break
        if not upper.container.has_child(lower.container.hash, lower.container.count):
            failures.append("container is not referenced by its parent")
            break
    for confirmed in chain:
        failures.extend(
            confirmation_failures(confirmed, authority_pk, sig_threshold)
        )
    top = chain[-1].container
    if top.subtree.depth != 0:
        failures.append("chain does not reach the tree root")
    if root_hash is not None and top.hash != root_hash:
        failures.append("chain root differs from the published root")
    return failures
