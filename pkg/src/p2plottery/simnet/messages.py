"""Message types exchanged between simulated nodes.

Every message travels inside a signed envelope carrying the sender's public
key and authorization token, per the protocol's accountability rule.  The
canonical byte encoding of the envelope defines both the signed content and
the wire size used for traffic accounting; inside the single-process
simulation the structured objects themselves are handed over.
"""

from dataclasses import dataclass, field

from .. import crypto
from ..aggregation import AggregateContainer, ConfirmedContainer, ContainerSignature, MisbehaviorProof
from ..encoding import enc_bytes, enc_uint, encode_fields
from ..lottery import Claim
from ..overlay import Contact, Kid, SubtreeId

__all__ = [
    "Envelope",
    "FindNode",
    "NodesReply",
    "Buy",
    "BuyReply",
    "TrackerQuery",
    "TrackerReply",
    "Pull",
    "PullReply",
    "SignRequest",
    "SignReply",
    "RootQuery",
    "RootReply",
    "ClaimSubmit",
    "ClaimReply",
    "MisbehaviorReport",
    "Denied",
    "encode_contact",
    "encode_confirmed",
]


def encode_contact(contact: Contact) -> bytes:
    return encode_fields(
        "CNT",
        contact.kid.encode(),
        enc_bytes(contact.pk),
        enc_bytes(contact.token),
        enc_uint(contact.address),
    )


def encode_signature(sig: ContainerSignature) -> bytes:
    return encode_fields(
        "CSR",
        enc_bytes(sig.signer_pk),
        enc_bytes(sig.signer_token),
        enc_bytes(sig.container_hash),
        enc_uint(sig.depth),
        enc_uint(sig.count),
        enc_bytes(sig.sig),
    )


def encode_container(container: AggregateContainer) -> bytes:
    return enc_bytes(container.payload())


def encode_confirmed(confirmed: ConfirmedContainer) -> bytes:
    parts = [encode_container(confirmed.container), enc_uint(len(confirmed.sigs_on_hash))]
    parts += [encode_signature(s) for s in confirmed.sigs_on_hash]
    parts.append(enc_uint(len(confirmed.child_evidence)))
    parts += [encode_signature(s) for s in confirmed.child_evidence]
    return encode_fields("CCF", *parts)


@dataclass(frozen=True)
class FindNode:
    kind = "find_node"
    target: Kid

    def body_bytes(self) -> bytes:
        return encode_fields("FND", self.target.encode())


@dataclass(frozen=True)
class NodesReply:
    kind = "nodes"
    contacts: tuple[Contact, ...]

    def body_bytes(self) -> bytes:
        return encode_fields("NDS", enc_uint(len(self.contacts)), *map(encode_contact, self.contacts))


@dataclass(frozen=True)
class Buy:
    kind = "buy"
    pk: bytes

    def body_bytes(self) -> bytes:
        return encode_fields("BUY", enc_bytes(self.pk))


@dataclass(frozen=True)
class BuyReply:
    kind = "buy_reply"
    seq: int
    token: bytes
    accepted: bool = True
    reason: str = "ok"

    def body_bytes(self) -> bytes:
        return encode_fields(
            "BYR",
            enc_uint(self.seq),
            enc_bytes(self.token),
            enc_uint(int(self.accepted)),
            enc_bytes(self.reason.encode()),
        )


@dataclass(frozen=True)
class TrackerQuery:
    kind = "tracker"

    def body_bytes(self) -> bytes:
        return encode_fields("TRK")


@dataclass(frozen=True)
class TrackerReply:
    kind = "tracker_reply"
    contact: Contact | None

    def body_bytes(self) -> bytes:
        if self.contact is None:
            return encode_fields("TKR", enc_uint(0))
        return encode_fields("TKR", enc_uint(1), encode_contact(self.contact))


@dataclass(frozen=True)
class Pull:
    kind = "pull"
    subtree: SubtreeId

    def body_bytes(self) -> bytes:
        return encode_fields("PUL", self.subtree.encode())


@dataclass(frozen=True)
class PullReply:
    """Either the confirmed container, or its confirmed children as fallback."""

    kind = "pull_reply"
    status: str  # ok | children | not_ready | no_data | denied
    confirmed: ConfirmedContainer | None = None
    children: tuple[ConfirmedContainer, ...] = ()

    def body_bytes(self) -> bytes:
        parts = [enc_bytes(self.status.encode())]
        parts.append(enc_uint(1 if self.confirmed else 0))
        if self.confirmed:
            parts.append(encode_confirmed(self.confirmed))
        parts.append(enc_uint(len(self.children)))
        parts += [encode_confirmed(c) for c in self.children]
        return encode_fields("PLR", *parts)


@dataclass(frozen=True)
class SignRequest:
    """Ask a subtree member to endorse computed containers by (hash, depth, count).

    The requester attaches its own signatures on the same items, so one
    exchange leaves both sides with both endorsements.
    """

    kind = "sign_request"
    items: tuple[tuple[bytes, int, int], ...]
    own_sigs: tuple[ContainerSignature, ...] = ()

    def body_bytes(self) -> bytes:
        parts = [enc_uint(len(self.items))]
        for h, d, c in self.items:
            parts += [enc_bytes(h), enc_uint(d), enc_uint(c)]
        parts.append(enc_uint(len(self.own_sigs)))
        parts += [encode_signature(s) for s in self.own_sigs]
        return encode_fields("SRQ", *parts)


@dataclass(frozen=True)
class SignReply:
    """Matching endorsements, plus the responder's diverging view if any."""

    kind = "sign_reply"
    sigs: tuple[ContainerSignature, ...] = ()
    divergent: tuple[ConfirmedContainer, ...] = ()

    def body_bytes(self) -> bytes:
        parts = [enc_uint(len(self.sigs))]
        parts += [encode_signature(s) for s in self.sigs]
        parts.append(enc_uint(len(self.divergent)))
        parts += [encode_confirmed(c) for c in self.divergent]
        return encode_fields("SRP", *parts)


@dataclass(frozen=True)
class RootQuery:
    kind = "root_query"

    def body_bytes(self) -> bytes:
        return encode_fields("RTQ")


@dataclass(frozen=True)
class RootReply:
    kind = "root_reply"
    root: ConfirmedContainer | None

    def body_bytes(self) -> bytes:
        if self.root is None:
            return encode_fields("RTR", enc_uint(0))
        return encode_fields("RTR", enc_uint(1), encode_confirmed(self.root))


@dataclass(frozen=True)
class ClaimSubmit:
    kind = "claim"
    claim: Claim

    def body_bytes(self) -> bytes:
        parts = [
            enc_bytes(self.claim.pk),
            enc_bytes(self.claim.token),
            enc_uint(self.claim.seq),
            enc_uint(len(self.claim.chain)),
        ]
        parts += [encode_confirmed(c) for c in self.claim.chain]
        if self.claim.ticket is not None:
            parts.append(enc_bytes(self.claim.ticket.encode()))
            parts.append(enc_bytes(self.claim.random_value))
            parts.append(enc_uint(self.claim.number))
        return encode_fields("CLM", *parts)


@dataclass(frozen=True)
class ClaimReply:
    kind = "claim_reply"
    accepted: bool
    reason: str

    def body_bytes(self) -> bytes:
        return encode_fields("CLR", enc_uint(int(self.accepted)), enc_bytes(self.reason.encode()))


@dataclass(frozen=True)
class MisbehaviorReport:
    kind = "misbehavior"
    proof: MisbehaviorProof

    def body_bytes(self) -> bytes:
        return encode_fields(
            "MBR", encode_signature(self.proof.first), encode_signature(self.proof.second)
        )


@dataclass(frozen=True)
class Denied:
    kind = "denied"
    reason: str

    def body_bytes(self) -> bytes:
        return encode_fields("DEN", enc_bytes(self.reason.encode()))


@dataclass
class Envelope:
    """A signed transport frame: sender identity, request linkage, payload."""

    sender: int
    sender_pk: bytes
    sender_token: bytes  # empty for the authority
    req_id: int
    reply_to: int  # 0 for fresh requests
    message: object
    sig: bytes = b""
    wire_size: int = field(default=0, compare=False)

    def signed_bytes(self) -> bytes:
        return encode_fields(
            "ENV",
            enc_uint(self.sender),
            enc_bytes(self.sender_pk),
            enc_bytes(self.sender_token),
            enc_uint(self.req_id),
            enc_uint(self.reply_to),
            enc_bytes(self.message.kind.encode()),
            enc_bytes(self.message.body_bytes()),
        )

    def seal(self, keypair: crypto.KeyPair) -> "Envelope":
        payload = self.signed_bytes()
        self.sig = crypto.sign(keypair, payload)
        self.wire_size = len(payload) + len(self.sig)
        return self

    def signature_valid(self) -> bool:
        return crypto.verify(self.sender_pk, self.signed_bytes(), self.sig)
