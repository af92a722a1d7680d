"""Ticket formats, winner identification, reward claims and outcome checks.

Two playing modes share the machinery.  In the classic mode (CL) rewards
follow a randomly ordered list of all players, ordered by XOR distance to
the winning number.  In the lotto mode (LO) each player commits to a secret
number up front and wins by matching the winning number exactly.  The
winning number itself comes out of the shared random root aggregate and the
authority's pre-committed secret, so neither side can steer it alone.
"""

import enum
from dataclasses import dataclass, field

from . import crypto
from .aggregation import AggregateContainer, ConfirmedContainer, chain_failures
from .encoding import enc_bytes, enc_uint, enc_uint256, encode_fields
from .overlay import Kid, derive_kid, kid_from_int, xor_distance

__all__ = [
    "Mode",
    "LotteryError",
    "LotteryParams",
    "Ticket",
    "PlayerRecord",
    "WinnerAnnouncement",
    "Claim",
    "VerificationReport",
    "AuthoritySecrets",
    "authority_setup",
    "build_ticket",
    "initial_aggregate",
    "unmask_number",
    "winning_number",
    "order_players",
    "process_claim",
    "verify_outcome",
]

CL_DOMAIN = 2**256


class Mode(str, enum.Enum):
    CL = "CL"
    LO = "LO"


class LotteryError(ValueError):
    pass


@dataclass(frozen=True)
class LotteryParams:
    """Everything the authority publishes before any ticket is sold."""

    mode: Mode
    bits: int
    purchase_deadline: int
    authority_pk: bytes
    hash_spec: str
    commitment: bytes
    epoch_durations: tuple[int, ...]
    reward_count: int
    lotto_domain: int
    sig_threshold: int

    def __post_init__(self):
        if len(self.epoch_durations) != self.bits:
            raise LotteryError("one epoch duration per tree level required")
        if self.mode is Mode.LO and self.lotto_domain < 1:
            raise LotteryError("lotto domain must be positive")

    def number_domain(self) -> int:
        return self.lotto_domain if self.mode is Mode.LO else CL_DOMAIN

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "bits": self.bits,
            "purchase_deadline": self.purchase_deadline,
            "authority_pk": self.authority_pk.hex(),
            "hash_spec": self.hash_spec,
            "commitment": self.commitment.hex(),
            "epoch_durations": list(self.epoch_durations),
            "reward_count": self.reward_count,
            "lotto_domain": self.lotto_domain,
            "sig_threshold": self.sig_threshold,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LotteryParams":
        return cls(
            mode=Mode(obj["mode"]),
            bits=obj["bits"],
            purchase_deadline=obj["purchase_deadline"],
            authority_pk=bytes.fromhex(obj["authority_pk"]),
            hash_spec=obj["hash_spec"],
            commitment=bytes.fromhex(obj["commitment"]),
            epoch_durations=tuple(obj["epoch_durations"]),
            reward_count=obj["reward_count"],
            lotto_domain=obj["lotto_domain"],
            sig_threshold=obj["sig_threshold"],
        )


@dataclass(frozen=True)
class AuthoritySecrets:
    keypair: crypto.KeyPair
    reveal: bytes  # the committed random string, published only at winner identification


def authority_setup(
    rng,
    *,
    mode: Mode,
    bits: int,
    purchase_deadline: int,
    epoch_durations: tuple[int, ...],
    reward_count: int = 1,
    lotto_domain: int = 64,
    sig_threshold: int = 3,
) -> tuple[LotteryParams, AuthoritySecrets]:
    """Generate the authority key pair and the double-hashed commitment."""
    keypair = crypto.keygen(rng.randbytes(32))
    reveal = rng.randbytes(32)
    params = LotteryParams(
        mode=mode,
        bits=bits,
        purchase_deadline=purchase_deadline,
        authority_pk=keypair.pk,
        hash_spec="sha3-256",
        commitment=crypto.hash_bytes(crypto.hash_bytes(reveal)),
        epoch_durations=epoch_durations,
        reward_count=reward_count,
        lotto_domain=lotto_domain,
        sig_threshold=sig_threshold,
    )
    return params, AuthoritySecrets(keypair=keypair, reveal=reveal)


@dataclass(frozen=True)
class Ticket:
    """A player's commitment; its hash is the initial aggregate.

    CL tickets carry the sequence number and the random string directly.
    LO tickets blind the chosen number with a hash of the random string and
    bind (number, sequence, random string) together in a proof digest.
    """

    mode: Mode
    seq: int
    random_value: bytes | None = None  # CL
    masked_number: int | None = None  # LO
    proof: bytes | None = None  # LO

    def encode(self) -> bytes:
        if self.mode is Mode.CL:
            return encode_fields("TCL", enc_uint(self.seq), enc_bytes(self.random_value))
        return encode_fields(
            "TLO", enc_uint(self.seq), enc_uint256(self.masked_number), enc_bytes(self.proof)
        )

    def to_json(self) -> dict:
        out: dict = {"mode": self.mode.value, "seq": self.seq}
        if self.mode is Mode.CL:
            out["random_value"] = self.random_value.hex()
        else:
            out["masked_number"] = self.masked_number
            out["proof"] = self.proof.hex()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Ticket":
        mode = Mode(obj["mode"])
        if mode is Mode.CL:
            return cls(mode=mode, seq=obj["seq"], random_value=bytes.fromhex(obj["random_value"]))
        return cls(
            mode=mode,
            seq=obj["seq"],
            masked_number=obj["masked_number"],
            proof=bytes.fromhex(obj["proof"]),
        )


def _lotto_proof(number: int, seq: int, random_value: bytes) -> bytes:
    return crypto.hash_bytes(
        encode_fields("TKP", enc_uint(number), enc_uint(seq), enc_bytes(random_value))
    )


def build_ticket(
    mode: Mode,
    seq: int,
    random_value: bytes,
    number: int | None = None,
    lotto_domain: int | None = None,
) -> Ticket:
    if mode is Mode.CL:
        return Ticket(mode=mode, seq=seq, random_value=random_value)
    if number is None or lotto_domain is None:
        raise LotteryError("lotto tickets need a chosen number and a domain size")
    if not 0 <= number < lotto_domain:
        raise LotteryError(f"chosen number {number} outside [0, {lotto_domain})")
    masked = number ^ crypto.hash_to_domain(random_value, lotto_domain)
    return Ticket(
        mode=mode, seq=seq, masked_number=masked, proof=_lotto_proof(number, seq, random_value)
    )


def initial_aggregate(ticket: Ticket) -> bytes:
    return crypto.hash_bytes(ticket.encode())


def unmask_number(masked: int, random_value: bytes, lotto_domain: int) -> int:
    return masked ^ crypto.hash_to_domain(random_value, lotto_domain)


def verify_lotto_ticket(ticket: Ticket, random_value: bytes, number: int, lotto_domain: int) -> bool:
    if ticket.mode is not Mode.LO:
        return False
    return (
        unmask_number(ticket.masked_number, random_value, lotto_domain) == number
        and ticket.proof == _lotto_proof(number, ticket.seq, random_value)
    )


@dataclass
class PlayerRecord:
    """Authority-side bookkeeping for one sold ticket."""

    seq: int
    pk: bytes
    token: bytes
    kid: Kid
    sold_at: int
    late: bool = False
    revoked: bool = False
    claimed: bool = False


@dataclass(frozen=True)
class WinnerAnnouncement:
    """The published outcome: root aggregate, revealed secret, winning number."""

    mode: Mode
    root_aggregate: bytes
    reveal: bytes
    winning_number: int
    winner_kids: tuple[Kid, ...] = ()

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "root_aggregate": self.root_aggregate.hex(),
            "reveal": self.reveal.hex(),
            "winning_number": f"{self.winning_number:x}",
            "winner_kids": [{"bits": k.bits_str()} for k in self.winner_kids],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WinnerAnnouncement":
        return cls(
            mode=Mode(obj["mode"]),
            root_aggregate=bytes.fromhex(obj["root_aggregate"]),
            reveal=bytes.fromhex(obj["reveal"]),
            winning_number=int(obj["winning_number"], 16),
            winner_kids=tuple(Kid(int(k["bits"], 2), len(k["bits"])) for k in obj["winner_kids"]),
        )


def winning_number(root_aggregate: bytes, reveal: bytes, domain: int) -> int:
    """XOR of the domain-reduced hashes of the root aggregate and the reveal.

    For power-of-two domains the result stays inside the domain; otherwise
    the XOR may exceed it, in which case no lotto ticket can match and the
    round terminates without a winner (documented behavior).
    """
    return crypto.hash_to_domain(root_aggregate, domain) ^ crypto.hash_to_domain(reveal, domain)


def ranking_key(number: int, kid: Kid, seq: int) -> tuple[int, int]:
    """Sort key for the classic mode: XOR distance of the number's leaf
    projection to the player, ties broken by number XOR sequence."""
    target = kid_from_int(number, kid.width)
    return (xor_distance(target, kid), number ^ seq)


def order_players(number: int, players: list[tuple[Kid, int]]) -> list[Kid]:
    """All players ordered by closeness to the winning number (classic mode)."""
    return [kid for kid, _ in sorted(players, key=lambda p: ranking_key(number, p[0], p[1]))]


@dataclass(frozen=True)
class Claim:
    """A winner's participation proof: the container chain, plus the ticket
    opening in lotto mode."""

    pk: bytes
    token: bytes
    seq: int
    chain: tuple[ConfirmedContainer, ...]
    ticket: Ticket | None = None
    random_value: bytes | None = None
    number: int | None = None

    def to_json(self) -> dict:
        out = {
            "pk": self.pk.hex(),
            "token": self.token.hex(),
            "seq": self.seq,
            "chain": [c.to_json() for c in self.chain],
        }
        if self.ticket is not None:
            out["ticket"] = self.ticket.to_json()
            out["random_value"] = self.random_value.hex()
            out["number"] = self.number
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Claim":
        return cls(
            pk=bytes.fromhex(obj["pk"]),
            token=bytes.fromhex(obj["token"]),
            seq=obj["seq"],
            chain=tuple(ConfirmedContainer.from_json(c) for c in obj["chain"]),
            ticket=Ticket.from_json(obj["ticket"]) if "ticket" in obj else None,
            random_value=bytes.fromhex(obj["random_value"]) if "random_value" in obj else None,
            number=obj.get("number"),
        )


def process_claim(
    claim: Claim,
    record: PlayerRecord | None,
    announcement: WinnerAnnouncement,
    authority_pk: bytes,
    sig_threshold: int,
    lotto_domain: int,
    expected_root_hash: bytes | None = None,
) -> tuple[bool, str]:
    """Authority-side claim check; returns (accepted, reason)."""
    if record is None:
        return False, "unknown sequence number"
    if record.revoked:
        return False, "claim rights revoked for proven misbehavior"
    if claim.pk != record.pk or claim.token != record.token:
        return False, "claimant key material does not match the sale record"
    if not crypto.verify_token(authority_pk, claim.pk, claim.token):
        return False, "authorization token invalid"
    kid = derive_kid(claim.token, record.kid.width)
    if kid != record.kid:
        return False, "identifier mismatch"

    failures = chain_failures(
        list(claim.chain), kid, authority_pk, sig_threshold, root_hash=expected_root_hash
    )
    if failures:
        return False, f"container chain invalid: {failures[0]}"
    if claim.chain[-1].container.aggregate != announcement.root_aggregate:
        return False, "chain root aggregate differs from the announcement"

    if announcement.mode is Mode.CL:
        if kid not in announcement.winner_kids:
            return False, "claimant is not on the published winner list"
    else:
        if claim.ticket is None or claim.random_value is None or claim.number is None:
            return False, "lotto claim must open the ticket"
        if claim.ticket.seq != claim.seq:
            return False, "ticket sequence number mismatch"
        if claim.number != announcement.winning_number:
            return False, "chosen number does not match the winning number"
        if not verify_lotto_ticket(claim.ticket, claim.random_value, claim.number, lotto_domain):
            return False, "ticket commitment does not open correctly"
        if claim.chain[0].container.aggregate != initial_aggregate(claim.ticket):
            return False, "leaf aggregate is not the hash of the opened ticket"
    return True, "ok"


@dataclass
class VerificationReport:
    """One player's post-announcement checks; failures are entries, not errors."""

    commitment_ok: bool
    winning_number_ok: bool
    root_agreement_ok: bool
    participation_ok: bool
    mode_check_ok: bool  # CL: winner ordering; LO: ticket openings
    completeness_ok: bool
    details: list[str] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return (
            self.commitment_ok
            and self.winning_number_ok
            and self.root_agreement_ok
            and self.participation_ok
            and self.mode_check_ok
            and self.completeness_ok
        )

    def to_json(self) -> dict:
        return {
            "commitment_ok": self.commitment_ok,
            "winning_number_ok": self.winning_number_ok,
            "root_agreement_ok": self.root_agreement_ok,
            "participation_ok": self.participation_ok,
            "mode_check_ok": self.mode_check_ok,
            "completeness_ok": self.completeness_ok,
            "all_ok": self.all_ok,
            "details": list(self.details),
        }


def verify_outcome(
    *,
    params: LotteryParams,
    announcement: WinnerAnnouncement,
    published_claims: list[tuple[Claim, bool]],
    published_count: int,
    own_kid: Kid | None,
    own_seq: int | None,
    own_containers: dict[int, AggregateContainer],
    own_root: AggregateContainer | None,
) -> VerificationReport:
    """Re-run the public checks from one player's point of view.

    `published_claims` pairs each published claim with the authority's
    accept decision; only accepted claims are held against the player's own
    containers.  `own_containers` maps depth to the container this player
    computed for its subtree at that depth.
    """
    details: list[str] = []

    commitment_ok = crypto.hash_bytes(crypto.hash_bytes(announcement.reveal)) == params.commitment
    if not commitment_ok:
        details.append("revealed secret does not match the published commitment")

    expected = winning_number(
        announcement.root_aggregate, announcement.reveal, params.number_domain()
    )
    winning_number_ok = expected == announcement.winning_number
    if not winning_number_ok:
        details.append("published winning number does not recompute")

    root_agreement_ok = (
        own_root is not None and own_root.aggregate == announcement.root_aggregate
    )
    if not root_agreement_ok:
        details.append("own root aggregate differs from the announcement")

    participation_ok = True
    for claim, accepted in published_claims:
        if not accepted:
            continue
        claim_kid = derive_kid(claim.token, params.bits)
        if chain_failures(list(claim.chain), claim_kid, params.authority_pk, params.sig_threshold):
            participation_ok = False
            details.append(f"published chain for seq {claim.seq} does not verify")
            continue
        if own_kid is None:
            continue
        by_depth = {c.container.depth: c.container for c in claim.chain}
        for depth, own in own_containers.items():
            other = by_depth.get(depth)
            if other is None or other.subtree != own.subtree:
                continue
            if other.hash != own.hash:
                participation_ok = False
                details.append(
                    f"winner container at depth {depth} differs from own computation"
                )

    if announcement.mode is Mode.CL:
        mode_check_ok = _check_cl_ordering(announcement, own_kid, own_seq, params.bits, details)
    else:
        mode_check_ok = True
        for claim, accepted in published_claims:
            if not accepted or claim.ticket is None:
                continue
            opens = verify_lotto_ticket(
                claim.ticket, claim.random_value, claim.number, params.lotto_domain
            ) and claim.number == announcement.winning_number
            leaf_ok = claim.chain and claim.chain[0].container.aggregate == initial_aggregate(
                claim.ticket
            )
            if not (opens and leaf_ok):
                mode_check_ok = False
                details.append(f"published lotto ticket for seq {claim.seq} does not verify")

    completeness_ok = own_root is not None and own_root.count == published_count
    if not completeness_ok:
        details.append(
            f"root counter {own_root.count if own_root else None} "
            f"differs from published ticket count {published_count}"
        )

    return VerificationReport(
        commitment_ok=commitment_ok,
        winning_number_ok=winning_number_ok,
        root_agreement_ok=root_agreement_ok,
        participation_ok=participation_ok,
        mode_check_ok=mode_check_ok,
        completeness_ok=completeness_ok,
        details=details,
    )


def _check_cl_ordering(
    announcement: WinnerAnnouncement,
    own_kid: Kid | None,
    own_seq: int | None,
    bits: int,
    details: list[str],
) -> bool:
    """The published list must be sorted by the ranking metric, and the
    verifying player must not rank strictly ahead of a listed winner while
    being absent from the list."""
    target = kid_from_int(announcement.winning_number, bits)
    distances = [xor_distance(target, kid) for kid in announcement.winner_kids]
    if any(a > b for a, b in zip(distances, distances[1:])):
        details.append("published winners are not ordered by distance")
        return False
    if own_kid is None or own_seq is None or not announcement.winner_kids:
        return True
    if own_kid in announcement.winner_kids:
        return True
    own_distance = xor_distance(target, own_kid)
    if own_distance < distances[-1]:
        details.append("own position ranks ahead of a published winner")
        return False
    return True
