"""The authority: ticket sales, tracker bootstrap, winner identification,
claim processing, and misbehavior bookkeeping.

The authority handles the purchase and the reward, but not the random
process itself: it learns the root aggregate by sampling players and only
proceeds once a large majority of the sample agrees.  Dishonest-authority
knobs (selling after the deadline, inflating the published ticket count,
revealing a wrong secret, leaking the secret to colluders) drive the
scripted attack scenarios.
"""

from dataclasses import dataclass, field

from .. import crypto
from ..aggregation import detect_equivocation, verify_signature
from ..lottery import (
    AuthoritySecrets,
    Claim,
    LotteryParams,
    Mode,
    PlayerRecord,
    WinnerAnnouncement,
    order_players,
    process_claim,
    winning_number,
)
from ..overlay import Contact, derive_kid
from . import messages as m
from .core import TIMEOUT, Process, all_of
from .node import Node

__all__ = ["Authority"]


@dataclass
class AuthorityMisconduct:
    """Scripted deviations for adversarial scenarios; all off by default."""

    sell_after_deadline: bool = False
    inflate_count: int = 0
    wrong_reveal: bool = False
    leak_reveal: bool = False


class Authority(Node):
    def __init__(
        self,
        sim,
        net,
        board,
        log,
        address: int,
        params: LotteryParams,
        secrets: AuthoritySecrets,
        config,
        timeline,
        sched_rng,
        misconduct: AuthorityMisconduct | None = None,
    ):
        super().__init__(sim, net, board, log, address, "authority", params.authority_pk)
        self.keypair = secrets.keypair
        self.params = params
        self.secrets = secrets
        self.config = config
        self.timeline = timeline
        self.sched_rng = sched_rng
        self.misconduct = misconduct or AuthorityMisconduct()
        self.records: dict[int, PlayerRecord] = {}
        self.by_pk: dict[bytes, PlayerRecord] = {}
        self.addresses: dict[int, int] = {}
        self.published_count: int | None = None
        self.announcement: WinnerAnnouncement | None = None
        self.sampled_root = None
        self.claims: list[dict] = []
        self.proofs: list = []
        self.aborted: str | None = None

    def start(self) -> None:
        self.board.post("setup_params", self.params.to_json())
        self.sim.schedule(self.timeline.deadline, self.publish_ticket_count)
        self.sim.schedule(self.timeline.sample_at, lambda: Process(self.sim, self.identify_winners()))

    def accepts_tokenless(self, env) -> bool:
        return True  # buyers have no token yet; the authority knows them by key

    # ------------------------------------------------------------------
    # sales and tracker
    # ------------------------------------------------------------------

    def handle_request(self, env) -> None:
        handler = getattr(self, "handle_" + env.message.kind, None)
        if handler is not None:
            handler(env)

    def handle_buy(self, env) -> None:
        pk = env.message.pk
        late = self.sim.now > self.params.purchase_deadline
        if late and not self.misconduct.sell_after_deadline:
            self.reply(env, m.BuyReply(seq=0, token=b"", accepted=False, reason="deadline passed"))
            return
        if pk in self.by_pk:
            self.log.emit(self.name, "duplicate_pk", pk=pk.hex()[:16])
        seq = len(self.records) + 1
        token = crypto.issue_token(self.keypair, pk)
        record = PlayerRecord(
            seq=seq,
            pk=pk,
            token=token,
            kid=derive_kid(token, self.params.bits),
            sold_at=self.sim.now,
            late=late,
        )
        self.records[seq] = record
        self.by_pk[pk] = record
        self.addresses[seq] = env.sender
        if late:
            self.log.emit(self.name, "late_sale", seq=seq)
        self.reply(env, m.BuyReply(seq=seq, token=token))

    def handle_tracker(self, env) -> None:
        candidates = [
            seq for seq, rec in self.records.items() if self.addresses.get(seq) != env.sender
        ]
        if not candidates:
            self.reply(env, m.TrackerReply(contact=None))
            return
        seq = candidates[self.sched_rng.randrange(len(candidates))]
        rec = self.records[seq]
        contact = Contact(rec.kid, rec.pk, rec.token, self.addresses[seq])
        self.reply(env, m.TrackerReply(contact=contact))

    # ------------------------------------------------------------------
    # the published ticket count and the secret leak
    # ------------------------------------------------------------------

    def publish_ticket_count(self) -> None:
        count = len(self.records) + self.misconduct.inflate_count
        self.published_count = count
        self.board.post("ticket_count", {"count": count})
        if self.misconduct.leak_reveal:
            self.log.emit(self.name, "reveal_leaked", to="colluders")

    # ------------------------------------------------------------------
    # winner identification
    # ------------------------------------------------------------------

    def identify_winners(self):
        sample_size = min(self.config.sample_size, len(self.records))
        if sample_size == 0:
            self.aborted = "no players"
            self.board.post("no_consensus", {"reason": self.aborted})
            return
        seqs = sorted(self.records)
        sample = self.sched_rng.sample(seqs, sample_size)
        replies = yield all_of(
            [
                self.ask(self.addresses[seq], m.RootQuery(), self.config.timeout_ms)
                for seq in sample
            ]
        )
        tallies: dict[bytes, int] = {}
        evidence: dict[bytes, object] = {}
        for reply in replies:
            if reply is TIMEOUT or reply.message.kind != "root_reply" or reply.message.root is None:
                continue
            cc = reply.message.root
            h = cc.container.hash
            tallies[h] = tallies.get(h, 0) + 1
            if h not in evidence or len(cc.sigs_on_hash) > len(evidence[h].sigs_on_hash):
                evidence[h] = cc
        self.log.emit(
            self.name,
            "root_sample",
            sample=sample_size,
            tallies={h.hex()[:16]: n for h, n in sorted(tallies.items())},
        )
        if not tallies:
            self.aborted = "no root responses"
            self.board.post("no_consensus", {"reason": self.aborted})
            return
        top = min(tallies, key=lambda h: (-tallies[h], h))
        if tallies[top] / sample_size < self.config.sample_majority:
            self.aborted = "root majority below threshold"
            self.board.post(
                "no_consensus",
                {"reason": self.aborted, "top_fraction": tallies[top] / sample_size},
            )
            return
        self.sampled_root = evidence[top]
        self.announce(self.sampled_root.container)

    def announce(self, root) -> None:
        reveal = self.secrets.reveal
        if self.misconduct.wrong_reveal:
            reveal = crypto.hash_bytes(self.secrets.reveal + b"wrong")
        number = winning_number(root.aggregate, reveal, self.params.number_domain())
        winner_kids = ()
        if self.params.mode is Mode.CL:
            players = [(rec.kid, rec.seq) for rec in self.records.values()]
            ordered = order_players(number, players)
            winner_kids = tuple(ordered[: self.params.reward_count])
        self.announcement = WinnerAnnouncement(
            mode=self.params.mode,
            root_aggregate=root.aggregate,
            reveal=reveal,
            winning_number=number,
            winner_kids=winner_kids,
        )
        self.board.post("announcement", self.announcement.to_json())
        self.sim.schedule(self.config.claim_window_ms, self.publish_claims)

    # ------------------------------------------------------------------
    # claims
    # ------------------------------------------------------------------

    def handle_claim(self, env) -> None:
        claim: Claim = env.message.claim
        if self.announcement is None:
            self.reply(env, m.ClaimReply(accepted=False, reason="no announcement yet"))
            return
        record = self.records.get(claim.seq)
        expected_root = self.sampled_root.container.hash if self.sampled_root else None
        accepted, reason = process_claim(
            claim,
            record,
            self.announcement,
            self.params.authority_pk,
            self.params.sig_threshold,
            self.params.lotto_domain,
            expected_root_hash=expected_root,
        )
        if accepted and record is not None:
            record.claimed = True
        self.claims.append({"claim": claim.to_json(), "accepted": accepted, "reason": reason})
        self.log.emit(self.name, "claim_processed", seq=claim.seq, accepted=accepted, reason=reason)
        self.reply(env, m.ClaimReply(accepted=accepted, reason=reason))

    def publish_claims(self) -> None:
        self.board.post("claims_published", {"claims": self.claims})

    # ------------------------------------------------------------------
    # misbehavior
    # ------------------------------------------------------------------

    def handle_misbehavior(self, env) -> None:
        proof = env.message.proof
        check = detect_equivocation(proof.first, proof.second, self.params.sig_threshold)
        if check is None:
            self.misbehavior_observed += 1
            return
        if not (
            verify_signature(proof.first, self.params.authority_pk)
            and verify_signature(proof.second, self.params.authority_pk)
        ):
            self.misbehavior_observed += 1
            return
        record = self.by_pk.get(proof.first.signer_pk)
        accused_seq = record.seq if record else None
        if record is not None and check.certain:
            record.revoked = True
        self.proofs.append(
            {"proof": proof, "accused_seq": accused_seq, "certain": check.certain}
        )
        self.log.emit(
            self.name,
            "misbehavior_recorded",
            accused_seq=accused_seq,
            certain=check.certain,
            reporter=env.sender,
        )
