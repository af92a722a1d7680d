"""The player state machine: join, aggregate, claim, verify.

One `Player` is one simulated participant.  Its life cycle is a single
generator process: buy a ticket, join the overlay, freeze a membership
snapshot at the purchase deadline, then walk the tree one epoch per level,
pulling the sibling container, combining, and gathering endorsement
signatures.  Consecutive levels with an empty sibling are computed eagerly
after a combine and endorsed in one batched exchange, so traffic grows with
the populated depths (about log n) rather than with the full tree height.

Request handlers answer peers from already-computed state; adversarial
variants override narrow hooks (see strategies.py).
"""

from dataclasses import dataclass, field

from .. import crypto
from ..aggregation import (
    AggregateContainer,
    ConfirmedContainer,
    ContainerSignature,
    SignatureLog,
    combine_containers,
    confirmation_failures,
    lift_container,
    majority_select,
    make_leaf_container,
    sign_container,
    try_confirm,
    verify_signature,
)
from ..lottery import (
    Claim,
    LotteryParams,
    Mode,
    Ticket,
    VerificationReport,
    WinnerAnnouncement,
    build_ticket,
    initial_aggregate,
    verify_outcome,
)
from ..overlay import Contact, Kid, OverlayError, RoutingTable, SubtreeId, derive_kid, sibling_subtree
from . import messages as m
from .core import TIMEOUT, Process, all_of
from .node import Node

__all__ = ["Player", "MembershipSnapshot"]

LOOKUP_ALPHA = 3
NOT_READY_DELAY = 150
GATHER_RETRY_DELAY = 200
BUY_RETRIES = 3


class MembershipSnapshot:
    """The frozen start-of-aggregation view of the overlay membership.

    Signatures from players outside the snapshot are invalid unless their
    bucket was already full (then the bucket is not exhaustive and unknown
    members may legitimately exist).
    """

    def __init__(self, table: RoutingTable):
        self.own_kid = table.own_kid
        self.k = table.k
        self.buckets: dict[int, list[Contact]] = {
            d: list(table.buckets[d]) for d in sorted(table.buckets)
        }
        self._kids = {c.kid for bucket in self.buckets.values() for c in bucket}

    def bucket(self, depth: int) -> list[Contact]:
        return self.buckets.get(depth, [])

    def members_below(self, depth: int) -> list[Contact]:
        """Snapshot members of the player's own subtree at `depth`."""
        out = []
        for d in sorted(self.buckets):
            if d > depth:
                out.extend(self.buckets[d])
        return out

    def reachable(self, depth: int) -> int:
        return 1 + len(self.members_below(depth))

    def signer_allowed(self, kid: Kid) -> bool:
        if kid == self.own_kid:
            return True
        dist = kid.value ^ self.own_kid.value
        depth = self.own_kid.width - dist.bit_length() + 1
        bucket = self.buckets.get(depth, [])
        return kid in self._kids or len(bucket) >= self.k


@dataclass
class LevelOutcome:
    selected: ConfirmedContainer | None = None  # a diverging majority pick, if any
    quorum: bool = False


@dataclass
class PlayerResult:
    root_hash: bytes | None = None
    root_count: int | None = None
    report: VerificationReport | None = None
    excluded_subtrees: list[str] = field(default_factory=list)
    diverged: bool = False
    claim_sent: bool = False
    claim_accepted: bool | None = None


class Player(Node):
    strategy = "honest"

    def __init__(
        self,
        sim,
        net,
        board,
        log,
        address: int,
        index: int,
        key_seed: bytes,
        params: LotteryParams,
        config,
        timeline,
        authority_address: int,
        secret_rng,
        sched_rng,
        join_time: int,
    ):
        super().__init__(sim, net, board, log, address, f"player{index}", params.authority_pk)
        self.index = index
        self.keypair = crypto.keygen(key_seed)
        self.params = params
        self.config = config
        self.timeline = timeline
        self.authority_address = authority_address
        self.secret_rng = secret_rng
        self.sched_rng = sched_rng
        self.join_time = join_time
        self.bits = params.bits

        self.seq: int | None = None
        self.kid: Kid | None = None
        self.table: RoutingTable | None = None
        self.snapshot: MembershipSnapshot | None = None
        self.ticket: Ticket | None = None
        self.ticket_secret: bytes | None = None
        self.ticket_number: int | None = None

        # per-depth aggregation state
        self.containers: dict[int, AggregateContainer] = {}
        self.confirmed: dict[int, ConfirmedContainer] = {}
        self.own_sigs: dict[int, ContainerSignature] = {}
        self.provenance: dict[int, str] = {}
        self.pulled: dict[int, ConfirmedContainer] = {}
        self.sig_collections: dict[int, dict[bytes, ContainerSignature]] = {}
        self.lineage: dict[int, AggregateContainer] = {}
        self.lineage_confirmed: dict[int, ConfirmedContainer] = {}
        self.adopted_depths: set[int] = set()

        self.sig_log = SignatureLog(params.sig_threshold)
        self.proofs: list = []
        self.result = PlayerResult()
        self._reported_accusations: set[bytes] = set()

        board.subscribe(self.on_board)

    def start(self) -> None:
        self.sim.schedule(max(0, self.join_time - self.sim.now), lambda: Process(self.sim, self.run()))

    # ------------------------------------------------------------------
    # main process
    # ------------------------------------------------------------------

    def run(self):
        ok = yield from self.purchase()
        if not ok:
            return
        yield from self.join_overlay()
        for _ in range(self.config.warmup_lookups):
            target = Kid(self.sched_rng.getrandbits(self.bits), self.bits)
            yield from self.lookup(target)
        self.prepare_ticket()
        yield self.sim.sleep_until(self.timeline.deadline)
        yield from self.final_refresh()
        self.take_snapshot()
        yield self.sim.sleep_until(self.timeline.aggregation_start)
        if not self.participates():
            return
        self.build_leaf_chain()
        yield from self.run_aggregation()
        self.record_root()

    def participates(self) -> bool:
        return True

    # ------------------------------------------------------------------
    # purchase and overlay join
    # ------------------------------------------------------------------

    def purchase(self):
        for _ in range(BUY_RETRIES):
            reply = yield self.ask(self.authority_address, m.Buy(self.keypair.pk), self.config.timeout_ms)
            if reply is TIMEOUT:
                continue
            msg = reply.message
            if not msg.accepted:
                self.log.emit(self.name, "purchase_refused", reason=msg.reason)
                return False
            self.seq = msg.seq
            self.token = msg.token
            self.kid = derive_kid(self.token, self.bits)
            self.table = RoutingTable(self.kid, self.config.bucket_size, self.authority_pk)
            break
        else:
            self.log.emit(self.name, "purchase_refused", reason="authority unreachable")
            return False
        reply = yield self.ask(self.authority_address, m.TrackerQuery(), self.config.timeout_ms)
        if reply is not TIMEOUT and reply.message.contact is not None:
            self._try_insert(reply.message.contact)
        return True

    def _try_insert(self, contact: Contact) -> None:
        try:
            self.table.insert(contact)
        except OverlayError:
            self.misbehavior_observed += 1

    def note_sender(self, env) -> None:
        if self.table is None or not env.sender_token:
            return
        try:
            kid = derive_kid(env.sender_token, self.bits)
            if kid != self.kid:
                self._try_insert(Contact(kid, env.sender_pk, env.sender_token, env.sender))
        except OverlayError:
            self.misbehavior_observed += 1

    def join_overlay(self):
        if len(self.table) == 0:
            return
        yield from self.lookup(self.kid)

    def lookup(self, target: Kid):
        """Iterative lookup: query the closest unqueried contacts in rounds.

        Returns (contacts sorted by distance to target, timed_out flag).
        Learned contacts are fed into the routing table as a side effect.
        """
        shortlist: dict[Kid, Contact] = {c.kid: c for c in self.table.closest(target, self.config.bucket_size)}
        queried: set[int] = set()
        timed_out = False
        while True:
            ranked = sorted(
                shortlist.values(), key=lambda c: ((c.kid.value ^ target.value), c.kid.value)
            )[: self.config.bucket_size]
            batch = [c for c in ranked if c.address not in queried][:LOOKUP_ALPHA]
            if not batch:
                return ranked, timed_out
            queried.update(c.address for c in batch)
            replies = yield all_of(
                [self.ask(c.address, m.FindNode(target), self.config.timeout_ms) for c in batch]
            )
            for reply in replies:
                if reply is TIMEOUT:
                    timed_out = True
                    continue
                if reply.message.kind != "nodes":
                    continue
                for contact in reply.message.contacts:
                    if contact.kid == self.kid or contact.kid in shortlist:
                        continue
                    try:
                        if derive_kid(contact.token, self.bits) != contact.kid:
                            raise OverlayError("kid mismatch")
                        if not crypto.verify_token(self.authority_pk, contact.pk, contact.token):
                            raise OverlayError("bad token")
                    except (OverlayError, crypto.CryptoError):
                        self.misbehavior_observed += 1
                        continue
                    self._try_insert(contact)
                    shortlist[contact.kid] = contact

    def subtree_is_empty(self, subtree: SubtreeId):
        """Best-effort emptiness probe: lookup a target inside the subtree and
        see whether any discovered contact falls inside it."""
        target = subtree.random_kid_within(self.sched_rng)
        contacts, timed_out = yield from self.lookup(target)
        occupied = any(subtree.contains(c.kid) for c in contacts)
        return (not occupied), timed_out

    def final_refresh(self):
        """Re-probe the neighborhood just before the snapshot.

        A last own-identifier lookup captures late arrivals close by; then
        every still-empty bucket not deeper than the nearest neighbor gets
        one targeted probe, so believed-empty always means globally empty in
        converged fault-free networks.
        """
        if len(self.table) == 0:
            return
        yield from self.lookup(self.kid)
        probed: set[int] = set()
        while True:
            nearest = self.table.closest(self.kid, 1)
            if not nearest:
                return
            deepest = self.table.bucket_depth(nearest[0].kid)
            todo = [
                d
                for d in range(1, deepest + 1)
                if not self.table.buckets.get(d) and d not in probed
            ]
            if not todo:
                return
            for d in todo:
                probed.add(d)
                yield from self.subtree_is_empty(sibling_subtree(self.kid, d))

    def take_snapshot(self) -> None:
        self.snapshot = MembershipSnapshot(self.table)
        self.log.emit(
            self.name,
            "snapshot",
            contacts=len(self.table),
            nonempty_depths=sorted(self.snapshot.buckets),
        )

    # ------------------------------------------------------------------
    # ticket and leaf chain
    # ------------------------------------------------------------------

    def prepare_ticket(self) -> None:
        self.ticket_secret = self.secret_rng.randbytes(32)
        if self.params.mode is Mode.LO:
            self.ticket_number = self.secret_rng.randrange(self.params.lotto_domain)
        self.ticket = build_ticket(
            self.params.mode,
            self.seq,
            self.ticket_secret,
            number=self.ticket_number,
            lotto_domain=self.params.lotto_domain,
        )

    def sign_level(self, container: AggregateContainer) -> ContainerSignature | None:
        """Endorse a freshly computed container.

        Never re-signs a different hash for the same (depth, count) at small
        counts: that is exactly the pattern a misbehavior proof pins down
        with certainty, so an honest player endorses at most one version
        there and lets corrections proceed unsigned.
        """
        prev = self.own_sigs.get(container.depth)
        if prev is not None and prev.container_hash != container.hash:
            if container.count <= self.params.sig_threshold:
                return None
        sig = sign_container(self.keypair, self.token, container)
        self.own_sigs[container.depth] = sig
        self.sig_log.record(sig)
        return sig

    def install_container(
        self,
        container: AggregateContainer,
        provenance: str,
        adopted: bool = False,
    ) -> None:
        depth = container.depth
        self.containers[depth] = container
        self.provenance[depth] = provenance
        self.confirmed.pop(depth, None)
        self.sig_collections[depth] = {}
        if adopted:
            self.adopted_depths.add(depth)
            return
        self.adopted_depths.discard(depth)
        self.lineage[depth] = container
        self.lineage_confirmed.pop(depth, None)
        sig = self.sign_level(container)
        if sig is not None:
            self.sig_collections[depth][self.keypair.pk] = sig

    def build_leaf_chain(self) -> None:
        """The leaf container, then lifts down to the deepest populated depth.

        Below the first combine the player is alone in its subtree, so its
        own signature confirms every level outright."""
        aggregate = initial_aggregate(self.ticket)
        leaf = make_leaf_container(aggregate, self.kid)
        self.install_container(leaf, "leaf")
        self._self_confirm(leaf)
        deepest = max(self.snapshot.buckets, default=0)
        current = leaf
        while current.depth > deepest:
            lifted = lift_container(current)
            self.install_container(lifted, "lift")
            self._self_confirm(lifted)
            current = lifted

    def _self_confirm(self, container: AggregateContainer) -> None:
        evidence = ()
        if container.children:
            child_sig = self.own_sigs.get(container.depth + 1)
            evidence = (child_sig,) if child_sig else ()
        cc = try_confirm(
            container,
            list(self.sig_collections.get(container.depth, {}).values()),
            evidence,
            self.authority_pk,
            self.params.sig_threshold,
            reachable=1,
            signer_allowed=self.snapshot.signer_allowed,
        )
        if cc is not None:
            self.confirmed[container.depth] = cc
            if container.depth not in self.adopted_depths:
                self.lineage_confirmed[container.depth] = cc

    # ------------------------------------------------------------------
    # aggregation epochs
    # ------------------------------------------------------------------

    def combine_depths(self) -> list[int]:
        return sorted(self.snapshot.buckets, reverse=True)

    def run_aggregation(self):
        depths = self.combine_depths()
        for i, d in enumerate(depths):
            next_d = depths[i + 1] if i + 1 < len(depths) else 0
            yield self.sim.sleep_until(self.timeline.epoch_open(d))
            deadline = self.timeline.epoch_deadline(d)
            yield from self.resolve_level(d, next_d, deadline, self.config.max_correction_depth)
        if 0 in self.containers:
            yield from self.gather_root_extras()

    def resolve_level(self, d: int, next_d: int, deadline: int, budget: int):
        """One epoch: pull the sibling container, combine, endorse, vote.

        A diverging majority triggers the correction rule: re-pull the
        sibling when the disagreement sits on the sibling side, otherwise
        repeat the deeper epoch's pull; bounded by `budget`."""
        avoid: set[int] = set()
        sib_cc = yield from self.pull_sibling(d, deadline, avoid)
        while True:
            self._install_level(d, next_d, sib_cc)
            outcome = yield from self.gather_signatures(d, next_d, deadline, sib_cc)
            if outcome.selected is None:
                return
            selected = outcome.selected
            if budget <= 0 or self.sim.now >= deadline:
                self._consider_adoption(d, next_d, selected)
                return
            budget -= 1
            own_child = self.containers[d]
            if selected.container.has_child(own_child.hash, own_child.count):
                # disagreement on the sibling side: repeat the pull elsewhere
                if sib_cc is not None:
                    avoid.update(
                        c.address for c in self.snapshot.bucket(d)
                        if any(s.signer_pk == c.pk for s in sib_cc.sigs_on_hash)
                    )
                self.log.emit(self.name, "correction_repull", depth=d)
                new_sib = yield from self.pull_sibling(d, deadline, avoid)
                if new_sib is None or (sib_cc and new_sib.container.hash == sib_cc.container.hash):
                    self._consider_adoption(d, next_d, selected)
                    return
                sib_cc = new_sib
            else:
                # own side out-voted: repeat the previous (deeper) epoch
                prev_d = self._previous_combine_depth(d)
                self.log.emit(self.name, "correction_deeper", depth=d, previous=prev_d)
                if prev_d is None:
                    self._consider_adoption(d, next_d, selected)
                    return
                prev_avoid: set[int] = set()
                if prev_d in self.pulled:
                    prev_avoid = {
                        c.address for c in self.snapshot.bucket(prev_d)
                        if any(s.signer_pk == c.pk for s in self.pulled[prev_d].sigs_on_hash)
                    }
                redone = yield from self.pull_sibling(prev_d, deadline, prev_avoid)
                if redone is None:
                    self._consider_adoption(d, next_d, selected)
                    return
                self._install_level(prev_d, d, redone)
                sib_cc = self.pulled.get(d)

    def _previous_combine_depth(self, d: int) -> int | None:
        deeper = [x for x in self.combine_depths() if x > d]
        return min(deeper) if deeper else None

    def _install_level(self, d: int, next_d: int, sib_cc: ConfirmedContainer | None) -> None:
        """Compute the parent for the epoch at depth d, then the lift chain
        down to the next populated depth, signing each level."""
        own = self.containers[d]
        if sib_cc is None:
            parent = lift_container(own)
            provenance = "lift_excluded"
            self.pulled.pop(d, None)
        else:
            parent = combine_containers(own, sib_cc.container)
            provenance = "combine"
            self.pulled[d] = sib_cc
        self.install_container(parent, provenance)
        current = parent
        while current.depth > next_d:
            lifted = lift_container(current)
            self.install_container(lifted, "lift")
            current = lifted

    # ------------------------------------------------------------------
    # pulling
    # ------------------------------------------------------------------

    def pull_targets(self, d: int) -> list[Contact]:
        return self.snapshot.bucket(d)

    def pull_sibling(self, d: int, deadline: int, avoid: set[int]):
        """Fetch the sibling subtree's confirmed container from a random member.

        Distinct peers are tried up to the attempt bound; a peer still
        working answers not_ready and is retried briefly.  A children
        fallback is recombined locally and endorsed via a follow-up
        signature request.  Returns None when the subtree is unreachable,
        which the caller treats as empty (the timeout rule)."""
        targets = [c for c in self.pull_targets(d) if c.address not in avoid]
        if not targets:
            targets = self.pull_targets(d)
        if not targets:
            return None
        order = list(targets)
        self.sched_rng.shuffle(order)
        subtree = sibling_subtree(self.kid, d)
        attempts = 0
        for contact in order:
            if attempts >= self.config.max_pull_attempts or self.sim.now >= deadline:
                break
            attempts += 1
            for _ in range(3):  # not_ready retries against one peer
                reply = yield self.ask(contact.address, m.Pull(subtree), self.config.timeout_ms)
                if reply is TIMEOUT:
                    break
                msg = reply.message
                if msg.kind != "pull_reply":
                    break
                if msg.status == "not_ready":
                    yield self.sim.sleep(NOT_READY_DELAY)
                    continue
                if msg.status == "ok" and msg.confirmed is not None:
                    cc = msg.confirmed
                    if self._validate_pulled(cc, subtree):
                        return cc
                    break
                if msg.status == "children" and msg.children:
                    cc = yield from self._recombine_children(subtree, msg.children, contact, deadline)
                    if cc is not None:
                        return cc
                    break
                break
        self.result.excluded_subtrees.append(str(subtree))
        self.log.emit(self.name, "subtree_excluded", subtree=str(subtree), depth=d)
        return None

    def _validate_pulled(self, cc: ConfirmedContainer, subtree: SubtreeId) -> bool:
        if cc.container.subtree != subtree:
            self.misbehavior_observed += 1
            return False
        failures = confirmation_failures(
            cc,
            self.authority_pk,
            self.params.sig_threshold,
            reachable=cc.container.count,
            signer_allowed=self.snapshot.signer_allowed,
        )
        if failures:
            self.misbehavior_observed += 1
            self.log.emit(self.name, "pull_rejected", subtree=str(subtree), reason=failures[0])
            return False
        for sig in cc.sigs_on_hash:
            self._note_signature(sig)
        return True

    def _recombine_children(self, subtree: SubtreeId, children, provider: Contact, deadline: int):
        """Rebuild the sibling container from its confirmed children, then ask
        subtree members to endorse the recomputed hash."""
        valid = []
        for cc in children:
            if cc.container.subtree.parent() != subtree:
                return None
            if confirmation_failures(
                cc,
                self.authority_pk,
                self.params.sig_threshold,
                reachable=cc.container.count,
                signer_allowed=self.snapshot.signer_allowed,
            ):
                return None
            valid.append(cc)
        if len(valid) == 1:
            container = lift_container(valid[0].container)
        elif len(valid) == 2:
            if not valid[0].container.subtree.is_sibling_of(valid[1].container.subtree):
                return None
            container = combine_containers(valid[0].container, valid[1].container)
        else:
            return None
        item = (container.hash, container.depth, container.count)
        sigs: dict[bytes, ContainerSignature] = {}
        reply = yield self.ask(
            provider.address, m.SignRequest(items=(item,)), self.config.timeout_ms
        )
        if reply is not TIMEOUT and reply.message.kind == "sign_reply":
            for sig in reply.message.sigs:
                if self._accept_signature(sig, item, container.subtree):
                    sigs[sig.signer_pk] = sig
        evidence = []
        for cc in valid:
            own = next(iter(cc.sigs_on_hash), None)
            if own is not None:
                evidence.append(own)
        return ConfirmedContainer(
            container=container,
            sigs_on_hash=tuple(sigs.values()),
            child_evidence=tuple(evidence),
        )

    # ------------------------------------------------------------------
    # signature gathering and majority voting
    # ------------------------------------------------------------------

    def gather_signatures(self, d: int, next_d: int, deadline: int, sib_cc):
        """Collect endorsements for the new parent and its lift chain.

        One batched request covers every level between two populated depths;
        all of them share the same member pool.  Diverging replies feed a
        majority vote on distinct signers."""
        parent_depth = d - 1
        depths = list(range(parent_depth, next_d - 1, -1))
        pool = self.snapshot.members_below(parent_depth)
        need = min(self.params.sig_threshold, self.snapshot.reachable(parent_depth))
        divergent: dict[bytes, ConfirmedContainer] = {}

        candidates = self._gather_candidates(d, pool, sib_cc)
        answered: set[int] = set()
        idx = 0
        rounds = 0
        while self.sim.now < deadline and rounds < 50:
            rounds += 1
            have = min(len(self.sig_collections.get(e, {})) for e in depths)
            if have >= need:
                break
            batch = []
            while idx < len(candidates) and len(batch) < max(1, need - have):
                contact = candidates[idx]
                idx += 1
                if contact.address not in answered:
                    batch.append(contact)
            if not batch:
                # revisit peers that answered without signatures (not ready yet)
                pending = [c for c in candidates if c.address not in answered]
                if not pending:
                    break
                yield self.sim.sleep(GATHER_RETRY_DELAY)
                idx = 0
                candidates = pending
                continue
            items = tuple(
                (self.containers[e].hash, e, self.containers[e].count) for e in depths
            )
            own = tuple(s for s in (self.own_sigs.get(e) for e in depths) if s is not None)
            replies = yield all_of(
                [
                    self.ask(c.address, m.SignRequest(items=items, own_sigs=own), self.config.timeout_ms)
                    for c in batch
                ]
            )
            for contact, reply in zip(batch, replies):
                if reply is TIMEOUT or reply.message.kind != "sign_reply":
                    answered.add(contact.address)
                    continue
                got_any = False
                for sig in reply.message.sigs:
                    for e in depths:
                        item = (self.containers[e].hash, e, self.containers[e].count)
                        if (sig.container_hash, sig.depth, sig.count) == item:
                            if self._accept_signature(sig, item, self.containers[e].subtree):
                                self.sig_collections[e][sig.signer_pk] = sig
                                got_any = True
                for cc in reply.message.divergent:
                    got_any = True
                    self._note_divergent(cc, parent_depth, divergent)
                if got_any:
                    answered.add(contact.address)

        self._finalize_confirmations(d, next_d, depths, sib_cc)

        outcome = LevelOutcome(quorum=min(
            len(self.sig_collections.get(e, {})) for e in depths
        ) >= need)
        if divergent:
            counts = {self.containers[parent_depth].hash: len(self.sig_collections[parent_depth])}
            for h, cc in divergent.items():
                counts[h] = len(
                    {
                        s.signer_pk
                        for s in cc.sigs_on_hash
                        if s.container_hash == h
                    }
                )
            chosen = majority_select(counts)
            if chosen != self.containers[parent_depth].hash:
                outcome.selected = divergent[chosen]
        return outcome

    def _gather_candidates(self, d: int, pool, sib_cc) -> list[Contact]:
        sibling_half = list(self.snapshot.bucket(d))
        provider_pks = {s.signer_pk for s in sib_cc.sigs_on_hash} if sib_cc else set()
        first = [c for c in sibling_half if c.pk in provider_pks]
        rest = [c for c in pool if c not in first]
        self.sched_rng.shuffle(rest)
        # members of the sibling half go first so each populated child
        # subtree contributes a signer
        rest.sort(key=lambda c: 0 if c in sibling_half else 1)
        return first + rest

    def _accept_signature(self, sig: ContainerSignature, item, subtree: SubtreeId) -> bool:
        if (sig.container_hash, sig.depth, sig.count) != item:
            return False
        if not verify_signature(sig, self.authority_pk):
            self.misbehavior_observed += 1
            return False
        kid = sig.signer_kid(self.bits)
        if not subtree.contains(kid) or not self.snapshot.signer_allowed(kid):
            self.misbehavior_observed += 1
            return False
        self._note_signature(sig)
        return True

    def _note_signature(self, sig: ContainerSignature) -> None:
        proof = self.sig_log.record(sig)
        if proof is not None:
            self.report_misbehavior(proof)

    def _note_divergent(self, cc: ConfirmedContainer, parent_depth: int, divergent: dict) -> None:
        container = cc.container
        if container.depth != parent_depth:
            return
        if container.subtree != self.containers[parent_depth].subtree:
            return
        if container.hash == self.containers[parent_depth].hash:
            return
        for sig in cc.sigs_on_hash:
            if sig.container_hash == container.hash and verify_signature(sig, self.authority_pk):
                if container.subtree.contains(sig.signer_kid(self.bits)) and self.snapshot.signer_allowed(
                    sig.signer_kid(self.bits)
                ):
                    self._note_signature(sig)
        known = divergent.get(container.hash)
        if known is None or len(cc.sigs_on_hash) > len(known.sigs_on_hash):
            divergent[container.hash] = cc

    def _finalize_confirmations(self, d: int, next_d: int, depths, sib_cc) -> None:
        for e in depths:
            container = self.containers[e]
            evidence = []
            own_child_sig = self.own_sigs.get(e + 1)
            if own_child_sig is not None and container.has_child(
                own_child_sig.container_hash, own_child_sig.count
            ):
                evidence.append(own_child_sig)
            if e == d - 1 and sib_cc is not None:
                for sig in sib_cc.sigs_on_hash:
                    if container.has_child(sig.container_hash, sig.count):
                        evidence.append(sig)
                        break
            cc = try_confirm(
                container,
                list(self.sig_collections.get(e, {}).values()),
                evidence,
                self.authority_pk,
                self.params.sig_threshold,
                reachable=self.snapshot.reachable(e),
                signer_allowed=self.snapshot.signer_allowed,
            )
            if cc is not None:
                self.confirmed[e] = cc
                if e not in self.adopted_depths:
                    self.lineage_confirmed[e] = cc

    def _consider_adoption(self, d: int, next_d: int, selected: ConfirmedContainer) -> None:
        """Give up on out-voting the majority: adopt its container for upward
        progress if it verifies, keeping the own lineage for claims."""
        failures = confirmation_failures(
            selected,
            self.authority_pk,
            self.params.sig_threshold,
            reachable=selected.container.count,
            signer_allowed=self.snapshot.signer_allowed,
        )
        self.result.diverged = True
        if failures:
            self.log.emit(self.name, "divergence_unresolved", depth=d, reason=failures[0])
            return
        parent_depth = d - 1
        self.install_container(selected.container, "adopted", adopted=True)
        self.confirmed[parent_depth] = selected
        current = selected.container
        while current.depth > next_d:
            lifted = lift_container(current)
            self.install_container(lifted, "adopted", adopted=True)
            current = lifted
        self.log.emit(self.name, "divergence_adopted", depth=d, hash=selected.container.hash.hex()[:16])

    def gather_root_extras(self):
        """The root is endorsed more broadly than the per-level threshold."""
        root = self.containers.get(0)
        if root is None:
            return
        target_sigs = min(
            self.params.sig_threshold + self.config.root_extra_sigs,
            self.snapshot.reachable(0),
        )
        have = self.sig_collections.setdefault(0, {})
        if self.keypair.pk not in have and 0 in self.own_sigs:
            have[self.keypair.pk] = self.own_sigs[0]
        pool = [c for c in self.snapshot.members_below(0)]
        self.sched_rng.shuffle(pool)
        deadline = self.timeline.sample_at - 1
        item = (root.hash, 0, root.count)
        for contact in pool:
            if len(have) >= target_sigs or self.sim.now >= deadline:
                break
            if contact.pk in have:
                continue
            reply = yield self.ask(
                contact.address,
                m.SignRequest(items=(item,), own_sigs=tuple(s for s in (self.own_sigs.get(0),) if s)),
                self.config.timeout_ms,
            )
            if reply is TIMEOUT or reply.message.kind != "sign_reply":
                continue
            for sig in reply.message.sigs:
                if self._accept_signature(sig, item, root.subtree):
                    have[sig.signer_pk] = sig
        self._finalize_confirmations(1, 0, [0], self.pulled.get(1))

    def record_root(self) -> None:
        root = self.containers.get(0)
        if root is None:
            self.log.emit(self.name, "no_root")
            return
        self.result.root_hash = root.hash
        self.result.root_count = root.count
        self.log.emit(
            self.name, "root", hash=root.hash.hex(), count=root.count,
            aggregate=root.aggregate.hex(),
        )

    # ------------------------------------------------------------------
    # serving requests
    # ------------------------------------------------------------------

    def handle_request(self, env) -> None:
        handler = getattr(self, "handle_" + env.message.kind, None)
        if handler is not None:
            handler(env)

    def allows_peer(self, env) -> bool:
        if not env.sender_token:
            return env.sender_pk == self.authority_pk
        if self.snapshot is None:
            return True
        try:
            kid = derive_kid(env.sender_token, self.bits)
        except OverlayError:
            return False
        return self.snapshot.signer_allowed(kid)

    def handle_find_node(self, env) -> None:
        if self.table is None:
            return
        if not self.allows_peer(env):
            self.reply(env, m.Denied("not a member"))
            return
        contacts = tuple(self.table.closest(env.message.target, self.config.bucket_size))
        self.reply(env, m.NodesReply(contacts=contacts))

    def served_confirmed(self, depth: int, env) -> ConfirmedContainer | None:
        return self.confirmed.get(depth)

    def handle_pull(self, env) -> None:
        if not self.allows_peer(env):
            self.reply(env, m.PullReply(status="denied"))
            return
        subtree = env.message.subtree
        if self.kid is None or self.snapshot is None or not subtree.contains(self.kid):
            self.reply(env, m.PullReply(status="no_data"))
            return
        depth = subtree.depth
        cc = self.served_confirmed(depth, env)
        if cc is not None:
            self.reply(env, m.PullReply(status="ok", confirmed=cc))
            return
        if depth in self.containers:
            children = self._fallback_children(depth)
            if children:
                self.reply(env, m.PullReply(status="children", children=children))
            else:
                self.reply(env, m.PullReply(status="no_data"))
            return
        self.reply(env, m.PullReply(status="not_ready"))

    def _fallback_children(self, depth: int) -> tuple[ConfirmedContainer, ...] | None:
        """The confirmed containers this level was built from, for receivers
        that must recompute the aggregation on their own."""
        provenance = self.provenance.get(depth)
        if provenance in ("lift", "lift_excluded"):
            child = self.confirmed.get(depth + 1)
            return (child,) if child else None
        if provenance == "combine":
            own = self.confirmed.get(depth + 1)
            sibling = self.pulled.get(depth + 1)
            return (own, sibling) if own and sibling else None
        return None

    def sign_response(self, env) -> m.SignReply:
        out: list[ContainerSignature] = []
        divergent: list[ConfirmedContainer] = []
        seen_depths: set[int] = set()
        for h, depth, count in env.message.items:
            own = self.containers.get(depth)
            if own is None:
                continue
            if own.hash == h and own.count == count:
                sig = self.own_sigs.get(depth)
                if sig is not None and sig.container_hash == h:
                    out.append(sig)
            elif depth not in seen_depths:
                seen_depths.add(depth)
                divergent.append(self._current_evidence(depth))
        return m.SignReply(sigs=tuple(out), divergent=tuple(divergent))

    def _current_evidence(self, depth: int) -> ConfirmedContainer:
        cc = self.confirmed.get(depth)
        if cc is not None:
            return cc
        container = self.containers[depth]
        sigs = tuple(self.sig_collections.get(depth, {}).values())
        return ConfirmedContainer(container=container, sigs_on_hash=sigs, child_evidence=())

    def handle_sign_request(self, env) -> None:
        if not self.allows_peer(env):
            self.reply(env, m.Denied("not a member"))
            return
        for sig in env.message.own_sigs:
            item = (sig.container_hash, sig.depth, sig.count)
            own = self.containers.get(sig.depth)
            if own is not None and own.hash == sig.container_hash and own.count == sig.count:
                if self._accept_signature(sig, item, own.subtree):
                    self.sig_collections.setdefault(sig.depth, {})[sig.signer_pk] = sig
            else:
                self._record_foreign_signature(sig)
        self.reply(env, self.sign_response(env))

    def _record_foreign_signature(self, sig: ContainerSignature) -> None:
        if verify_signature(sig, self.authority_pk):
            if self.snapshot is None or self.snapshot.signer_allowed(sig.signer_kid(self.bits)):
                self._note_signature(sig)

    def handle_root_query(self, env) -> None:
        if env.sender_pk != self.authority_pk:
            return
        root = self.containers.get(0)
        if root is None:
            self.reply(env, m.RootReply(root=None))
            return
        self.reply(env, m.RootReply(root=self._current_evidence(0)))

    # ------------------------------------------------------------------
    # misbehavior reporting
    # ------------------------------------------------------------------

    def report_misbehavior(self, proof) -> None:
        accused = proof.first.signer_pk
        if accused == self.keypair.pk:
            return
        self.proofs.append(proof)
        self.log.emit(
            self.name,
            "misbehavior_proof",
            accused_pk=accused.hex()[:16],
            certain=proof.certain,
            depth=proof.first.depth,
            count=proof.first.count,
        )
        if accused not in self._reported_accusations:
            self._reported_accusations.add(accused)
            self.tell(self.authority_address, m.MisbehaviorReport(proof=proof))

    # ------------------------------------------------------------------
    # lottery tail: claims and verification
    # ------------------------------------------------------------------

    def on_board(self, record: dict) -> None:
        if record["kind"] == "announcement":
            self.sim.schedule(0, lambda: self._maybe_claim(record))
        elif record["kind"] == "claims_published":
            self.sim.schedule(0, lambda: self.verify_now())

    def _maybe_claim(self, record: dict) -> None:
        if self.kid is None or self.ticket is None:
            return
        announcement = WinnerAnnouncement.from_json(record["payload"])
        if announcement.mode is Mode.CL:
            if self.kid not in announcement.winner_kids:
                return
        else:
            if self.ticket_number != announcement.winning_number:
                return
        Process(self.sim, self._claim_process(announcement))

    def _claim_chain(self) -> tuple[ConfirmedContainer, ...] | None:
        chain = []
        for depth in range(self.bits, -1, -1):
            cc = self.lineage_confirmed.get(depth)
            if cc is None:
                return None
            chain.append(cc)
        for lower, upper in zip(chain, chain[1:]):
            if not upper.container.has_child(lower.container.hash, lower.container.count):
                return None
        return tuple(chain)

    def _claim_process(self, announcement: WinnerAnnouncement):
        chain = self._claim_chain()
        if chain is None:
            self.log.emit(self.name, "claim_impossible", reason="own chain incomplete")
            return
        claim = Claim(
            pk=self.keypair.pk,
            token=self.token,
            seq=self.seq,
            chain=chain,
            ticket=self.ticket if self.params.mode is Mode.LO else None,
            random_value=self.ticket_secret if self.params.mode is Mode.LO else None,
            number=self.ticket_number if self.params.mode is Mode.LO else None,
        )
        self.result.claim_sent = True
        reply = yield self.ask(self.authority_address, m.ClaimSubmit(claim=claim), self.config.timeout_ms * 2)
        if reply is not TIMEOUT and reply.message.kind == "claim_reply":
            self.result.claim_accepted = reply.message.accepted
            self.log.emit(
                self.name, "claim_result", accepted=reply.message.accepted, reason=reply.message.reason
            )

    def verify_now(self) -> None:
        ann_post = self.board.latest("announcement")
        claims_post = self.board.latest("claims_published")
        count_post = self.board.latest("ticket_count")
        if ann_post is None or claims_post is None or count_post is None:
            return
        announcement = WinnerAnnouncement.from_json(ann_post["payload"])
        published = [
            (Claim.from_json(entry["claim"]), entry["accepted"])
            for entry in claims_post["payload"]["claims"]
        ]
        report = verify_outcome(
            params=self.params,
            announcement=announcement,
            published_claims=published,
            published_count=count_post["payload"]["count"],
            own_kid=self.kid,
            own_seq=self.seq,
            own_containers=dict(self.lineage),
            own_root=self.containers.get(0),
        )
        if self.result.diverged:
            report.details.append("diverged from the majority during aggregation")
        self.result.report = report
        self.log.emit(self.name, "verification", **report.to_json())
