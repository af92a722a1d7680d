"""Adversarial player behaviors for the evaluation scenarios.

Each strategy is a narrow override of the honest player: silent players
never answer, equivocators keep a parallel alternative state and alternate
between the two, late joiners obtain their token only after the aggregation
has started, and colluding root manipulators starve honest members of their
cluster while swapping their tickets once the authority leaks its secret.
Adversaries may behave arbitrarily but their messages stay well-formed.
"""

from .. import crypto
from ..aggregation import (
    ConfirmedContainer,
    combine_containers,
    lift_container,
    make_leaf_container,
    sign_container,
)
from ..lottery import build_ticket, initial_aggregate
from ..overlay import SubtreeId, derive_kid, sibling_subtree
from . import messages as m
from .player import Player

__all__ = ["HonestPlayer", "SilentPlayer", "EquivocatorPlayer", "LateJoinerPlayer",
           "ColludingManipulatorPlayer", "STRATEGIES"]


class HonestPlayer(Player):
    strategy = "honest"


class SilentPlayer(Player):
    """Buys a ticket and joins, then never answers anything again.

    Honest pullers hit their timeout, retry elsewhere and finally treat the
    unreachable subtree as empty, so silent leaves drop out of the root."""

    strategy = "silent"

    def participates(self) -> bool:
        return False

    def handle_request(self, env) -> None:
        return

    def _maybe_claim(self, record) -> None:
        return


class EquivocatorPlayer(Player):
    """Maintains two versions of its own containers and alternates between
    them, answer by answer.

    Both versions are properly signed, so any honest player that sees both
    signatures for one (depth, count) holds a misbehavior proof; at the leaf
    the count is 1, making the deviation provable with certainty."""

    strategy = "equivocator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.alt_containers: dict[int, object] = {}
        self.alt_sigs: dict[int, object] = {}
        self.alt_confirmed: dict[int, ConfirmedContainer] = {}
        self._flip = 0

    def build_leaf_chain(self) -> None:
        super().build_leaf_chain()
        alt_secret = crypto.hash_bytes(self.ticket_secret + b"equivocation")
        alt_ticket = build_ticket(
            self.params.mode,
            self.seq,
            alt_secret,
            number=self.ticket_number,
            lotto_domain=self.params.lotto_domain,
        )
        current = make_leaf_container(initial_aggregate(alt_ticket), self.kid)
        deepest = max(self.snapshot.buckets, default=0)
        while True:
            self._store_alt(current)
            if current.depth <= deepest:
                break
            current = lift_container(current)

    def _store_alt(self, container) -> None:
        depth = container.depth
        sig = sign_container(self.keypair, self.token, container)
        self.alt_containers[depth] = container
        self.alt_sigs[depth] = sig
        evidence = ()
        child = self.alt_sigs.get(depth + 1)
        if container.children and child is not None:
            evidence = (child,)
        self.alt_confirmed[depth] = ConfirmedContainer(
            container=container, sigs_on_hash=(sig,), child_evidence=evidence
        )

    def _install_level(self, d, next_d, sib_cc) -> None:
        super()._install_level(d, next_d, sib_cc)
        alt_child = self.alt_containers.get(d)
        if alt_child is None:
            return
        if sib_cc is None:
            alt = lift_container(alt_child)
        else:
            alt = combine_containers(alt_child, sib_cc.container)
        # stop the alternative lineage once its count exceeds the threshold:
        # beyond that the double signature is no longer provable with certainty
        if alt.count > self.params.sig_threshold:
            return
        self._store_alt(alt)
        while alt.depth > next_d:
            alt = lift_container(alt)
            self._store_alt(alt)

    def served_confirmed(self, depth, env):
        primary = self.confirmed.get(depth)
        alt = self.alt_confirmed.get(depth)
        if alt is None or alt.container.count != 1:
            return primary
        self._flip += 1
        return alt if self._flip % 2 else primary

    def sign_response(self, env) -> m.SignReply:
        reply = super().sign_response(env)
        extra = []
        for h, depth, count in env.message.items:
            alt = self.alt_confirmed.get(depth)
            if alt is not None and alt.container.count == count:
                extra.append(alt)
        if not extra:
            return reply
        self._flip += 1
        if self._flip % 2:
            return m.SignReply(sigs=reply.sigs, divergent=tuple(extra))
        return reply


class LateJoinerPlayer(Player):
    """Obtains its token only after the aggregation has started (which takes
    a dishonest authority) and then attempts to participate anyway."""

    strategy = "late_joiner"


class ColludingManipulatorPlayer(Player):
    """Worst-case cluster member colluding with a dishonest authority.

    Inside the cluster prefix it only ever talks to fellow colluders, so
    honest members of the cluster cannot assemble evidence for their own
    containers.  Once the authority leaks its secret, the colluder swaps its
    ticket, substituting an alternative aggregate before release."""

    strategy = "colluding_root_manipulator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cluster: SubtreeId | None = None
        self.colluder_pks: frozenset[bytes] = frozenset()
        self.leaked_reveal: bytes | None = None

    def configure_collusion(self, cluster: SubtreeId, colluder_pks) -> None:
        self.cluster = cluster
        self.colluder_pks = frozenset(colluder_pks)

    def learn_reveal(self, reveal: bytes) -> None:
        self.leaked_reveal = reveal

    def _inside_cluster(self, subtree: SubtreeId) -> bool:
        if self.cluster is None or subtree.depth < self.cluster.depth:
            return False
        return subtree.prefix >> (subtree.depth - self.cluster.depth) == self.cluster.prefix

    def build_leaf_chain(self) -> None:
        if self.leaked_reveal is not None:
            # substitute the committed ticket now that the outcome is steerable
            swapped = crypto.hash_bytes(self.ticket_secret + self.leaked_reveal)
            self.ticket_secret = swapped
            self.ticket = build_ticket(
                self.params.mode,
                self.seq,
                swapped,
                number=self.ticket_number,
                lotto_domain=self.params.lotto_domain,
            )
            self.log.emit(self.name, "ticket_swapped")
        super().build_leaf_chain()

    def pull_targets(self, d):
        targets = super().pull_targets(d)
        if self.kid is not None and self._inside_cluster(sibling_subtree(self.kid, d)):
            return [c for c in targets if c.pk in self.colluder_pks]
        return targets

    def allows_peer(self, env) -> bool:
        if not super().allows_peer(env):
            return False
        if not env.sender_token or self.cluster is None:
            return True
        kid = derive_kid(env.sender_token, self.bits)
        if self.cluster.contains(kid) and env.sender_pk not in self.colluder_pks:
            return False
        return True


STRATEGIES = {
    cls.strategy: cls
    for cls in (
        HonestPlayer,
        SilentPlayer,
        EquivocatorPlayer,
        LateJoinerPlayer,
        ColludingManipulatorPlayer,
    )
}
