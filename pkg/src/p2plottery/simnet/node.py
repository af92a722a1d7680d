"""Base class for simulated actors: envelope plumbing and request matching.

Each node owns its state and mutates it only inside its event handlers;
inter-node effects flow exclusively through the simulated transport.  Every
outgoing message is sealed with the sender's signature; every incoming
envelope is verified (signature, and authorization token unless the sender
is the authority) before any handler sees it.
"""

from .. import crypto
from .core import TIMEOUT, Future, Simulator
from .messages import Envelope
from .network import Board, EventLog, Network

__all__ = ["Node"]


class Node:
    def __init__(
        self,
        sim: Simulator,
        net: Network,
        board: Board,
        log: EventLog,
        address: int,
        name: str,
        authority_pk: bytes,
    ):
        self.sim = sim
        self.net = net
        self.board = board
        self.log = log
        self.address = address
        self.name = name
        self.authority_pk = authority_pk
        self.keypair: crypto.KeyPair | None = None
        self.token: bytes = b""
        self.misbehavior_observed = 0
        self._req_counter = 0
        self._pending: dict[int, Future] = {}
        net.register(self)

    # -- sending ---------------------------------------------------------

    def _sealed(self, message, reply_to: int = 0) -> Envelope:
        self._req_counter += 1
        env = Envelope(
            sender=self.address,
            sender_pk=self.keypair.pk,
            sender_token=self.token,
            req_id=self._req_counter,
            reply_to=reply_to,
            message=message,
        )
        return env.seal(self.keypair)

    def ask(self, dst: int, message, timeout: int) -> Future:
        """Send a request; the future resolves with the reply envelope or TIMEOUT."""
        env = self._sealed(message)
        fut = Future()
        self._pending[env.req_id] = fut

        def on_timeout():
            if self._pending.pop(env.req_id, None) is not None:
                fut.resolve(TIMEOUT)

        self.sim.schedule(timeout, on_timeout)
        self.net.send(env, dst)
        self.log.emit_message(
            self.name, "msg_send", dst=dst, kind=message.kind,
            digest=crypto.hash_bytes(env.signed_bytes()).hex()[:16],
        )
        return fut

    def tell(self, dst: int, message) -> None:
        """Fire-and-forget request with no reply expected."""
        env = self._sealed(message)
        self.net.send(env, dst)
        self.log.emit_message(
            self.name, "msg_send", dst=dst, kind=message.kind,
            digest=crypto.hash_bytes(env.signed_bytes()).hex()[:16],
        )

    def reply(self, request: Envelope, message) -> None:
        env = self._sealed(message, reply_to=request.req_id)
        self.net.send(env, request.sender)

    # -- receiving -------------------------------------------------------

    def on_envelope(self, env: Envelope) -> None:
        if not self._envelope_acceptable(env):
            self.misbehavior_observed += 1
            return
        self.note_sender(env)
        if env.reply_to:
            fut = self._pending.pop(env.reply_to, None)
            if fut is not None:
                fut.resolve(env)
            return
        self.handle_request(env)

    def _envelope_acceptable(self, env: Envelope) -> bool:
        try:
            if not env.signature_valid():
                return False
        except crypto.CryptoError:
            return False
        if env.sender_token:
            return crypto.verify_token(self.authority_pk, env.sender_pk, env.sender_token)
        # Tokenless envelopes: the authority itself, or a buyer not yet issued one.
        return env.sender_pk == self.authority_pk or self.accepts_tokenless(env)

    def accepts_tokenless(self, env: Envelope) -> bool:
        return False

    def note_sender(self, env: Envelope) -> None:
        """Hook: called for every accepted envelope (contact learning)."""

    def handle_request(self, env: Envelope) -> None:
        raise NotImplementedError
