"""Deterministic desk-scale simulation of a peer-to-peer verifiable lottery.

The package implements the protocol stack bottom-up: hashing and signatures
(`crypto`), the binary overlay and its routing tables (`overlay`), the
verifiable tree aggregation with its fault-tolerance rules (`aggregation`),
the lottery phases (`lottery`), a seeded discrete-event network with
adversary strategies (`simnet`), and a command-line runner (`cli`).
"""

__version__ = "0.1.0"
