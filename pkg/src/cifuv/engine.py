"""Host-side verification of a guest chain's data by the guest's own rules.

The host keeps a replica of the guest chain (synchronised once from genesis,
then incrementally) and accepts a cross-chain claim only after checking it
against the guest's identity, proof of work, hash linkage, Merkle commitment
and confirmation depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .chain import (
    Block,
    BlockchainQuintuple,
    BlockHeader,
    Chain,
    ConsensusDescriptor,
    Transaction,
    chain_id,
    check_chain,
    header_failure,
    header_of,
    merkle_root,
    mine_block,
    verify_merkle,
)
from .errors import (
    InvalidInputError,
    MalformedQuintupleError,
    SyncAbortedError,
    SyncTimeoutError,
)
from .merkle import MerkleProof

class Failure(str, Enum):
    WRONG_CHAIN_ID = "wrong-chain-id"
    INVALID_POW = "invalid-pow"
    BROKEN_LINKAGE = "broken-linkage"
    BAD_MERKLE_PROOF = "bad-merkle-proof"
    TX_NOT_INCLUDED = "tx-not-included"
    INSUFFICIENT_CONFIRMATIONS = "insufficient-confirmations"


@dataclass(frozen=True)
class VerificationVerdict:
    accepted: bool
    failure: Failure | None = None

    def __post_init__(self):
        if self.accepted == (self.failure is not None):
            raise ValueError("accepted verdicts carry no failure; rejections carry exactly one")

    @classmethod
    def accept(cls) -> VerificationVerdict:
        return cls(True)

    @classmethod
    def reject(cls, failure: Failure) -> VerificationVerdict:
        return cls(False, failure)


@dataclass(frozen=True)
class ConfirmationPolicy:
    k_host: int = 6
    k_guest: int = 6

    def __post_init__(self):
        if self.k_host < 1 or self.k_guest < 1:
            raise InvalidInputError("confirmation depths must be >= 1")


# -- consensus set ---------------------------------------------------------

class GuestVerifier:
    """Verification-only view of a guest chain's consensus.  It has no way to mine."""

    __slots__ = ("guest_id", "descriptor")

    def __init__(self, guest_id: bytes, descriptor: ConsensusDescriptor):
        self.guest_id = guest_id
        self.descriptor = descriptor

    def header_failure(self, header: BlockHeader, parent: BlockHeader | None) -> str | None:
        return header_failure(header, parent, self.descriptor)

    def verify_header(self, header: BlockHeader, parent: BlockHeader | None) -> bool:
        return self.header_failure(header, parent) is None

    def verify_chain(self, items) -> bool:
        return check_chain(items, self.descriptor).ok


class OwnConsensus:
    """The host's own consensus: verifies and mines."""

    def __init__(self, descriptor: ConsensusDescriptor):
        self.descriptor = descriptor

    def verify_header(self, header: BlockHeader, parent: BlockHeader | None) -> bool:
        return header_failure(header, parent, self.descriptor) is None

    def mine(self, parent: BlockHeader, txs: Sequence[Transaction], rng: np.random.Generator,
             timestamp: int | None = None) -> Block:
        return mine_block(parent, txs, self.descriptor.difficulty_bits, rng, timestamp)


@dataclass
class ConsensusSet:
    own: OwnConsensus
    guest_verifiers: dict[bytes, GuestVerifier] = field(default_factory=dict)

    def add_guest(self, guest_id: bytes, descriptor: ConsensusDescriptor) -> GuestVerifier:
        verifier = GuestVerifier(guest_id, descriptor)
        self.guest_verifiers[guest_id] = verifier
        return verifier

    def verifier(self, guest_id: bytes) -> GuestVerifier:
        try:
            return self.guest_verifiers[guest_id]
        except KeyError:
            raise InvalidInputError(f"no verifier registered for guest {guest_id.hex()[:16]}") from None


# -- full verification -----------------------------------------------------

_CHAIN_FAILURES = {
    "invalid-pow": Failure.INVALID_POW,
    "broken-linkage": Failure.BROKEN_LINKAGE,
    "bad-merkle-root": Failure.BAD_MERKLE_PROOF,
}


def _structural_checks(quintuple: BlockchainQuintuple, at_height: int) -> None:
    blocks = quintuple.blocks
    if not blocks:
        raise MalformedQuintupleError("quintuple carries no blocks")
    if not 0 <= at_height < len(blocks):
        raise MalformedQuintupleError(f"at_height {at_height} outside 0..{len(blocks) - 1}")
    for i, item in enumerate(blocks):
        if not isinstance(item, (Block, BlockHeader)):
            raise MalformedQuintupleError(f"entry {i} is neither a block nor a header")


def _chain_checks(quintuple: BlockchainQuintuple, expected_id: bytes) -> Failure | None:
    blocks = quintuple.blocks
    try:
        genesis_id = chain_id(blocks[0])
    except InvalidInputError:
        genesis_id = None
    if genesis_id != expected_id or quintuple.id != expected_id:
        return Failure.WRONG_CHAIN_ID
    if any(header_of(item).height != i for i, item in enumerate(blocks)):
        # Positions must match heights for depth and lookup to mean anything.
        return Failure.BROKEN_LINKAGE
    check = check_chain(blocks, quintuple.consensus)
    if not check.ok:
        return _CHAIN_FAILURES[check.failure]
    return None


def full_verify(
    quintuple: BlockchainQuintuple,
    expected_id: bytes,
    tx: Transaction,
    proof: MerkleProof,
    at_height: int,
    policy: ConfirmationPolicy = ConfirmationPolicy(),
) -> VerificationVerdict:
    """Check ``tx`` against a guest quintuple, stopping at the first failed check.

    Order: chain id, proof of work and linkage under the guest consensus,
    Merkle proof against the header at ``at_height``, proof leaf equals
    ``tx``, and ``at_height`` buried at least ``k_guest`` blocks deep.
    """
    _structural_checks(quintuple, at_height)
    failure = _chain_checks(quintuple, expected_id)
    if failure is not None:
        return VerificationVerdict.reject(failure)
    if not verify_merkle(header_of(quintuple.blocks[at_height]).merkle_root, proof):
        return VerificationVerdict.reject(Failure.BAD_MERKLE_PROOF)
    if proof.leaf != tx.tx_id:
        return VerificationVerdict.reject(Failure.TX_NOT_INCLUDED)
    if quintuple.tip_height - at_height < policy.k_guest:
        return VerificationVerdict.reject(Failure.INSUFFICIENT_CONFIRMATIONS)
    return VerificationVerdict.accept()


def full_verify_by_transactions(
    quintuple: BlockchainQuintuple,
    expected_id: bytes,
    tx: Transaction,
    at_height: int,
    policy: ConfirmationPolicy = ConfirmationPolicy(),
) -> VerificationVerdict:
    """Variant without an inclusion proof: the full block at ``at_height`` is the evidence.

    The block body must match its header commitment (checked with the chain)
    and contain ``tx``.
    """
    _structural_checks(quintuple, at_height)
    block = quintuple.blocks[at_height]
    if not isinstance(block, Block):
        raise MalformedQuintupleError(f"height {at_height} carries a header but no transactions")
    failure = _chain_checks(quintuple, expected_id)
    if failure is not None:
        return VerificationVerdict.reject(failure)
    if all(t.tx_id != tx.tx_id for t in block.txs):
        return VerificationVerdict.reject(Failure.TX_NOT_INCLUDED)
    if quintuple.tip_height - at_height < policy.k_guest:
        return VerificationVerdict.reject(Failure.INSUFFICIENT_CONFIRMATIONS)
    return VerificationVerdict.accept()


def relay_trust_verify(claimed: BlockchainQuintuple | None, trusted_relay: bool = True) -> VerificationVerdict:
    """Insecure baseline: accept whatever a trusted relay asserts, checking nothing.

    Exists to demonstrate that a host can be shown data of a chain that does
    not exist.
    """
    if trusted_relay:
        return VerificationVerdict.accept()
    return VerificationVerdict.reject(Failure.WRONG_CHAIN_ID)


def quintuple_from_chain(chain: Chain, consensus: ConsensusDescriptor, bodies: bool = True) -> BlockchainQuintuple:
    """Canonical chain as a quintuple; bodies included wherever they are stored."""
    items = []
    for header in chain.canonical_headers():
        block = chain.get_block(header.hash) if bodies else None
        items.append(block if block is not None else header)
    return BlockchainQuintuple(chain.id, consensus, tuple(items))


# -- synchronisation -------------------------------------------------------

class SyncMode(str, Enum):
    FIRST_TIME = "first-time"
    KEEPING = "keeping"


class ReplicaMode(str, Enum):
    # Headers for every block; bodies only when a transaction must be proven.
    LIGHT = "light"
    # Headers and bodies for every block.
    FULL = "full"


@dataclass(frozen=True)
class SyncStats:
    headers: int
    blocks: int
    changed: int


@dataclass
class SyncState:
    guest_id: bytes
    verifier: GuestVerifier
    replica_mode: ReplicaMode = ReplicaMode.FULL
    mode: SyncMode = SyncMode.FIRST_TIME
    replica: Chain | None = None
    headers_downloaded: int = 0
    blocks_downloaded: int = 0
    last_stats: SyncStats | None = None

    @property
    def replica_tip_height(self) -> int:
        return -1 if self.replica is None else self.replica.height


class SyncSession:
    """One synchronisation pass as an event-driven state machine.

    The owner sends the requests returned by :meth:`start` and by each
    handler, and feeds responses back through :meth:`on_headers`,
    :meth:`on_block`, :meth:`on_not_found` and :meth:`on_timeout`.  Requests
    are ``("headers", locator)`` or ``("block", block_hash)`` tuples.

    Headers are checked one by one against the guest verifier as they arrive
    but only committed to the replica once the whole pass (bodies included,
    in full mode) has verified, so an aborted pass leaves the replica as it was.
    """

    HEADER_BATCH = 2000

    def __init__(self, state: SyncState, emit: Callable[..., None] | None = None):
        self.state = state
        self.emit = emit or (lambda kind, **fields: None)
        self.done = False
        self.error: Exception | None = None
        self.headers_received = 0
        self.blocks_received = 0
        self._pending: dict[bytes, BlockHeader] = {}
        self._bodies: dict[bytes, Block] = {}
        self._awaiting_bodies: set[bytes] = set()
        self._awaiting_headers = False

    @property
    def changed(self) -> int:
        return len(self._pending)

    @property
    def stats(self) -> SyncStats:
        return SyncStats(self.headers_received, self.blocks_received, self.changed)

    def _locator(self) -> tuple[bytes, ...]:
        base = () if self.state.replica is None else tuple(self.state.replica.locator())
        if self._pending:
            return (next(reversed(self._pending)),) + base
        return base

    def start(self) -> list[tuple]:
        self._awaiting_headers = True
        self.emit("sync-start", mode=self.state.mode.value, tip=self.state.replica_tip_height)
        return [("headers", self._locator())]

    def _abort(self, height: int, reason: str) -> list[tuple]:
        self.error = SyncAbortedError(height, reason)
        self.done = True
        self.emit("sync-aborted", height=height, reason=reason)
        return []

    def _known(self, block_hash: bytes) -> BlockHeader | None:
        header = self._pending.get(block_hash)
        if header is None and self.state.replica is not None:
            header = self.state.replica.headers.get(block_hash)
        return header

    def on_headers(self, headers: Sequence[BlockHeader]) -> list[tuple]:
        if not self._awaiting_headers or self.done:
            return []
        self._awaiting_headers = False
        st = self.state
        self.headers_received += len(headers)
        st.headers_downloaded += len(headers)
        for header in headers:
            if self._known(header.hash) is not None:
                continue
            if st.replica is None and not self._pending:
                if header.height != 0 or header.hash != st.guest_id:
                    return self._abort(header.height, Failure.WRONG_CHAIN_ID.value)
                parent = None
            else:
                parent = self._known(header.prev_hash)
                if parent is None:
                    return self._abort(header.height, Failure.BROKEN_LINKAGE.value)
            reason = st.verifier.header_failure(header, parent)
            if reason is not None:
                return self._abort(header.height, reason)
            self._pending[header.hash] = header
        if st.replica is None and not self._pending:
            return self._abort(0, "peer returned no genesis")
        if len(headers) >= self.HEADER_BATCH:
            self._awaiting_headers = True
            return [("headers", self._locator())]
        if st.replica_mode is ReplicaMode.FULL:
            self._awaiting_bodies = set(self._pending)
            if self._awaiting_bodies:
                return [("block", h) for h in self._pending]
        return self._commit()

    def on_block(self, block: Block) -> list[tuple]:
        if self.done or block.hash not in self._awaiting_bodies:
            return []
        self._awaiting_bodies.discard(block.hash)
        self.blocks_received += 1
        self.state.blocks_downloaded += 1
        if not block.txs or merkle_root(block.txs) != block.header.merkle_root:
            return self._abort(block.height, "bad-merkle-root")
        self._bodies[block.hash] = block
        if not self._awaiting_bodies:
            return self._commit()
        return []

    def on_not_found(self, block_hash: bytes) -> list[tuple]:
        if self.done or block_hash not in self._awaiting_bodies:
            return []
        return self._abort(self._pending[block_hash].height, "block-not-served")

    def on_timeout(self) -> list[tuple]:
        if self.done:
            return []
        self.error = SyncTimeoutError(f"peer silent during {self.state.mode.value} sync")
        self.done = True
        self.emit("sync-timeout")
        return []

    def _commit(self) -> list[tuple]:
        st = self.state
        for block_hash, header in self._pending.items():
            item = self._bodies.get(block_hash, header)
            if st.replica is None:
                st.replica = Chain(item, st.verifier.descriptor)
                continue
            st.replica.add_header(header)
            if isinstance(item, Block):
                st.replica.attach_body(item)
        st.mode = SyncMode.KEEPING
        self.done = True
        self.emit(
            "sync-done",
            tip=st.replica_tip_height,
            headers=self.headers_received,
            blocks=self.blocks_received,
            changed=self.changed,
        )
        return []


def first_time_sync(peer, guest_id: bytes, verifier: GuestVerifier | None = None,
                    replica_mode: ReplicaMode = ReplicaMode.FULL) -> SyncState:
    """Download and verify the guest chain from genesis through ``peer``.

    ``peer`` drives the exchange (see :class:`cifuv.netsim.Peer`); it must
    provide ``run_session(session)`` that returns once the session is done.
    """
    if verifier is None:
        verifier = peer.verifier_for(guest_id)
    state = SyncState(guest_id=guest_id, verifier=verifier, replica_mode=replica_mode)
    session = SyncSession(state, peer.emit)
    peer.run_session(session)
    if session.error is not None:
        raise session.error
    state.last_stats = session.stats
    return state


def keep_sync(state: SyncState, peer) -> SyncState:
    """Fetch only what changed on the guest since the last synchronisation."""
    if state.mode is not SyncMode.KEEPING:
        raise InvalidInputError("keep_sync requires a state that completed first-time sync")
    session = SyncSession(state, peer.emit)
    peer.run_session(session)
    if session.error is not None:
        raise session.error
    state.last_stats = session.stats
    return state


# -- confirmation ----------------------------------------------------------

class Confirmation(str, Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    INVALIDATED = "invalidated"


@dataclass
class CrossEvent:
    """A host transaction that records a guest transaction, tracked until final."""

    host_tx_id: bytes
    guest_ref: tuple[bytes, bytes]
    status: Confirmation = Confirmation.PENDING
    host_seen: bool = False
    guest_seen: bool = False
    # Set when a confirmed event later loses either transaction from its canonical chain.
    reversed_after_confirm: bool = False


def confirm_cross_event(
    host_chain: Chain,
    state: SyncState,
    event: CrossEvent,
    policy: ConfirmationPolicy = ConfirmationPolicy(),
) -> Confirmation:
    """Advance ``event`` given the current host chain and guest replica.

    Confirmed needs both transactions buried ``k`` deep on their canonical
    chains; a transaction that leaves its canonical chain after being seen
    there invalidates a pending event.  Confirmed and invalidated are terminal.
    """
    if not host_chain.knows_tx(event.host_tx_id):
        raise InvalidInputError(f"host transaction {event.host_tx_id.hex()[:16]} was never recorded")
    guest_id, guest_tx = event.guest_ref
    if state.guest_id != guest_id:
        raise InvalidInputError("event refers to a different guest chain")
    host_depth = host_chain.tx_depth(event.host_tx_id)
    guest_depth = None if state.replica is None else state.replica.tx_depth(guest_tx)

    if event.status is Confirmation.CONFIRMED:
        if host_depth is None or guest_depth is None:
            event.reversed_after_confirm = True
        return event.status
    if event.status is Confirmation.INVALIDATED:
        return event.status

    evicted = (event.host_seen and host_depth is None) or (event.guest_seen and guest_depth is None)
    event.host_seen |= host_depth is not None
    event.guest_seen |= guest_depth is not None
    if evicted:
        event.status = Confirmation.INVALIDATED
    elif host_depth is not None and guest_depth is not None and host_depth >= policy.k_host and guest_depth >= policy.k_guest:
        event.status = Confirmation.CONFIRMED
    return event.status
