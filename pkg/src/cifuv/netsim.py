"""Deterministic discrete-event network for guest miners, a host node and adversaries.

Events run in ``(tick, insertion order)``.  Every node draws randomness from
its own generator derived from the simulation seed and the node id, so a
given seed and configuration always produce the same trace.
"""

from __future__ import annotations

import heapq
import itertools
import json
import zlib
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .chain import (
    Block,
    BlockHeader,
    Chain,
    ConsensusDescriptor,
    Transaction,
    make_genesis,
    meets_difficulty,
    merkle_prove,
    mine_block,
    mine_header,
)
from .engine import (
    Confirmation,
    ConfirmationPolicy,
    ConsensusSet,
    CrossEvent,
    Failure,
    OwnConsensus,
    ReplicaMode,
    SyncSession,
    SyncState,
    VerificationVerdict,
    confirm_cross_event,
    full_verify,
    quintuple_from_chain,
    relay_trust_verify,
)
from .errors import ConfigError, InvalidBlockError, InvalidEventError, MalformedQuintupleError
from .merkle import MerkleProof, sha256

NETSIM_DIFFICULTY = 8


# -- messages --------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    kind = "message"
    # Local messages (timers, mining draws) never cross a link and cost no bytes.
    local = False

    def size(self) -> int:
        return 0

    def describe(self) -> dict:
        return {}


@dataclass(frozen=True)
class GetHeaders(Message):
    locator: tuple[bytes, ...]
    kind = "get-headers"

    def size(self) -> int:
        return 4 + 32 * len(self.locator)

    def describe(self) -> dict:
        return {"locator": len(self.locator)}


@dataclass(frozen=True)
class Headers(Message):
    headers: tuple[BlockHeader, ...]
    kind = "headers"

    def size(self) -> int:
        return 4 + sum(len(h.encode()) for h in self.headers)

    def describe(self) -> dict:
        if not self.headers:
            return {"count": 0}
        return {"count": len(self.headers), "from": self.headers[0].height, "to": self.headers[-1].height}


@dataclass(frozen=True)
class GetBlock(Message):
    block_hash: bytes
    kind = "get-block"

    def size(self) -> int:
        return 32

    def describe(self) -> dict:
        return {"hash": self.block_hash.hex()}


@dataclass(frozen=True)
class BlockMsg(Message):
    block: Block
    kind = "block"

    def size(self) -> int:
        return len(self.block.encode())

    def describe(self) -> dict:
        return {"height": self.block.height, "hash": self.block.hash.hex()}


@dataclass(frozen=True)
class NotFound(Message):
    block_hash: bytes
    kind = "not-found"

    def size(self) -> int:
        return 32

    def describe(self) -> dict:
        return {"hash": self.block_hash.hex()}


@dataclass(frozen=True)
class Inv(Message):
    tip_hash: bytes
    height: int
    kind = "inv"

    def size(self) -> int:
        return 40

    def describe(self) -> dict:
        return {"height": self.height, "hash": self.tip_hash.hex()}


@dataclass(frozen=True)
class CrossClaim(Message):
    """A request that the host record ``tx`` of chain ``guest_id``.

    ``evidence`` is whatever the sender asserts about the guest chain; only the
    relay-trust baseline looks at it.
    """

    guest_id: bytes
    tx: Transaction
    proof: MerkleProof
    at_height: int
    evidence: object = None
    kind = "cross-claim"

    def size(self) -> int:
        return 32 + len(self.tx.encode()) + 32 + 33 * len(self.proof.path) + 8

    def describe(self) -> dict:
        return {"guest": self.guest_id.hex(), "tx": self.tx.tx_id.hex(), "at_height": self.at_height}


@dataclass(frozen=True)
class MineTick(Message):
    kind = "mine-tick"
    local = True


@dataclass(frozen=True)
class StartSync(Message):
    kind = "start-sync"
    local = True


@dataclass(frozen=True)
class Timeout(Message):
    token: int
    kind = "timeout"
    local = True

    def describe(self) -> dict:
        return {"token": self.token}


# -- simulator -------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


class Simulator:
    def __init__(self, seed: int = 0, default_latency: int = 1, record: bool = True):
        if default_latency < 0:
            raise ConfigError("latency must be >= 0")
        self.seed = seed
        self.now = 0
        self.default_latency = default_latency
        self.record = record
        self.nodes: dict[str, Node] = {}
        self.latency: dict[tuple[str, str], int] = {}
        self.bytes_sent: Counter[tuple[str, str]] = Counter()
        self.messages_sent: Counter[tuple[str, str, str]] = Counter()
        self.trace: list[dict] = []
        self._queue: list[tuple[int, int, str, str | None, Message]] = []
        self._seq = itertools.count()

    def add(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise ConfigError(f"duplicate node id {node.id!r}")
        node.sim = self
        node.rng = np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(node.id.encode()),))
        )
        self.nodes[node.id] = node
        return node

    def set_latency(self, a: str, b: str, ticks: int, symmetric: bool = True) -> None:
        if ticks < 0:
            raise ConfigError("latency must be >= 0")
        self.latency[(a, b)] = ticks
        if symmetric:
            self.latency[(b, a)] = ticks

    def schedule(self, at_tick: int, target: str, message: Message, src: str | None = None) -> None:
        if at_tick < self.now:
            raise InvalidEventError(f"cannot schedule at tick {at_tick} before current tick {self.now}")
        heapq.heappush(self._queue, (at_tick, next(self._seq), target, src, message))

    def send(self, src: str, dst: str, message: Message) -> None:
        if message.local:
            self.schedule(self.now, dst, message, src)
            return
        self.bytes_sent[(src, dst)] += message.size()
        self.messages_sent[(src, dst, message.kind)] += 1
        self.schedule(self.now + self.latency.get((src, dst), self.default_latency), dst, message, src)

    def log(self, node: str, event: str, **fields) -> None:
        if self.record or event in ("protocol-error",):
            entry = {"tick": self.now, "node": node, "event": event}
            entry.update(_jsonable(fields))
            self.trace.append(entry)

    @property
    def idle(self) -> bool:
        return not self._queue

    @property
    def next_tick(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> None:
        tick, _, target, src, message = heapq.heappop(self._queue)
        self.now = tick
        if self.record:
            entry = {"tick": tick, "src": src, "dst": target, "msg": message.kind}
            entry.update(_jsonable(message.describe()))
            self.trace.append(entry)
        node = self.nodes.get(target)
        if node is None:
            self.log(target, "protocol-error", reason="unknown-node", msg=message.kind, src=src)
            return
        node.handle(src, message)

    def run_until(self, tick: int) -> list[dict]:
        if tick < self.now:
            raise InvalidEventError(f"cannot run to tick {tick} before current tick {self.now}")
        start = len(self.trace)
        while self._queue and self._queue[0][0] <= tick:
            self.step()
        self.now = tick
        return self.trace[start:]

    def run_while(self, condition: Callable[[], bool], deadline: int) -> None:
        while condition() and self._queue and self._queue[0][0] <= deadline:
            self.step()

    def bytes_between(self, src: str, dst: str) -> int:
        return self.bytes_sent[(src, dst)]

    def count(self, src: str, dst: str, kind: str) -> int:
        return self.messages_sent[(src, dst, kind)]

    def trace_jsonl(self) -> bytes:
        return b"".join(json.dumps(e, separators=(",", ":")).encode() + b"\n" for e in self.trace)


class Node:
    def __init__(self, node_id: str):
        self.id = node_id
        self.sim: Simulator | None = None
        self.rng: np.random.Generator | None = None

    def handle(self, src: str | None, message: Message) -> None:
        handler = getattr(self, "on_" + message.kind.replace("-", "_"), None)
        if handler is None:
            self.log("protocol-error", reason="unexpected-message", msg=message.kind, src=src)
            return
        handler(src, message)

    def send(self, dst: str, message: Message) -> None:
        self.sim.send(self.id, dst, message)

    def log(self, event: str, **fields) -> None:
        self.sim.log(self.id, event, **fields)


# -- guest side ------------------------------------------------------------

class MiningDriver(Node):
    """Draws which miner finds the next block; one block per draw.

    Inter-block gaps are geometric with success probability ``rate`` per
    tick, i.e. a Bernoulli trial every tick.
    """

    def __init__(self, node_id: str, miners: Sequence[tuple[str, float]], rate: float,
                 stop_at: int | None = None):
        super().__init__(node_id)
        if not miners:
            raise ConfigError("mining driver needs at least one miner")
        if not 0 < rate <= 1:
            raise ConfigError("mining rate must be in (0, 1]")
        weights = np.array([w for _, w in miners], dtype=float)
        if (weights < 0).any() or weights.sum() <= 0:
            raise ConfigError("miner shares must be non-negative with a positive total")
        self.miners = [m for m, _ in miners]
        self.cdf = np.cumsum(weights / weights.sum())
        self.rate = rate
        self.stop_at = stop_at
        self.enabled = True

    def start(self) -> None:
        self._next()

    def _next(self) -> None:
        at = self.sim.now + int(self.rng.geometric(self.rate))
        if self.stop_at is None or at <= self.stop_at:
            self.sim.schedule(at, self.id, MineTick(), self.id)

    def on_mine_tick(self, src, message) -> None:
        if not self.enabled:
            return
        i = min(int(np.searchsorted(self.cdf, self.rng.random(), side="right")), len(self.miners) - 1)
        self.send(self.miners[i], MineTick())
        self._next()


class GuestNode(Node):
    """Honest guest miner: mines on its canonical tip, relays new blocks, serves requests."""

    def __init__(self, node_id: str, genesis: Block, consensus: ConsensusDescriptor,
                 peers: Iterable[str] = (), subscribers: Iterable[str] = ()):
        super().__init__(node_id)
        self.consensus = consensus
        self.chain = Chain(genesis, consensus)
        self.peers = list(peers)
        self.subscribers = list(subscribers)
        self.mempool: list[Transaction] = []
        self.orphans: dict[bytes, list[Block]] = {}
        self.watched: dict[bytes, tuple[Transaction, str]] = {}
        self.mined = 0
        # Canonical headers as of the last Headers response, for replica comparisons.
        self.served: tuple[BlockHeader, ...] = ()

    def submit(self, tx: Transaction, claim_to: str | None = None) -> None:
        self.mempool.append(tx)
        if claim_to is not None:
            self.watched[tx.tx_id] = (tx, claim_to)

    def on_submit(self, src, message: Submit) -> None:
        self.submit(message.tx, message.claim_to)

    def on_mine_tick(self, src, message) -> None:
        tip = self.chain.tip
        txs = (Transaction(b"%s:%d:%d" % (self.id.encode(), tip.height + 1, self.mined)),)
        txs += tuple(self.mempool)
        self.mempool.clear()
        self.mined += 1
        block = mine_block(tip, txs, self.consensus.difficulty_bits, self.rng, timestamp=self.sim.now)
        self.log("mined", height=block.height, hash=block.hash)
        self._accept(block, None)

    def on_block(self, src, message: BlockMsg) -> None:
        self._accept(message.block, src)

    def _accept(self, block: Block, src: str | None) -> None:
        queue = [block]
        while queue:
            block = queue.pop(0)
            if block.hash in self.chain:
                continue
            if block.header.prev_hash not in self.chain:
                self.orphans.setdefault(block.header.prev_hash, []).append(block)
                continue
            before = self.chain.canonical_tip
            try:
                self.chain.extend(block)
            except InvalidBlockError as exc:
                self.log("invalid-block", height=exc.height, reason=exc.reason, src=src)
                continue
            for peer in self.peers:
                if peer != src:
                    self.send(peer, BlockMsg(block))
            if self.chain.canonical_tip != before:
                self._on_new_tip()
            queue.extend(self.orphans.pop(block.hash, ()))

    def _on_new_tip(self) -> None:
        tip = self.chain.tip
        for sub in self.subscribers:
            self.send(sub, Inv(tip.hash, tip.height))
        for tx_id, (tx, target) in list(self.watched.items()):
            located = self.chain.locate_tx(tx_id)
            if located is None:
                continue
            block_hash, index = located
            block = self.chain.get_block(block_hash)
            proof = merkle_prove(block.txs, index)
            self.send(target, CrossClaim(self.chain.id, tx, proof, block.height))
            self.log("claim-sent", tx=tx_id, at_height=block.height)
            del self.watched[tx_id]

    def on_get_headers(self, src, message: GetHeaders) -> None:
        headers = tuple(self.chain.headers_after(message.locator))
        self.served = tuple(self.chain.canonical_headers())
        self.send(src, Headers(headers))

    def on_get_block(self, src, message: GetBlock) -> None:
        block = self.chain.get_block(message.block_hash)
        self.send(src, NotFound(message.block_hash) if block is None else BlockMsg(block))

    def on_inv(self, src, message) -> None:
        pass


class ForkMiner(Node):
    """Minority miner that tries to evict a target transaction by out-racing it privately.

    Mines honestly until the block holding the target transaction appears,
    then mines a private branch from that block's parent.  The branch is
    published as soon as it is strictly longer than the public one, and
    abandoned once the public branch leads by more than ``give_up`` blocks.
    """

    def __init__(self, node_id: str, genesis: Block, consensus: ConsensusDescriptor,
                 peers: Iterable[str] = (), give_up: int = 12):
        super().__init__(node_id)
        self.consensus = consensus
        self.chain = Chain(genesis, consensus)
        self.peers = list(peers)
        self.give_up = give_up
        self.target: bytes | None = None
        self.base: BlockHeader | None = None
        self.private: list[Block] = []
        self.outcome: str | None = None
        self.mined = 0

    def target_tx(self, tx_id: bytes) -> None:
        self.target = tx_id

    @property
    def attacking(self) -> bool:
        return self.base is not None and self.outcome is None

    def on_block(self, src, message: BlockMsg) -> None:
        block = message.block
        if block.hash in self.chain or block.header.prev_hash not in self.chain:
            return
        try:
            self.chain.extend(block)
        except InvalidBlockError:
            return
        if self.base is None and self.target is not None and self.outcome is None:
            located = self.chain.locate_tx(self.target)
            if located is not None and self.chain.on_canonical(located[0]):
                self.base = self.chain.headers[self.chain.headers[located[0]].prev_hash]
                self.log("fork-start", base=self.base.height)
        self._check()

    def on_mine_tick(self, src, message) -> None:
        self.mined += 1
        if self.attacking:
            parent = self.private[-1].header if self.private else self.base
            txs = (Transaction(b"%s:private:%d" % (self.id.encode(), self.mined)),)
            block = mine_block(parent, txs, self.consensus.difficulty_bits, self.rng, timestamp=self.sim.now)
            self.private.append(block)
            self._check()
            return
        tip = self.chain.tip
        txs = (Transaction(b"%s:%d:%d" % (self.id.encode(), tip.height + 1, self.mined)),)
        block = mine_block(tip, txs, self.consensus.difficulty_bits, self.rng, timestamp=self.sim.now)
        self.chain.extend(block)
        for peer in self.peers:
            self.send(peer, BlockMsg(block))

    def _check(self) -> None:
        if not self.attacking:
            return
        public = self.chain.height - self.base.height
        if len(self.private) > public:
            for block in self.private:
                self.chain.extend(block)
                for peer in self.peers:
                    self.send(peer, BlockMsg(block))
            self.outcome = "published"
            self.log("fork-published", length=len(self.private), public=public)
        elif public - len(self.private) > self.give_up:
            self.outcome = "gave-up"
            self.log("fork-abandoned", length=len(self.private), public=public)

    def on_get_headers(self, src, message: GetHeaders) -> None:
        self.send(src, Headers(tuple(self.chain.headers_after(message.locator))))

    def on_get_block(self, src, message: GetBlock) -> None:
        block = self.chain.get_block(message.block_hash)
        self.send(src, NotFound(message.block_hash) if block is None else BlockMsg(block))

    def on_inv(self, src, message) -> None:
        pass


# -- adversaries -----------------------------------------------------------

class AdversaryKind(str, Enum):
    TAMPER_RELAY = "tamper-relay"
    FORK_MINER = "fork-miner"
    SILENT_PEER = "silent-peer"


class TamperRule(str, Enum):
    FLIP_TX_BYTE = "flip-tx-byte"
    BAD_POW = "bad-pow"
    BREAK_LINK = "break-link"
    SWAP_GENESIS = "swap-genesis"
    BAD_MERKLE_ROOT = "bad-merkle-root"


@dataclass(frozen=True)
class AdversaryConfig:
    kind: AdversaryKind
    hash_share: float = 0.0
    tamper_rule: TamperRule | None = None
    # Lowest block height the tamper rule touches.
    target_height: int = 1
    give_up: int = 12

    def __post_init__(self):
        object.__setattr__(self, "kind", AdversaryKind(self.kind))
        if self.tamper_rule is not None:
            object.__setattr__(self, "tamper_rule", TamperRule(self.tamper_rule))
        if not 0.0 <= self.hash_share < 1.0:
            raise ConfigError("hash_share must lie in [0, 1)")
        if self.kind is AdversaryKind.FORK_MINER and self.hash_share <= 0.0:
            raise ConfigError("a fork miner needs a positive hash_share")
        if self.kind is not AdversaryKind.FORK_MINER and self.hash_share:
            raise ConfigError("hash_share applies to fork miners only")
        if (self.kind is AdversaryKind.TAMPER_RELAY) != (self.tamper_rule is not None):
            raise ConfigError("tamper_rule is required for, and only for, a tamper relay")
        if self.target_height < 0 or self.give_up < 0:
            raise ConfigError("target_height and give_up must be >= 0")

    @property
    def honest_share(self) -> float:
        return 1.0 - self.hash_share


def _flip_first_byte(tx: Transaction) -> Transaction:
    payload = tx.payload or b"\x00"
    return Transaction(bytes([payload[0] ^ 0x01]) + payload[1:], tx.cross_ref)


class TamperRelay(Node):
    """Sits between the host and a guest node and corrupts what flows back to the host."""

    def __init__(self, node_id: str, upstream: str, downstream: str, rule: TamperRule, target_height: int = 1):
        super().__init__(node_id)
        self.upstream = upstream
        self.downstream = downstream
        self.rule = TamperRule(rule)
        self.target_height = target_height
        # Forged header hash -> the real block hash it stands in for.
        self.forged: dict[bytes, bytes] = {}
        self.forged_headers: dict[bytes, BlockHeader] = {}
        self.tampered = 0

    def handle(self, src, message: Message) -> None:
        if src == self.downstream:
            if isinstance(message, GetBlock) and message.block_hash in self.forged:
                message = GetBlock(self.forged[message.block_hash])
            self.send(self.upstream, message)
            return
        tampered = self._tamper(message)
        if tampered is not message:
            self.tampered += 1
            self.log("tampered", rule=self.rule, msg=message.kind)
        self.send(self.downstream, tampered)

    def _remine(self, header: BlockHeader, **changes) -> BlockHeader:
        fields = dict(height=header.height, prev_hash=header.prev_hash, root=header.merkle_root,
                      difficulty_bits=header.difficulty_bits, timestamp=header.timestamp)
        fields.update(changes)
        return mine_header(rng=self.rng, **fields)

    def _tamper(self, message: Message) -> Message:
        rule = self.rule
        if isinstance(message, Headers):
            headers = list(message.headers)
            idx = next((i for i, h in enumerate(headers) if h.height >= self.target_height), None)
            if rule is TamperRule.SWAP_GENESIS and headers:
                return Headers(self._fabricated(headers))
            if idx is None or rule in (TamperRule.FLIP_TX_BYTE, TamperRule.SWAP_GENESIS):
                return message
            real = headers[idx]
            if rule is TamperRule.BAD_POW:
                fake = real
                nonce = real.nonce
                while meets_difficulty(fake.hash, fake.difficulty_bits):
                    nonce = (nonce + 1) & 0xFFFFFFFFFFFFFFFF
                    fake = BlockHeader(real.height, real.prev_hash, real.merkle_root,
                                       real.difficulty_bits, nonce, real.timestamp)
            elif rule is TamperRule.BREAK_LINK:
                fake = self._remine(real, prev_hash=sha256(b"forged-parent" + real.prev_hash))
            else:
                fake = self._remine(real, root=sha256(b"forged-root" + real.merkle_root))
            self.forged[fake.hash] = real.hash
            self.forged_headers[real.hash] = fake
            # Later headers would not link to the forgery, so the relay withholds them.
            return Headers(tuple(headers[:idx]) + (fake,))
        if isinstance(message, BlockMsg):
            block = message.block
            if block.hash in self.forged_headers:
                return BlockMsg(Block(self.forged_headers[block.hash], block.txs))
            if rule is TamperRule.FLIP_TX_BYTE and block.height >= self.target_height:
                return BlockMsg(Block(block.header, (_flip_first_byte(block.txs[0]),) + block.txs[1:]))
            return message
        if isinstance(message, CrossClaim) and rule is TamperRule.FLIP_TX_BYTE:
            return CrossClaim(message.guest_id, _flip_first_byte(message.tx), message.proof,
                              message.at_height, message.evidence)
        return message

    def _fabricated(self, headers: list[BlockHeader]) -> tuple[BlockHeader, ...]:
        """Same-shaped headers from a chain that shares nothing with the real one."""
        bits = headers[0].difficulty_bits
        genesis = make_genesis(b"fabricated:" + self.id.encode(), bits, self.rng)
        out, parent = [], genesis.header
        for h in headers:
            if h.height == 0:
                out.append(genesis.header)
                continue
            block = mine_block(parent, (Transaction(b"fabricated:%d" % h.height),), bits, self.rng,
                               timestamp=h.timestamp)
            out.append(block.header)
            parent = block.header
        return tuple(out)


class SilentPeer(Node):
    """Accepts every message and never answers."""

    def __init__(self, node_id: str):
        super().__init__(node_id)
        self.dropped = 0

    def handle(self, src, message) -> None:
        self.dropped += 1


# -- scheduled actions and forgery -----------------------------------------------------

@dataclass(frozen=True)
class Submit(Message):
    tx: Transaction
    claim_to: str | None = None
    kind = "submit"
    local = True


@dataclass(frozen=True)
class Forge(Message):
    kind = "forge"
    local = True


class Forger(Node):
    """Sends the host a claim about a transaction on a chain that does not exist.

    The forged chain is honestly mined, so the claim carries a complete,
    internally consistent quintuple; it simply is not the guest chain.
    """

    def __init__(self, node_id: str, target: str, payload: bytes, length: int, at_height: int,
                 difficulty_bits: int, impersonate: bytes | None = None):
        super().__init__(node_id)
        if not 1 <= at_height <= length:
            raise ConfigError("forged claim height must lie in 1..length")
        self.target = target
        self.payload = payload
        self.length = length
        self.at_height = at_height
        self.difficulty_bits = difficulty_bits
        self.impersonate = impersonate

    def on_forge(self, src, message) -> None:
        bits = self.difficulty_bits
        genesis = make_genesis(b"forged:" + self.id.encode(), bits, self.rng)
        chain = Chain(genesis, ConsensusDescriptor(bits))
        tx = Transaction(self.payload)
        parent = genesis.header
        for height in range(1, self.length + 1):
            txs = (Transaction(b"forged-filler:%d" % height),) + ((tx,) if height == self.at_height else ())
            block = mine_block(parent, txs, bits, self.rng)
            chain.extend(block)
            parent = block.header
        block = chain.canonical()[self.at_height]
        proof = merkle_prove(block.txs, len(block.txs) - 1)
        evidence = quintuple_from_chain(chain, ConsensusDescriptor(bits))
        guest_id = self.impersonate if self.impersonate is not None else chain.id
        self.send(self.target, CrossClaim(guest_id, tx, proof, self.at_height, evidence))
        self.log("forged-claim", tx=tx.tx_id, claimed_guest=guest_id)


# -- host ------------------------------------------------------------------

class VerifyMode(str, Enum):
    CIFUV = "cifuv"
    RELAY_TRUST = "relay-trust"


class HostNode(Node):
    """Host chain node: keeps a verified guest replica and records cross-chain claims.

    In ``cifuv`` mode a claim is checked by :func:`full_verify` against the
    replica synchronised from the guest; in ``relay-trust`` mode it is
    accepted as asserted.  Claims that are not yet deep enough wait for
    later synchronisations.
    """

    def __init__(
        self,
        node_id: str,
        genesis: Block,
        consensus: ConsensusDescriptor,
        guest_id: bytes,
        guest_consensus: ConsensusDescriptor,
        peer: str,
        mode: VerifyMode = VerifyMode.CIFUV,
        policy: ConfirmationPolicy = ConfirmationPolicy(),
        replica_mode: ReplicaMode = ReplicaMode.FULL,
        timeout: int = 20,
        auto_sync: bool = True,
    ):
        super().__init__(node_id)
        self.consensus = ConsensusSet(OwnConsensus(consensus))
        self.verifier = self.consensus.add_guest(guest_id, guest_consensus)
        self.chain = Chain(genesis, consensus)
        self.guest_id = guest_id
        self.peer = peer
        self.mode = VerifyMode(mode)
        self.policy = policy
        self.timeout = timeout
        self.auto_sync = auto_sync
        self.state = SyncState(guest_id, self.verifier, replica_mode)
        self.session: SyncSession | None = None
        self.sync_log: list[tuple[str, object]] = []
        self.outstanding = 0
        self.timed_out_requests = 0
        self._token = 0
        self._resync = False
        self.pending_claims: list[CrossClaim] = []
        self.verdicts: list[tuple[bytes, VerificationVerdict]] = []
        self.queued: list[Transaction] = []
        self.events: dict[bytes, CrossEvent] = {}
        self.transitions: list[tuple[bytes, str, str]] = []
        self.evicted_after_confirm: set[bytes] = set()
        self.mined = 0

    # sync

    def begin_session(self, session: SyncSession | None = None) -> SyncSession:
        if self.session is not None:
            raise InvalidEventError("a synchronisation is already running")
        if session is None:
            session = SyncSession(self.state, self._emit)
        self.state = session.state
        self.session = session
        self._dispatch(session.start())
        return session

    def _emit(self, kind: str, **fields) -> None:
        self.log(kind, **fields)

    def _dispatch(self, requests: list[tuple]) -> None:
        for kind, arg in requests:
            self.send(self.peer, GetHeaders(arg) if kind == "headers" else GetBlock(arg))
            self.outstanding += 1
        session = self.session
        if session.done:
            self._finish()
        else:
            self._token += 1
            self.sim.schedule(self.sim.now + self.timeout, self.id, Timeout(self._token), self.id)

    def _finish(self) -> None:
        session, self.session = self.session, None
        self.sync_log.append(("ok" if session.error is None else type(session.error).__name__, session.stats))
        self._token += 1
        self._review()
        if self._resync and self.auto_sync:
            self._resync = False
            self.begin_session()

    def on_start_sync(self, src, message) -> None:
        if self.session is None:
            self.begin_session()

    def on_inv(self, src, message: Inv) -> None:
        if not self.auto_sync:
            return
        if self.session is not None:
            self._resync = True
        else:
            self.begin_session()

    def _response(self, handler) -> None:
        # Late answers to an aborted pass still settle their request.
        self.outstanding = max(0, self.outstanding - 1)
        if self.session is None:
            self.log("unsolicited")
            return
        self._dispatch(handler())

    def on_headers(self, src, message: Headers) -> None:
        self._response(lambda: self.session.on_headers(message.headers))

    def on_block(self, src, message: BlockMsg) -> None:
        self._response(lambda: self.session.on_block(message.block))

    def on_not_found(self, src, message: NotFound) -> None:
        self._response(lambda: self.session.on_not_found(message.block_hash))

    def on_timeout(self, src, message: Timeout) -> None:
        if self.session is None or message.token != self._token:
            return
        self.session.on_timeout()
        self.timed_out_requests += self.outstanding
        self.outstanding = 0
        self._finish()

    # claims

    def on_cross_claim(self, src, message: CrossClaim) -> None:
        if self.mode is VerifyMode.RELAY_TRUST:
            self._record(message, relay_trust_verify(message.evidence, trusted_relay=True))
            return
        if not self._evaluate(message):
            self.pending_claims.append(message)
            self.log("claim-pending", tx=message.tx.tx_id)

    def _evaluate(self, claim: CrossClaim) -> bool:
        """Verify ``claim`` if that is decidable now; False means try again after the next sync."""
        if claim.guest_id != self.guest_id:
            self._record(claim, VerificationVerdict.reject(Failure.WRONG_CHAIN_ID))
            return True
        replica = self.state.replica
        if replica is None or claim.at_height > replica.height:
            return False
        quintuple = quintuple_from_chain(replica, self.verifier.descriptor, bodies=False)
        try:
            verdict = full_verify(quintuple, self.guest_id, claim.tx, claim.proof, claim.at_height, self.policy)
        except MalformedQuintupleError:
            return False
        if verdict.failure is Failure.INSUFFICIENT_CONFIRMATIONS:
            return False
        self._record(claim, verdict)
        return True

    def _record(self, claim: CrossClaim, verdict: VerificationVerdict) -> None:
        self.verdicts.append((claim.tx.tx_id, verdict))
        self.log("verdict", tx=claim.tx.tx_id, accepted=verdict.accepted, failure=verdict.failure)
        if verdict.accepted:
            self.queued.append(Transaction(b"cross:" + claim.tx.tx_id, (claim.guest_id, claim.tx.tx_id)))

    def _review(self) -> None:
        waiting, self.pending_claims = self.pending_claims, []
        for claim in waiting:
            if not self._evaluate(claim):
                self.pending_claims.append(claim)
        self._update_confirmations()

    # host chain

    def on_mine_tick(self, src, message) -> None:
        tip = self.chain.tip
        txs = (Transaction(b"%s:%d:%d" % (self.id.encode(), tip.height + 1, self.mined)),) + tuple(self.queued)
        self.mined += 1
        block = self.consensus.own.mine(tip, txs, self.rng, timestamp=self.sim.now)
        self.chain.extend(block)
        for tx in self.queued:
            self.events[tx.tx_id] = CrossEvent(tx.tx_id, tx.cross_ref)
            self.log("cross-recorded", host_tx=tx.tx_id, guest_tx=tx.cross_ref[1], height=block.height)
        self.queued.clear()
        self._update_confirmations()

    def _update_confirmations(self) -> None:
        if self.mode is not VerifyMode.CIFUV:
            return
        for host_tx, event in self.events.items():
            before = event.status
            after = confirm_cross_event(self.chain, self.state, event, self.policy)
            if after is not before:
                self.transitions.append((host_tx, before.value, after.value))
                self.log("confirmation", host_tx=host_tx, before=before, after=after)
            if event.reversed_after_confirm and host_tx not in self.evicted_after_confirm:
                self.evicted_after_confirm.add(host_tx)
                self.log("confirmed-evicted", host_tx=host_tx)

    def confirmation_counts(self) -> dict[str, int]:
        counts = Counter(e.status.value for e in self.events.values())
        return {s.value: counts.get(s.value, 0) for s in Confirmation}


class SimPeer:
    """Blocking peer for :func:`first_time_sync` and :func:`keep_sync`.

    Runs the simulator (other nodes keep mining meanwhile) until the host's
    session finishes or ``max_ticks`` pass, which counts as a timeout.
    """

    def __init__(self, sim: Simulator, host: HostNode, max_ticks: int = 10_000):
        self.sim = sim
        self.host = host
        self.max_ticks = max_ticks

    def verifier_for(self, guest_id: bytes):
        return self.host.consensus.verifier(guest_id)

    def emit(self, kind: str, **fields) -> None:
        self.host.log(kind, **fields)

    def run_session(self, session: SyncSession) -> None:
        self.host.begin_session(session)
        self.sim.run_while(lambda: not session.done, self.sim.now + self.max_ticks)
        if not session.done:
            self.host.on_timeout(None, Timeout(self.host._token))
