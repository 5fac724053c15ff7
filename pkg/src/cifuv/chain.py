"""Toy proof-of-work blockchain: transactions, headers, blocks and fork choice.

All integers are encoded big-endian with a fixed field order so that any two
parties hash identical headers to identical digests.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from . import merkle
from .errors import InvalidBlockError, InvalidInputError, MiningFailedError, OrphanBlockError
from .merkle import MerkleProof, sha256

HASH_LEN = 32
ZERO_HASH = bytes(HASH_LEN)
DEFAULT_DIFFICULTY = 12
POW_ALGORITHM = "sha256-pow"

_HEADER = struct.Struct(">Q32s32sBQQ")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class Transaction:
    payload: bytes
    # (guest chain id, guest tx id) when this transaction records a cross-chain event.
    cross_ref: tuple[bytes, bytes] | None = None

    def encode(self) -> bytes:
        out = struct.pack(">I", len(self.payload)) + self.payload
        if self.cross_ref is None:
            return out + b"\x00"
        chain, tx = self.cross_ref
        return out + b"\x01" + chain + tx

    @classmethod
    def decode(cls, buf: bytes, offset: int = 0) -> tuple[Transaction, int]:
        (n,) = struct.unpack_from(">I", buf, offset)
        offset += 4
        payload = bytes(buf[offset : offset + n])
        offset += n
        flag = buf[offset]
        offset += 1
        if flag == 0:
            return cls(payload), offset
        ref = (bytes(buf[offset : offset + 32]), bytes(buf[offset + 32 : offset + 64]))
        return cls(payload, ref), offset + 64

    @cached_property
    def tx_id(self) -> bytes:
        return sha256(self.encode())


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    difficulty_bits: int
    nonce: int
    timestamp: int

    def encode(self) -> bytes:
        return _HEADER.pack(self.height, self.prev_hash, self.merkle_root, self.difficulty_bits, self.nonce, self.timestamp)

    @classmethod
    def decode(cls, buf: bytes, offset: int = 0) -> BlockHeader:
        return cls(*_HEADER.unpack_from(buf, offset))

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.encode())

    @property
    def work(self) -> int:
        return 1 << self.difficulty_bits


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple[Transaction, ...]

    @property
    def hash(self) -> bytes:
        return self.header.hash

    @property
    def height(self) -> int:
        return self.header.height

    def encode(self) -> bytes:
        parts = [self.header.encode(), struct.pack(">I", len(self.txs))]
        parts.extend(tx.encode() for tx in self.txs)
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> Block:
        header = BlockHeader.decode(buf)
        offset = HEADER_SIZE
        (count,) = struct.unpack_from(">I", buf, offset)
        offset += 4
        txs = []
        for _ in range(count):
            tx, offset = Transaction.decode(buf, offset)
            txs.append(tx)
        if offset != len(buf):
            raise InvalidInputError("trailing bytes after block")
        return cls(header, tuple(txs))


HeaderLike = Union[Block, BlockHeader]


def header_of(item: HeaderLike) -> BlockHeader:
    return item.header if isinstance(item, Block) else item


@dataclass(frozen=True)
class ConsensusDescriptor:
    """Names the consensus algorithm and its fixed difficulty; carries no mining capability."""

    difficulty_bits: int = DEFAULT_DIFFICULTY
    algorithm: str = POW_ALGORITHM


# -- Merkle commitments ----------------------------------------------------

def merkle_root(txs: Sequence[Transaction]) -> bytes:
    if not txs:
        raise InvalidInputError("cannot commit to an empty transaction list")
    return merkle.root_of([tx.tx_id for tx in txs])


def merkle_prove(txs: Sequence[Transaction], index: int) -> MerkleProof:
    if not txs:
        raise InvalidInputError("cannot prove inclusion in an empty transaction list")
    return merkle.prove([tx.tx_id for tx in txs], index)


verify_merkle = merkle.verify_merkle


# -- proof of work ---------------------------------------------------------

def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


def meets_difficulty(digest: bytes, bits: int) -> bool:
    return int.from_bytes(digest, "big") >> (len(digest) * 8 - bits) == 0 if bits else True


def mine_header(
    height: int,
    prev_hash: bytes,
    root: bytes,
    difficulty_bits: int,
    timestamp: int,
    rng: np.random.Generator,
    max_tries: int = 1 << 32,
) -> BlockHeader:
    start = int(rng.integers(0, 2**64, dtype=np.uint64))
    prefix = hashlib.sha256(_HEADER.pack(height, prev_hash, root, difficulty_bits, 0, timestamp)[:-16])
    suffix = struct.pack(">Q", timestamp)
    # Valid iff the top ``difficulty_bits`` bits of the digest are zero.
    limit = 1 << (256 - difficulty_bits)
    pack = struct.Struct(">Q").pack
    for i in range(max_tries):
        nonce = (start + i) & 0xFFFFFFFFFFFFFFFF
        h = prefix.copy()
        h.update(pack(nonce) + suffix)
        if int.from_bytes(h.digest(), "big") < limit:
            return BlockHeader(height, prev_hash, root, difficulty_bits, nonce, timestamp)
    raise MiningFailedError(f"no valid nonce in {max_tries} tries at difficulty {difficulty_bits}")


def mine_block(
    parent: BlockHeader,
    txs: Sequence[Transaction],
    difficulty_bits: int,
    rng: np.random.Generator,
    timestamp: int | None = None,
    max_tries: int = 1 << 32,
) -> Block:
    txs = tuple(txs)
    ts = parent.timestamp + 1 if timestamp is None else timestamp
    header = mine_header(parent.height + 1, parent.hash, merkle_root(txs), difficulty_bits, ts, rng, max_tries)
    return Block(header, txs)


def make_genesis(
    tag: bytes | str,
    difficulty_bits: int = DEFAULT_DIFFICULTY,
    rng: np.random.Generator | None = None,
    timestamp: int = 0,
) -> Block:
    if isinstance(tag, str):
        tag = tag.encode()
    rng = rng if rng is not None else np.random.default_rng(0)
    txs = (Transaction(b"genesis:" + tag),)
    header = mine_header(0, ZERO_HASH, merkle_root(txs), difficulty_bits, timestamp, rng)
    return Block(header, txs)


# -- verification ----------------------------------------------------------

def header_failure(header: BlockHeader, parent: BlockHeader | None,
                   consensus: ConsensusDescriptor | None = None) -> str | None:
    """First reason ``header`` is invalid on top of ``parent`` (None for genesis), or None."""
    if consensus is not None and (
        consensus.algorithm != POW_ALGORITHM or header.difficulty_bits != consensus.difficulty_bits
    ):
        return "invalid-pow"
    if not meets_difficulty(header.hash, header.difficulty_bits):
        return "invalid-pow"
    if parent is None:
        if header.height != 0 or header.prev_hash != ZERO_HASH:
            return "broken-linkage"
    elif header.prev_hash != parent.hash or header.height != parent.height + 1:
        return "broken-linkage"
    return None


def verify_header(header: BlockHeader, parent: BlockHeader | None,
                  consensus: ConsensusDescriptor | None = None) -> bool:
    return header_failure(header, parent, consensus) is None


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    failure: str | None = None
    height: int | None = None


def check_chain(items: Sequence[HeaderLike], consensus: ConsensusDescriptor | None = None) -> ChainCheck:
    """Walk a chain from genesis; full blocks must also match their Merkle commitment."""
    if not items:
        return ChainCheck(False, "broken-linkage", 0)
    parent = None
    for item in items:
        header = header_of(item)
        reason = header_failure(header, parent, consensus)
        if reason is not None:
            return ChainCheck(False, reason, header.height)
        if isinstance(item, Block) and (not item.txs or merkle_root(item.txs) != header.merkle_root):
            return ChainCheck(False, "bad-merkle-root", header.height)
        parent = header
    return ChainCheck(True)


def verify_chain(items: Sequence[HeaderLike], consensus: ConsensusDescriptor | None = None) -> bool:
    return check_chain(items, consensus).ok


def chain_id(genesis: HeaderLike) -> bytes:
    header = header_of(genesis)
    if header.height != 0 or header.prev_hash != ZERO_HASH:
        raise InvalidInputError(f"not a genesis header (height {header.height})")
    return header.hash


# -- quintuple -------------------------------------------------------------

@dataclass(frozen=True)
class BlockchainQuintuple:
    """Everything a verifier needs to check data of one chain by that chain's own rules.

    ``blocks`` may mix full blocks and bare headers (the light form).
    """

    id: bytes
    consensus: ConsensusDescriptor
    blocks: tuple[HeaderLike, ...]
    transactions: tuple[Transaction, ...] = ()

    @property
    def tip_height(self) -> int:
        return header_of(self.blocks[-1]).height

    def block_at(self, height: int) -> HeaderLike:
        return self.blocks[height]


# -- fork choice -----------------------------------------------------------

class Chain:
    """Block tree with cumulative-work fork choice and first-seen tie-break.

    Stores headers for every known block and bodies where available, so the
    same structure serves full nodes and header-only replicas.
    """

    LOCATOR_DENSE = 16

    def __init__(self, genesis: HeaderLike, consensus: ConsensusDescriptor | None = None):
        header = header_of(genesis)
        if header.height != 0 or header.prev_hash != ZERO_HASH:
            raise InvalidInputError("chain must start at a genesis header")
        self.consensus = consensus
        self.genesis_hash = header.hash
        self.headers: dict[bytes, BlockHeader] = {header.hash: header}
        self.bodies: dict[bytes, tuple[Transaction, ...]] = {}
        self.cumulative_work: dict[bytes, int] = {header.hash: header.work}
        self.tips: dict[bytes, None] = {header.hash: None}
        self.canonical_tip = header.hash
        self._canonical: list[bytes] = [header.hash]
        self._tx_index: dict[bytes, list[bytes]] = {}
        # Most canonical blocks ever discarded by a single switch of branch.
        self.deepest_reorg = 0
        if isinstance(genesis, Block):
            self.attach_body(genesis)

    @property
    def id(self) -> bytes:
        return self.genesis_hash

    @property
    def blocks_by_hash(self) -> dict[bytes, Block]:
        return {h: Block(self.headers[h], txs) for h, txs in self.bodies.items()}

    @property
    def tip(self) -> BlockHeader:
        return self.headers[self.canonical_tip]

    @property
    def height(self) -> int:
        return self.tip.height

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.headers

    def add_header(self, header: BlockHeader) -> bool:
        """Store a header; returns False if it was already known."""
        h = header.hash
        if h in self.headers:
            return False
        parent = self.headers.get(header.prev_hash)
        if parent is None:
            raise OrphanBlockError(f"unknown parent {header.prev_hash.hex()[:16]} for height {header.height}")
        reason = header_failure(header, parent, self.consensus)
        if reason is not None:
            raise InvalidBlockError(header.height, reason)
        self.headers[h] = header
        self.cumulative_work[h] = self.cumulative_work[parent.hash] + header.work
        self.tips.pop(parent.hash, None)
        self.tips[h] = None
        if self.cumulative_work[h] > self.cumulative_work[self.canonical_tip]:
            self._switch_to(h)
        return True

    def attach_body(self, block: Block) -> None:
        h = block.hash
        if h not in self.headers:
            raise OrphanBlockError(f"no header stored for block {h.hex()[:16]}")
        if h in self.bodies:
            return
        if not block.txs or merkle_root(block.txs) != block.header.merkle_root:
            raise InvalidBlockError(block.height, "bad-merkle-root")
        self.bodies[h] = block.txs
        for tx in block.txs:
            self._tx_index.setdefault(tx.tx_id, []).append(h)

    def extend(self, block: Block) -> bool:
        added = self.add_header(block.header)
        self.attach_body(block)
        return added

    def _switch_to(self, new_tip: bytes) -> None:
        branch = []
        h = new_tip
        while True:
            header = self.headers[h]
            if header.height < len(self._canonical) and self._canonical[header.height] == h:
                break
            branch.append(h)
            h = header.prev_hash
        fork_height = self.headers[h].height
        self.deepest_reorg = max(self.deepest_reorg, len(self._canonical) - 1 - fork_height)
        del self._canonical[fork_height + 1 :]
        self._canonical.extend(reversed(branch))
        self.canonical_tip = new_tip

    # -- canonical view --

    def canonical_hashes(self) -> list[bytes]:
        return list(self._canonical)

    def canonical_headers(self) -> list[BlockHeader]:
        return [self.headers[h] for h in self._canonical]

    def canonical(self) -> list[Block]:
        missing = [self.headers[h].height for h in self._canonical if h not in self.bodies]
        if missing:
            raise InvalidInputError(f"bodies missing for heights {missing[:5]}")
        return [Block(self.headers[h], self.bodies[h]) for h in self._canonical]

    def get_block(self, block_hash: bytes) -> Block | None:
        txs = self.bodies.get(block_hash)
        return None if txs is None else Block(self.headers[block_hash], txs)

    def header_at(self, height: int) -> BlockHeader:
        return self.headers[self._canonical[height]]

    def on_canonical(self, block_hash: bytes) -> bool:
        header = self.headers.get(block_hash)
        return header is not None and header.height < len(self._canonical) and self._canonical[header.height] == block_hash

    def depth(self, block_hash: bytes) -> int | None:
        """Blocks built on top of ``block_hash`` in the canonical chain, None if off it."""
        if not self.on_canonical(block_hash):
            return None
        return self.height - self.headers[block_hash].height

    def knows_tx(self, tx_id: bytes) -> bool:
        return tx_id in self._tx_index

    def locate_tx(self, tx_id: bytes) -> tuple[bytes, int] | None:
        """(block hash, index in block) of ``tx_id`` on the canonical chain."""
        for h in self._tx_index.get(tx_id, ()):
            if self.on_canonical(h):
                txs = self.bodies[h]
                return h, next(i for i, tx in enumerate(txs) if tx.tx_id == tx_id)
        return None

    def tx_depth(self, tx_id: bytes) -> int | None:
        found = self.locate_tx(tx_id)
        return None if found is None else self.depth(found[0])

    def locator(self) -> list[bytes]:
        """Canonical hashes from the tip back: dense first, then doubling steps, then genesis."""
        out, height, step = [], self.height, 1
        while height > 0:
            out.append(self._canonical[height])
            if len(out) >= self.LOCATOR_DENSE:
                step *= 2
            height -= step
        out.append(self._canonical[0])
        return out

    def headers_after(self, locator: Iterable[bytes], limit: int = 2000) -> list[BlockHeader]:
        """Canonical headers above the first locator entry that is on our canonical chain.

        An empty or unmatched locator starts from genesis, inclusive.
        """
        start = 0
        for h in locator:
            if self.on_canonical(h):
                start = self.headers[h].height + 1
                break
        return [self.headers[h] for h in self._canonical[start : start + limit]]


def block_payloads(tag: bytes, height: int, count: int) -> tuple[Transaction, ...]:
    return tuple(Transaction(b"%s:%d:%d" % (tag, height, i)) for i in range(count))


def build_chain(
    tag: bytes | str,
    length: int,
    difficulty_bits: int = DEFAULT_DIFFICULTY,
    rng: np.random.Generator | None = None,
    txs_per_block: int = 2,
) -> Chain:
    """Honestly mined chain with ``length`` blocks on top of a fresh genesis."""
    tag = tag.encode() if isinstance(tag, str) else tag
    rng = rng if rng is not None else np.random.default_rng(0)
    genesis = make_genesis(tag, difficulty_bits, rng)
    chain = Chain(genesis, ConsensusDescriptor(difficulty_bits))
    parent = genesis.header
    for height in range(1, length + 1):
        block = mine_block(parent, block_payloads(tag, height, txs_per_block), difficulty_bits, rng)
        chain.extend(block)
        parent = block.header
    return chain
