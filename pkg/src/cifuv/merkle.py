"""Binary SHA-256 Merkle trees over 32-byte leaf hashes.

A single leaf is its own root.  Odd levels duplicate their last node.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

from .errors import InvalidInputError


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_pair(left: bytes, right: bytes) -> bytes:
    return sha256(left + right)


@dataclass(frozen=True)
class MerkleProof:
    leaf: bytes
    # (sibling hash, sibling_is_left) from the leaf level upward.
    path: tuple[tuple[bytes, bool], ...]

    def fold(self) -> bytes:
        node = self.leaf
        for sibling, sibling_is_left in self.path:
            node = hash_pair(sibling, node) if sibling_is_left else hash_pair(node, sibling)
        return node


def merkle_levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    if not leaves:
        raise InvalidInputError("a Merkle tree needs at least one leaf")
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        level = levels[-1]
        if len(level) % 2:
            level = level + [level[-1]]
        levels.append([hash_pair(level[i], level[i + 1]) for i in range(0, len(level), 2)])
    return levels


def root_of(leaves: Sequence[bytes]) -> bytes:
    return merkle_levels(leaves)[-1][0]


def prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise InvalidInputError(f"leaf index {index} outside 0..{len(leaves) - 1}")
    path = []
    i = index
    for level in merkle_levels(leaves)[:-1]:
        sibling = i ^ 1
        path.append((level[sibling] if sibling < len(level) else level[i], sibling < i))
        i //= 2
    return MerkleProof(leaf=leaves[index], path=tuple(path))


def verify_merkle(root: bytes, proof: MerkleProof) -> bool:
    return proof.fold() == root
