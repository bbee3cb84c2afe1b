"""Binary Merkle trees with authentication paths.

Leaves hash as ``H(0x00 || leaf)``, internal nodes as ``H(0x01 || l || r)``.
A node without a sibling at some level is promoted unchanged, never
duplicated, so trees over n and n+1 leaves cannot share a root by padding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .crypto import digest

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"


class Side(enum.IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class PathStep:
    sibling: bytes
    side: Side  # where the sibling sits relative to the running hash


@dataclass(frozen=True)
class AuthPath:
    leaf_index: int
    siblings: tuple[PathStep, ...]


def leaf_hash(leaf: bytes) -> bytes:
    return digest(LEAF_PREFIX + leaf)


def node_hash(left: bytes, right: bytes) -> bytes:
    return digest(NODE_PREFIX + left + right)


class MerkleTree:
    __slots__ = ("leaves", "levels")

    def __init__(self, leaves: list[bytes], levels: list[list[bytes]]):
        self.leaves = leaves
        self.levels = levels

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    def __len__(self) -> int:
        return len(self.leaves)


def build(leaves) -> MerkleTree:
    leaves = [bytes(x) for x in leaves]
    if not leaves:
        raise ValueError("cannot build a Merkle tree without leaves")
    level = [leaf_hash(x) for x in leaves]
    levels = [level]
    while len(level) > 1:
        nxt = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        levels.append(nxt)
        level = nxt
    return MerkleTree(leaves, levels)


def auth_path(tree: MerkleTree, index: int) -> AuthPath:
    if not 0 <= index < len(tree.leaves):
        raise IndexError(f"leaf index {index} out of range for {len(tree.leaves)} leaves")
    steps = []
    pos = index
    for level in tree.levels[:-1]:
        sib = pos ^ 1
        if sib < len(level):
            steps.append(PathStep(level[sib], Side.LEFT if sib < pos else Side.RIGHT))
        pos //= 2
    return AuthPath(index, tuple(steps))


def get_merkle_root(path: AuthPath, leaf: bytes) -> bytes:
    h = leaf_hash(leaf)
    for step in path.siblings:
        if step.side == Side.LEFT:
            h = node_hash(step.sibling, h)
        else:
            h = node_hash(h, step.sibling)
    return h


def expected_sides(leaf_count: int, leaf_index: int) -> list[Side]:
    """Sibling sides on the path of ``leaf_index`` in a tree of ``leaf_count`` leaves."""
    if not 0 <= leaf_index < leaf_count:
        raise IndexError(leaf_index)
    sides = []
    pos, size = leaf_index, leaf_count
    while size > 1:
        if pos % 2:
            sides.append(Side.LEFT)
        elif pos + 1 < size:
            sides.append(Side.RIGHT)
        # else: unpaired last node, promoted without a step
        pos //= 2
        size = (size + 1) // 2
    return sides


def path_matches(path: AuthPath, leaf_count: int) -> bool:
    """Exact shape check when the tree size is known: the index is then fully bound."""
    pos = path.leaf_index
    if not isinstance(pos, int) or not isinstance(leaf_count, int) or not 0 <= pos < leaf_count:
        return False
    return [s.side for s in path.siblings] == expected_sides(leaf_count, pos)


def path_consistent(path: AuthPath) -> bool:
    """True when the sibling sides are exactly those an honest tree yields for ``leaf_index``.

    A LEFT sibling appears precisely at odd positions and a promotion can only
    happen at the rightmost node of a level, after which no RIGHT sibling can
    follow. Under these rules the number of set bits of the index equals the
    number of LEFT steps, so any single-bit change to the index is caught.
    """
    pos = path.leaf_index
    if not isinstance(pos, int) or pos < 0:
        return False
    promoted = False
    for step in path.siblings:
        if pos % 2:
            if step.side != Side.LEFT:
                return False
        elif step.side == Side.RIGHT:
            if promoted:
                return False
        else:
            # even position without a right sibling: promoted until pos is odd
            if pos == 0:
                return False
            while pos % 2 == 0:
                pos //= 2
            promoted = True
        pos //= 2
    return pos == 0
