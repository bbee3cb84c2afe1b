import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftinfer import codec
from bftinfer.merkle import (
    AuthPath,
    PathStep,
    Side,
    auth_path,
    build,
    get_merkle_root,
    leaf_hash,
    node_hash,
    path_consistent,
    path_matches,
)

import oracles

# computed once with oracles.merkle_root over b"leaf0".."leaf6"
SEVEN_LEAF_ROOT = "4b6939132387c5bf27ebaf5ac122810ce866eb0c7bf44082364b35c06f713aa6"


def test_single_leaf():
    t = build([b"L"])
    assert t.root == oracles.sha256(b"\x00L")
    assert auth_path(t, 0).siblings == ()


def test_two_leaves():
    t = build([b"A", b"B"])
    assert t.root == oracles.sha256(b"\x01" + oracles.sha256(b"\x00A") + oracles.sha256(b"\x00B"))


def test_seven_leaves_frozen():
    leaves = [b"leaf%d" % i for i in range(7)]
    assert build(leaves).root.hex() == SEVEN_LEAF_ROOT
    assert oracles.merkle_root(leaves).hex() == SEVEN_LEAF_ROOT


def test_empty_tree_rejected():
    with pytest.raises(ValueError):
        build([])


def test_index_out_of_range():
    t = build([b"a", b"b", b"c"])
    with pytest.raises(IndexError):
        auth_path(t, 3)


def test_every_index_of_eight_leaf_tree():
    leaves = [bytes([i]) * 5 for i in range(8)]
    t = build(leaves)
    for i, leaf in enumerate(leaves):
        p = auth_path(t, i)
        assert len(p.siblings) == 3
        assert get_merkle_root(p, leaf) == t.root
        assert path_consistent(p)


def test_promotion_not_duplication():
    # n and n+1 leaves where the extra leaf copies the last must not collide
    leaves = [b"x", b"y", b"z"]
    assert build(leaves).root != build(leaves + [b"z"]).root


def test_tampered_siblings():
    rng = random.Random(3)
    for n in range(2, 20):
        leaves = [rng.randbytes(8) for _ in range(n)]
        t = build(leaves)
        for i in range(n):
            p = auth_path(t, i)
            for k, step in enumerate(p.siblings):
                bad = bytearray(step.sibling)
                bad[rng.randrange(32)] ^= 1 << rng.randrange(8)
                steps = list(p.siblings)
                steps[k] = PathStep(bytes(bad), step.side)
                assert get_merkle_root(AuthPath(i, tuple(steps)), leaves[i]) != t.root


def test_leaf_and_node_domains_differ():
    a, b = leaf_hash(b"a"), leaf_hash(b"b")
    # an internal node's preimage used as a leaf does not hash to the node
    assert leaf_hash(a + b) != node_hash(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.binary(min_size=0, max_size=16), min_size=1, max_size=64))
def test_paths_verify_against_oracle(leaves):
    t = build(leaves)
    assert t.root == oracles.merkle_root(leaves)
    for i, leaf in enumerate(leaves):
        p = auth_path(t, i)
        assert len(p.siblings) == oracles.merkle_path_len(len(leaves), i)
        assert get_merkle_root(p, leaf) == t.root
        assert path_consistent(p)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.binary(max_size=8), min_size=1, max_size=40), st.data())
def test_single_leaf_change_changes_root(leaves, data):
    i = data.draw(st.integers(0, len(leaves) - 1))
    other = data.draw(st.binary(max_size=8).filter(lambda b: b != leaves[i]))
    changed = list(leaves)
    changed[i] = other
    assert build(changed).root != build(leaves).root


def test_index_bit_flip_breaks_consistency():
    for n in range(2, 40):
        t = build([bytes([k]) for k in range(n)])
        for i in range(n):
            p = auth_path(t, i)
            for bit in range(8):
                assert not path_consistent(AuthPath(i ^ (1 << bit), p.siblings))


def test_side_flip_breaks_root():
    t = build([b"a", b"b", b"c", b"d", b"e"])
    p = auth_path(t, 2)
    flipped = tuple(PathStep(s.sibling, Side(1 - s.side)) for s in p.siblings)
    assert get_merkle_root(AuthPath(2, flipped), b"c") != t.root


def test_auth_path_encodes():
    t = build([b"a", b"b", b"c"])
    p = auth_path(t, 2)
    assert codec.decode(codec.encode(p), AuthPath) == p


def test_known_size_binds_index():
    # without the size, index 2 of a 3-leaf tree and index 1 share a shape
    p = auth_path(build([b"a", b"b", b"c"]), 2)
    assert path_consistent(AuthPath(1, p.siblings))
    for n in range(1, 40):
        t = build([bytes([k]) for k in range(n)])
        for i in range(n):
            p = auth_path(t, i)
            assert path_matches(p, n)
            assert not any(path_matches(AuthPath(j, p.siblings), n) for j in range(n + 2) if j != i)
