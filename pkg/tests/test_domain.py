import os
import random
from dataclasses import replace

import pytest

from bftinfer import codec
from bftinfer.crypto import KeyPair
from bftinfer.distance import DistanceDescriptor, Metric
from bftinfer.domain import (
    ClusterConfig,
    GroupStatus,
    ModelDescriptor,
    ModelGroup,
    NodeIdentity,
    assigned_models,
    canonical_request_id,
    make_request,
    primary_index,
)

import oracles


def cfg(n, f=None):
    keys = [KeyPair.from_seed(b"dom%d" % i).public_key for i in range(n)]
    return ClusterConfig.build([(k, f"sim://{i}") for i, k in enumerate(keys)], (n - 1) // 3 if f is None else f)


def group(k, version=1):
    models = tuple(ModelDescriptor(f"mem://m{i}", 2, 2, bytes([i]) * 32) for i in range(k))
    return ModelGroup("g", version, models, DistanceDescriptor(Metric.CHEBYSHEV, 0.1))


def test_request_id_definition():
    assert canonical_request_id(b"", b"a") == oracles.sha256(b"\x1fa")
    assert canonical_request_id(b"c", b"a") == canonical_request_id(b"c", b"a")


def test_request_id_needs_nonce():
    with pytest.raises(ValueError):
        canonical_request_id(b"c", b"")


def test_request_ids_do_not_collide():
    rng = random.Random(5)
    nonces = {rng.randbytes(12) for _ in range(10_000)}
    assert len({canonical_request_id(b"client", n) for n in nonces}) == len(nonces)


@pytest.mark.parametrize("view,n,expected", [(0, 4, 0), (5, 4, 1), (7, 7, 0)])
def test_primary_index(view, n, expected):
    assert primary_index(view, cfg(n)) == expected


def test_primary_rotation_period():
    c = cfg(7)
    assert all(primary_index(v + 7, c) == primary_index(v, c) for v in range(50))


def test_config_invariants():
    with pytest.raises(ValueError):
        cfg(3, f=1)
    keys = sorted(KeyPair.from_seed(b"x%d" % i).public_key for i in range(4))
    with pytest.raises(ValueError):
        ClusterConfig(tuple(NodeIdentity(k, "e", i) for i, k in enumerate(reversed(keys))), 1)
    with pytest.raises(ValueError):
        ClusterConfig(tuple(NodeIdentity(k, "e", i) for i, k in enumerate([keys[0]] * 4)), 1)
    with pytest.raises(ValueError):
        ClusterConfig.build([(k, "e") for k in keys], 1, exec_batch_max=0)


def test_config_sorts_members():
    c = cfg(4)
    assert c.keys() == sorted(c.keys())
    assert [n.index for n in c.nodes] == [0, 1, 2, 3]


def test_group_invariants():
    with pytest.raises(ValueError):
        ModelGroup("g", 0, group(1).models, DistanceDescriptor(Metric.CHEBYSHEV, 0.1))
    mixed = (ModelDescriptor("a", 2, 2, b"\x00" * 32), ModelDescriptor("b", 3, 2, b"\x00" * 32))
    with pytest.raises(ValueError):
        ModelGroup("g", 1, mixed, DistanceDescriptor(Metric.CHEBYSHEV, 0.1))
    with pytest.raises(ValueError):
        ModelDescriptor("a", 0, 1, b"\x00" * 32)


def test_status_transitions():
    g = group(2)
    assert g.with_status(GroupStatus.ACTIVE).with_status(GroupStatus.RETIRED).status == GroupStatus.RETIRED
    assert g.with_status(GroupStatus.RETIRED).status == GroupStatus.RETIRED
    with pytest.raises(ValueError):
        g.with_status(GroupStatus.ACTIVE).with_status(GroupStatus.DEFINED)
    with pytest.raises(ValueError):
        g.with_status(GroupStatus.RETIRED).with_status(GroupStatus.ACTIVE)


def _assignment(d, k):
    g = group(k)
    c = cfg(max(d, 1), f=0)
    return g, [assigned_models(d, g, c.nodes[i]) for i in range(d)]


def test_assignment_bijection():
    g, parts = _assignment(4, 4)
    assert [len(p) for p in parts] == [1, 1, 1, 1]
    assert {m for p in parts for m in p} == set(g.models)


def test_assignment_two_nodes_four_models():
    g, parts = _assignment(2, 4)
    assert [len(p) for p in parts] == [2, 2]
    assert not set(parts[0]) & set(parts[1])
    assert set(parts[0]) | set(parts[1]) == set(g.models)


def test_assignment_replicates_small_groups():
    g, parts = _assignment(4, 2)
    assert all(parts)
    counts = {m: sum(m in p for p in parts) for m in g.models}
    assert counts == {g.models[0]: 2, g.models[1]: 2}


@pytest.mark.parametrize("d", range(1, 9))
@pytest.mark.parametrize("k", range(1, 9))
def test_assignment_covers(d, k):
    g, parts = _assignment(d, k)
    assert all(parts)
    assert {m for p in parts for m in p} == set(g.models)
    if k >= d:
        assert sum(len(p) for p in parts) == k  # disjoint
        assert max(len(p) for p in parts) <= -(-k // d)


def test_request_signature():
    key = KeyPair.from_seed(b"req")
    req = make_request(key, b"n", "g", [1, 2], epsilon=0.3)
    assert req.signature_valid()
    assert not replace(req, input=(1.0, 2.5)).signature_valid()
    assert not replace(req, epsilon_override=-1.0).signature_valid()
    assert not replace(req, nonce=b"m").signature_valid()


def test_dedup_key_includes_epsilon():
    key = KeyPair.from_seed(b"dd")
    a = make_request(key, b"n", "g", [1.0])
    b = make_request(key, b"n", "g", [1.0], epsilon=0.1)
    assert a.request_id == b.request_id
    assert a.dedup_key != b.dedup_key


def test_domain_values_round_trip():
    g = group(3).with_status(GroupStatus.ACTIVE)
    assert codec.decode(codec.encode(g), ModelGroup) == g
    c = cfg(4)
    assert codec.decode(codec.encode(c), ClusterConfig) == c
    d = ModelDescriptor("file:///x", 2, 3, os.urandom(32))
    assert codec.decode(codec.encode(d), ModelDescriptor) == d
