import random
from dataclasses import replace

import pytest

from bftinfer.crypto import KeyPair
from bftinfer.domain import GroupStatus, ModelDescriptor, make_request
from bftinfer.inference import (
    InferenceEngine,
    LinearToyModel,
    LoadError,
    ModelStore,
    PerturbedExecutor,
    SubmitError,
    ToyExecutor,
)

from conftest import make_config, make_group

CLIENT = KeyPair.from_seed(b"inf-client")


def engine(store, index=0, eager=True, **params):
    config, _ = make_config(4, **params)
    return InferenceEngine(config, index, store, ToyExecutor(), eager=eager)


def req(k, group="g", dims=3):
    return make_request(CLIENT, b"r%d" % k, group, [0.1 * k] * dims)


def drain(eng):
    batches = []
    while (b := eng.next_batch(force=True)) is not None:
        batches.append(b)
        eng.execute_batch(b)
    return batches


def test_identity_model():
    m = LinearToyModel.identity(3)
    assert m.apply((1.0, -2.0, 0.5)) == (1.0, -2.0, 0.5)


def test_zero_weights_give_bias():
    m = LinearToyModel(2, 3, (0.0,) * 6, (0.5, -1.0, 2.0))
    assert m.apply((7.0, 9.0)) == (0.5, -1.0, 2.0)


def test_softmax_outputs_sum_to_one():
    m = LinearToyModel.random(random.Random(1), 4, 5, softmax=True)
    y = m.apply((0.3, -0.2, 1.0, 0.0))
    assert sum(y) == pytest.approx(1.0) and all(v > 0 for v in y)


def test_batch_equals_loop():
    rng = random.Random(2)
    m = LinearToyModel.random(rng, 5, 3)
    xs = [tuple(rng.uniform(-1, 1) for _ in range(5)) for _ in range(17)]
    assert ToyExecutor().run(m, xs) == [m.apply(x) for x in xs]


def test_model_file_round_trip():
    m = LinearToyModel.random(random.Random(3), 2, 2)
    assert LinearToyModel.from_bytes(m.to_bytes()) == m
    assert m.describe("u").weights_digest == m.digest


def test_each_node_loads_its_share(store):
    g = make_group(store)
    for i in range(4):
        e = engine(store, i)
        e.load_group(g)
        (desc, _model), = e.resident[("g", 1)].models
        assert desc == g.models[i]


def test_redefine_keeps_both_versions(store):
    e = engine(store)
    e.load_group(make_group(store, version=1))
    e.load_group(make_group(store, version=2))
    assert e.live_versions("g") == [1, 2]
    with pytest.raises(LoadError):
        e.load_group(make_group(store, version=2))


def test_digest_mismatch_rejected(store):
    g = make_group(store)
    bad = replace(g, models=(replace(g.models[0], weights_digest=b"\x00" * 32),) + g.models[1:])
    e = engine(store)
    with pytest.raises(LoadError):
        e.load_group(bad)
    assert "g" not in e.groups


def test_missing_file_rejected(store):
    g = make_group(store)
    g = replace(g, models=(ModelDescriptor("mem://nowhere", 3, 2, b"\x01" * 32),) + g.models[1:])
    with pytest.raises(LoadError):
        engine(store).load_group(g)


def test_file_urls(tmp_path):
    m = LinearToyModel.random(random.Random(4), 3, 2)
    path = tmp_path / "m.bin"
    path.write_bytes(m.to_bytes())
    store = ModelStore()
    assert store.fetch(str(path)) == m.to_bytes()
    assert store.fetch(path.as_uri()) == m.to_bytes()


def test_one_result_per_live_version(store):
    e = engine(store)
    e.load_group(make_group(store, version=1).with_status(GroupStatus.ACTIVE))
    r = req(1)
    assert e.submit(r) == 1
    drain(e)
    assert e.results.versions(r.request_id) == [1]
    e.load_group(make_group(store, version=2))
    r2 = req(2)
    assert e.submit(r2) == 2
    drain(e)
    assert e.results.versions(r2.request_id) == [1, 2]
    assert {e.results.get(r2.request_id, v).group_version for v in (1, 2)} == {1, 2}


def test_eight_requests_make_two_batches(store):
    e = engine(store)
    e.load_group(make_group(store))
    for k in range(8):
        e.submit(req(k))
    full = []
    while (b := e.next_batch()) is not None:
        full.append(b)
    assert [len(b.requests) for b in full] == [4, 4]
    assert e.next_batch(force=True) is None


def test_submit_errors(store):
    e = engine(store)
    with pytest.raises(SubmitError):
        e.submit(req(1))
    e.load_group(make_group(store))
    with pytest.raises(SubmitError):
        e.submit(req(1, dims=2))
    with pytest.raises(SubmitError):
        e.submit(replace(req(1), input=(9.0, 9.0, 9.0)))


def test_retire_frees_and_rejects(store):
    e = engine(store)
    e.load_group(make_group(store))
    e.submit(req(1))
    e.set_status("g", 1, GroupStatus.RETIRED)
    assert ("g", 1) not in e.resident
    assert e.pending() == 0
    with pytest.raises(SubmitError):
        e.submit(req(2))


def test_agree_execute_mode_waits_for_ensure(store):
    e = engine(store, eager=False)
    e.load_group(make_group(store))
    r = req(1)
    assert e.submit(r) == 0
    assert e.pending() == 0
    assert e.ensure(r, 1)
    assert e.pending() == 1
    drain(e)
    assert e.results.has(r.request_id, 1)


def test_failing_executor_gives_missing_results(store):
    class Broken:
        def run(self, model, inputs):
            raise RuntimeError("device lost")

    config, _ = make_config(4)
    e = InferenceEngine(config, 0, store, Broken())
    e.load_group(make_group(store))
    r = req(1)
    e.submit(r)
    drain(e)
    assert e.results.has(r.request_id, 1) and e.results.get(r.request_id, 1) is None


def test_perturbation_is_deterministic_and_bounded():
    m = LinearToyModel.identity(4)
    xs = [(0.1, 0.2, 0.3, 0.4)]
    a = PerturbedExecutor(ToyExecutor(), 1, 0.01, seed=5).run(m, xs)
    b = PerturbedExecutor(ToyExecutor(), 1, 0.01, seed=5).run(m, xs)
    c = PerturbedExecutor(ToyExecutor(), 2, 0.01, seed=5).run(m, xs)
    assert a == b and a != c
    assert max(abs(u - v) for u, v in zip(a[0], xs[0])) <= 0.01
