"""Run a whole cluster in-process over the simulated network and check the trace."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from ..agreement import GroupRegistry, fold
from ..certificate import verify_cert, verify_failure_cert
from ..client import Client, make_discovery
from ..crypto import KeyPair
from ..distance import diameter
from ..domain import ActivateGroup, ClusterConfig, DefineGroup
from ..inference import ModelStore, PerturbedExecutor, ToyExecutor
from ..messages import Endpoint as EndpointRecord, InferResponse, Outcome, ops_hash
from ..node import ZERO_COST, CostModel, Node
from .faults import CorruptResult, make_behavior
from .simnet import LinkModel, SimNet, TraceLog
from .workload import WorkloadSpec, arrivals, genesis_groups, make_version

log = logging.getLogger(__name__)


@dataclass
class Scenario:
    n: int = 4
    f: int = 1
    seed: int = 0
    behaviors: dict = field(default_factory=dict)  # node index -> behaviour spec
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    view_timeout: float = 0.5
    exec_batch_max: int = 4
    agree_batch_max: int = 25
    agree_pipeline: int = 2
    checkpoint_interval: int = 16
    honest_noise: float = 0.0  # per-node output perturbation of honest executors
    link: LinkModel = field(default_factory=LinkModel)
    cost: CostModel = ZERO_COST
    eager: bool = True
    client_timeout: Optional[float] = None
    duration: float = 120.0
    wire: bool = True
    spread_proxies: bool = True
    partitions: list = field(default_factory=list)  # simnet.Partition windows

    @property
    def faulty(self) -> set:
        return {i for i, b in self.behaviors.items() if b != "honest"}


@dataclass
class ScenarioResult:
    scenario: Scenario
    status: str
    time: float
    trace: TraceLog
    nodes: list
    config: ClusterConfig
    keys: list
    genesis: list
    client: Client
    owner: Client
    net: SimNet

    @property
    def honest(self) -> list[int]:
        return [i for i in range(self.config.n) if i not in self.scenario.faulty]

    @property
    def requests(self):
        return [p for p in self.client.finished if p.request is not None] + [
            p for p in self.client.pending.values()
        ]

    @property
    def certified(self):
        return [p for p in self.client.finished if p.certified]

    def view_changes(self) -> int:
        return max(self.nodes[i].coordinator.view for i in self.honest)


def node_keys(n: int, seed: int) -> list[KeyPair]:
    return [KeyPair.from_seed(f"node/{seed}/{i}".encode()) for i in range(n)]


def build_cluster(sc: Scenario):
    keys = node_keys(sc.n, sc.seed)
    keys.sort(key=lambda k: k.public_key)
    owner = KeyPair.from_seed(f"owner/{sc.seed}".encode())
    disc_key = KeyPair.from_seed(f"discovery/{sc.seed}".encode())
    config = ClusterConfig.build(
        [(k.public_key, f"sim://{i}") for i, k in enumerate(keys)],
        sc.f,
        view_timeout=sc.view_timeout,
        exec_batch_max=sc.exec_batch_max,
        agree_batch_max=sc.agree_batch_max,
        agree_pipeline=sc.agree_pipeline,
        checkpoint_interval=sc.checkpoint_interval,
        owners=(owner.public_key,),
    )
    discovery = make_discovery(disc_key, [EndpointRecord(n.endpoint, n.public_key) for n in config.nodes], sc.f)
    return keys, owner, disc_key, config, discovery


def run_scenario(sc: Scenario) -> ScenarioResult:
    net = SimNet(sc.seed, sc.link, wire=sc.wire)
    net.partitions = list(sc.partitions)
    keys, owner_key, _disc, config, discovery = build_cluster(sc)
    store = ModelStore()
    genesis = genesis_groups(sc.workload, store, sc.n)
    nodes = []
    for i in range(sc.n):
        behavior = make_behavior(sc.behaviors.get(i, "honest"), seed=sc.seed * 1000 + i)
        executor = ToyExecutor()
        if sc.honest_noise:
            executor = PerturbedExecutor(executor, i, sc.honest_noise, sc.seed)
        if isinstance(behavior, CorruptResult):
            executor = behavior.executor(executor)
        env = net.register(i, None)
        node = Node(config, i, keys[i], env, store, executor, behavior, sc.cost, sc.eager, discovery)
        net.handlers[i] = node.deliver
        node.coordinator.bootstrap(genesis)
        nodes.append(node)

    timeout = sc.client_timeout or 6 * sc.view_timeout
    proxies = list(range(sc.n))
    cenv = net.register("client", None)
    client = Client(KeyPair.from_seed(f"client/{sc.seed}".encode()), config.keys(), sc.f, proxies, cenv, timeout)
    net.handlers["client"] = client.receive
    oenv = net.register("owner", None)
    owner = Client(owner_key, config.keys(), sc.f, proxies, oenv, timeout)
    net.handlers["owner"] = owner.receive

    plan = arrivals(sc.workload)
    issued = [0]
    versions = {g.group_id: 1 for g in genesis}

    def certified(p):
        resp = p.response
        fields = {"ok": p.certified, "latency": p.finished - p.started, "tried": p.tried}
        if isinstance(resp, InferResponse) and resp.certificate is not None:
            fields.update(request_id=resp.request_id, outcome=int(resp.outcome),
                          view=resp.certificate.view, seq=resp.certificate.seq,
                          version=resp.group_version,
                          nodes=[r.node_index for r in resp.results])
        cenv.trace("certified", **fields)

    def issue(k: int, a):
        issued[0] += 1
        if a.kind == "request":
            first = k % sc.n if sc.spread_proxies else 0
            client.infer(a.group, a.values, on_done=certified, nonce=b"r%d" % k, first_proxy=first)
            return
        gid = a.group
        versions[gid] += 1
        group = make_version(sc.workload, store, gid, versions[gid], sc.n)

        def defined(p):
            oenv.trace("owner_ack", op="define", group=gid, ok=p.verified)
            if p.verified:
                owner.owner_op(ActivateGroup(gid, b"", b"a%d" % k, b""), on_done=lambda q: oenv.trace(
                    "owner_ack", op="activate", group=gid, ok=q.verified), first_proxy=k % sc.n)

        owner.owner_op(DefineGroup(gid, b"", b"d%d" % k, b"", group.models, group.distance),
                       on_done=defined, first_proxy=k % sc.n)

    for k, a in enumerate(plan):
        net.schedule(a.time, lambda k=k, a=a: issue(k, a))

    def finished() -> bool:
        return issued[0] == len(plan) and not client.pending and not owner.pending

    status = net.run(sc.duration, finished)
    if status == "idle":
        # nothing left to deliver or fire, yet clients still wait: a stuck protocol
        status = "deadlock"
        log.warning("deadlock at t=%.3f: %d client ops pending", net.time, len(client.pending) + len(owner.pending))
    return ScenarioResult(sc, status, net.time, net.trace, nodes, config, config.keys(), genesis,
                          client, owner, net)


# -- post-hoc oracle -----------------------------------------------------------

@dataclass
class OracleReport:
    divergent_logs: list = field(default_factory=list)
    bad_certificates: list = field(default_factory=list)
    out_of_quorum: list = field(default_factory=list)
    under_attested: list = field(default_factory=list)
    bad_attest_sets: list = field(default_factory=list)
    version_violations: list = field(default_factory=list)
    faulty_selected: list = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return not (self.divergent_logs or self.bad_certificates or self.out_of_quorum
                    or self.under_attested or self.bad_attest_sets or self.version_violations)

    def summary(self) -> dict:
        return {k: len(v) for k, v in self.__dict__.items()}


def _attest_records(trace: TraceLog, honest: set):
    """(view, seq, request_id hex) -> {node: (outcome, selected, outputs, epsilon, metric)}."""
    out: dict = {}
    for ev in trace.of_kind("attest"):
        node = int(ev.actor)
        if node not in honest:
            continue
        body = json.loads(ev.body)
        for rid, outcome, selected, outputs, eps, metric in body["decisions"]:
            out.setdefault((body["view"], body["seq"], rid), {})[node] = (outcome, selected, outputs, eps, metric)
    return out


def check_run(result: ScenarioResult) -> OracleReport:
    rep = OracleReport()
    n, f = result.config.n, result.config.f
    honest = set(result.honest)
    faulty = set(result.scenario.faulty)
    logs = {i: result.nodes[i].coordinator.log for i in honest}

    # (a) honest nodes never order different batches at one sequence number
    seqs = set().union(*(set(l) for l in logs.values())) if logs else set()
    for s in sorted(seqs):
        hashes = {ops_hash(l[s].ops) for l in logs.values() if s in l}
        if len(hashes) > 1:
            rep.divergent_logs.append(s)

    # the version fold replayed from genesis, per honest node
    replay: dict[int, dict] = {}
    for i, l in logs.items():
        reg = GroupRegistry({}, result.config.owners)
        for g in result.genesis:
            reg.versions.setdefault(g.group_id, []).append(g)
        seen = set()
        per_seq = {}
        for s in sorted(l):
            entries = fold(reg, l[s].ops, lambda k: k in seen)
            for e in entries:
                if e.outcome != Outcome.DUPLICATE:
                    seen.add(e.op.key)
            per_seq[s] = ({e.op.key: e for e in entries}, reg.digest())
        replay[i] = per_seq
    for s in sorted(seqs):
        digests = {replay[i][s][1] for i in honest if s in replay[i]}
        if len(digests) > 1:
            rep.version_violations.append(("fold differs", s))

    attests = _attest_records(result.trace, honest)
    for key, by_node in attests.items():
        for node, (outcome, selected, outputs, eps, metric) in by_node.items():
            if outcome != int(Outcome.OK):
                continue
            if len(selected) < n - f or diameter(metric, outputs) > eps:
                rep.bad_attest_sets.append((key, node))
            bad = faulty & set(selected)
            if bad:
                rep.faulty_selected.append((key, node, sorted(bad)))

    for p in result.client.finished:
        resp = p.response
        if not p.certified or not isinstance(resp, InferResponse):
            continue
        req = p.request
        cert = resp.certificate
        if resp.outcome != Outcome.OK:
            if not verify_failure_cert(req, cert, result.keys, f):
                rep.bad_certificates.append(req.request_id)
            continue
        if not verify_cert(req, resp.results, cert, result.keys, f):
            rep.bad_certificates.append(req.request_id)
            continue
        rid = req.request_id.hex()
        decisions = attests.get((cert.view, cert.seq, rid), {})
        for res in resp.results:
            attesters = {a.attester for a in cert.attestations if a.subject == res.node_index}
            if len(attesters) < f + 1:
                rep.under_attested.append((rid, res.node_index))
            honest_att = attesters & honest
            if not honest_att:
                rep.under_attested.append((rid, res.node_index, "no honest attester"))
            if not any(res.node_index in decisions.get(j, (None, ()))[1] for j in honest_att):
                rep.out_of_quorum.append((rid, res.node_index))
        # version at the ordering point, from every honest replay holding that seq
        for i in honest:
            entry_map = replay[i].get(cert.seq, ({}, b""))[0]
            e = entry_map.get(p.op.key)
            if e is None:
                continue
            if e.version != resp.group_version or any(r.group_version != e.version for r in resp.results):
                rep.version_violations.append((rid, i, e.version, resp.group_version))
    return rep
