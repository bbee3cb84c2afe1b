"""Inference certificates: assembly on the proxy side, verification on the client side.

A certificate for request ``r`` ordered at ``(v, n)`` carries

* ``result_sigs``: for every covered result's node, and always for the
  primary, the signed R root from its PRE-PREPARE or PREPARE;
* ``result_paths``: the path from each covered result's leaf to that R root;
* ``commit_sigs``: the signed A root of every attesting node that is used;
* ``attestations``: for each covered result, the paths from the attestation
  leaf to the A roots of at least ``f + 1`` attesters.

The hash of the primary's PRE-PREPARE is rebuilt from ``(v, n, H(O), R_p)``
and its signature, so every PREPARE and COMMIT signature can be checked
without the ops themselves.

Verification is total: anything malformed returns False.
"""

from __future__ import annotations

from typing import Optional

from . import merkle
from .crypto import digest
from .domain import InferenceRequest, InferenceResult
from .messages import (
    Attestation,
    AttestKind,
    BatchAttestation,
    Commit,
    CommitSig,
    InferenceCertificate,
    Outcome,
    Prepare,
    PrePrepare,
    PrePrepareBundle,
    ResultAttestation,
    ResultPath,
    ResultSig,
    StatusAttestation,
    attest_leaf_bytes,
    msg_sig_valid,
    pre_prepare_hash,
    request_digest,
    result_leaf,
)


# -- assembly (proxy) -------------------------------------------------------

def _result_sig(node: int, bundle) -> ResultSig:
    msg = bundle.pre_prepare if isinstance(bundle, PrePrepareBundle) else bundle.prepare
    return ResultSig(node, msg.r_root, msg.r_count, msg.sig)


def _commit_sig(commit: Commit) -> CommitSig:
    return CommitSig(commit.node, commit.a_root, commit.a_count, commit.sig)


def assemble(slot, request: InferenceRequest, n: int, f: int):
    """Build ``(outcome, results, certificate)`` from a slot's messages and trees.

    Returns None while the held COMMITs are not yet enough for any certificate.
    """
    pp = slot.pp
    if pp is None or not slot.entries:
        return None
    primary = pp.view % n
    primary_sig = ResultSig(primary, pp.r_root, pp.r_count, pp.sig)
    rid = request.request_id
    entry = next((e for e in slot.entries
                  if e.request is not None and e.request == request and e.outcome != Outcome.DUPLICATE), None)
    if entry is None:
        return None
    if entry.outcome == Outcome.OK:
        found = _assemble_ok(slot, rid, n, f, primary_sig)
        if found is not None:
            return found
    for outcome in (Outcome.REJECTED, Outcome.NO_QUORUM):
        cert = _assemble_failure(slot, request, outcome, f, primary_sig)
        if cert is not None:
            return outcome, (), cert
    return None


def _attesters(slot, node: int, src, idx: int):
    wanted = {
        BatchAttestation(node, src.r_root): AttestKind.BATCH,
        ResultAttestation(node, digest(src.leaves[idx])): AttestKind.RESULT,
    }
    out = []
    for j in sorted(slot.commits):
        rec = slot.commits[j]
        for k, leaf in enumerate(rec.leaves):
            kind = wanted.get(leaf)
            if kind is not None:
                out.append((j, kind, merkle.auth_path(rec.tree, k)))
                break
    return out


def _assemble_ok(slot, rid: bytes, n: int, f: int, primary_sig: ResultSig):
    covered = []
    for node in sorted(slot.sources):
        src = slot.sources[node]
        if rid not in src.results:
            continue
        res, idx = src.results[rid]
        att = _attesters(slot, node, src, idx)
        if len(att) >= f + 1:
            covered.append((node, src, res, idx, att))
    if len(covered) < n - f:
        return None
    versions = {res.group_version for _, _, res, _, _ in covered}
    if len(versions) != 1:
        return None
    results, sigs, paths, attestations, commit_nodes = [], {primary_sig.node: primary_sig}, [], [], set()
    for node, src, res, idx, att in covered:
        results.append(res)
        sigs[node] = _result_sig(node, src.bundle)
        paths.append(ResultPath(node, merkle.auth_path(src.tree, idx)))
        for j, kind, path in att:
            attestations.append(Attestation(node, j, kind, path))
            commit_nodes.add(j)
    commit_sigs = tuple(_commit_sig(slot.commits[j].commit) for j in sorted(commit_nodes))
    pp = slot.pp
    cert = InferenceCertificate(
        view=pp.view,
        seq=pp.seq,
        ops_hash=pp.ops_hash,
        outcome=Outcome.OK,
        result_sigs=tuple(sigs[k] for k in sorted(sigs)),
        commit_sigs=commit_sigs,
        result_paths=tuple(paths),
        attestations=tuple(attestations),
    )
    return Outcome.OK, tuple(results), cert


def _assemble_failure(slot, request, outcome: Outcome, f: int, primary_sig: ResultSig):
    leaf = StatusAttestation(request_digest(request), outcome)
    found = []
    for j in sorted(slot.commits):
        rec = slot.commits[j]
        for k, x in enumerate(rec.leaves):
            if x == leaf:
                found.append((j, merkle.auth_path(rec.tree, k)))
                break
    if len(found) < f + 1:
        return None
    pp = slot.pp
    return InferenceCertificate(
        view=pp.view,
        seq=pp.seq,
        ops_hash=pp.ops_hash,
        outcome=outcome,
        result_sigs=(primary_sig,),
        commit_sigs=tuple(_commit_sig(slot.commits[j].commit) for j, _ in found),
        result_paths=(),
        attestations=tuple(Attestation(j, j, AttestKind.STATUS, path) for j, path in found),
    )


# -- verification (client) --------------------------------------------------

def _strictly_sorted(items) -> bool:
    return all(a < b for a, b in zip(items, items[1:]))


def _check_path(path, leaf: bytes, root: bytes, count: int) -> bool:
    return (
        isinstance(path, merkle.AuthPath)
        and merkle.path_matches(path, count)
        and merkle.get_merkle_root(path, leaf) == root
    )


def _header(cert: InferenceCertificate, keys, f: int):
    """Common checks. Returns (h_pp, result_sigs by node, commit_sigs by node) or None."""
    n = len(keys)
    if f < 0 or n < 3 * f + 1 or not isinstance(cert, InferenceCertificate):
        return None
    rs_nodes = [s.node for s in cert.result_sigs]
    cs_nodes = [s.node for s in cert.commit_sigs]
    if not _strictly_sorted(rs_nodes) or not _strictly_sorted(cs_nodes):
        return None
    if any(not 0 <= k < n for k in rs_nodes + cs_nodes):
        return None
    rsigs = {s.node: s for s in cert.result_sigs}
    csigs = {s.node: s for s in cert.commit_sigs}
    primary = cert.view % n
    ps = rsigs.get(primary)
    if ps is None:
        return None
    pp = PrePrepare(cert.view, cert.seq, cert.ops_hash, ps.r_root, ps.r_count, ps.sig)
    if not msg_sig_valid(pp, keys[primary]):
        return None
    h_pp = pre_prepare_hash(pp)
    for node, s in csigs.items():
        if not msg_sig_valid(Commit(cert.view, cert.seq, h_pp, node, s.a_root, s.a_count, s.sig), keys[node]):
            return None
    return h_pp, rsigs, csigs


def verify_cert(
    request: InferenceRequest,
    results,
    cert: InferenceCertificate,
    keys,
    f: int,
) -> bool:
    """Check that at least ``N - f`` results each carry ``f + 1`` valid attestations."""
    try:
        return _verify_cert(request, tuple(results), cert, list(keys), f)
    except (TypeError, ValueError, AttributeError, IndexError, KeyError):
        return False


def _verify_cert(request, results, cert, keys, f) -> bool:
    n = len(keys)
    if len(results) < n - f:
        return False
    if cert.outcome != Outcome.OK:
        return False
    header = _header(cert, keys, f)
    if header is None:
        return False
    h_pp, rsigs, csigs = header
    nodes = [r.node_index for r in results]
    if not _strictly_sorted(nodes) or any(not isinstance(r, InferenceResult) for r in results):
        return False
    primary = cert.view % n
    if set(rsigs) != set(nodes) | {primary}:
        return False
    if [p.node for p in cert.result_paths] != nodes:
        return False
    if len({(r.group_id, r.group_version) for r in results}) != 1:
        return False
    att_keys = [(a.subject, a.attester) for a in cert.attestations]
    if not _strictly_sorted(att_keys):
        return False
    by_subject: dict[int, list[Attestation]] = {}
    for a in cert.attestations:
        by_subject.setdefault(a.subject, []).append(a)
    if set(by_subject) != set(nodes):
        return False
    if {a.attester for a in cert.attestations} != set(csigs):
        return False
    for res, rp in zip(results, cert.result_paths):
        i = res.node_index
        if res.request_id != request.request_id or res.group_id != request.group_id:
            return False
        rs = rsigs[i]
        leaf = result_leaf(request, res)
        if not _check_path(rp.path, leaf, rs.r_root, rs.r_count):
            return False
        if i != primary:
            prep = Prepare(cert.view, cert.seq, h_pp, i, rs.r_root, rs.r_count, rs.sig)
            if not msg_sig_valid(prep, keys[i]):
                return False
        atts = by_subject[i]
        if len(atts) <= f:
            return False
        for a in atts:
            if a.kind == AttestKind.BATCH:
                a_leaf = attest_leaf_bytes(BatchAttestation(i, rs.r_root))
            elif a.kind == AttestKind.RESULT:
                a_leaf = attest_leaf_bytes(ResultAttestation(i, digest(leaf)))
            else:
                return False
            if not _check_path(a.path, a_leaf, csigs[a.attester].a_root, csigs[a.attester].a_count):
                return False
    return True


def verify_failure_cert(request: InferenceRequest, cert: InferenceCertificate, keys, f: int) -> bool:
    """Check that ``f + 1`` nodes attested the same failure outcome for ``request``."""
    try:
        return _verify_failure(request, cert, list(keys), f)
    except (TypeError, ValueError, AttributeError, IndexError, KeyError):
        return False


def _verify_failure(request, cert, keys, f) -> bool:
    if cert.outcome not in (Outcome.NO_QUORUM, Outcome.REJECTED):
        return False
    if cert.result_paths:
        return False
    header = _header(cert, keys, f)
    if header is None:
        return False
    _h_pp, rsigs, csigs = header
    if set(rsigs) != {cert.view % len(keys)}:
        return False
    atts = cert.attestations
    if len(atts) <= f:
        return False
    if [a.attester for a in atts] != sorted(csigs) or any(a.subject != a.attester for a in atts):
        return False
    leaf = attest_leaf_bytes(StatusAttestation(request_digest(request), cert.outcome))
    for a in atts:
        if a.kind != AttestKind.STATUS or not _check_path(a.path, leaf, csigs[a.attester].a_root, csigs[a.attester].a_count):
            return False
    return True
