"""
Push-based replication along the Group Path, storage challenges, periodic
audit rounds and repair

Holders initiate every push: the client only tells a holder whom to push to.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from config.settings import AUDIT_PERIOD_S, CHALLENGE_SIZE, REPLICATION_FACTOR
from src.errors import BadProof, ObjectLost, ProofTimeout, UnreachableNode
from src.event_logger import logger
from src.merkle_store import verify_object
from src.routing import group_path, hex_to_bits
from src.storage_node import NonceBook, StorageClient, storage_proof
from src.tree_overlay import NodeInfo, node_sort_key


@dataclass(frozen=True)
class ReplicationPolicy:
    r: int = REPLICATION_FACTOR
    audit_period: float = AUDIT_PERIOD_S
    challenge_size: int = CHALLENGE_SIZE

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"replication factor must be >= 1, got {self.r}")
        if self.challenge_size < 1:
            raise ValueError("challenge size must be positive")


@dataclass(frozen=True)
class StorageProof:
    object_ref: str
    nonce: bytes
    proof: bytes

    def matches(self, data: bytes) -> bool:
        return self.proof == storage_proof(self.nonce, data)


@dataclass
class ReplicationResult:
    object_ref: str
    holders: List[NodeInfo]
    wanted: int  # min(r, |group path|)
    path_length: int

    @property
    def holder_ids(self) -> Set[str]:
        return {n.node_id for n in self.holders}

    @property
    def degraded(self) -> bool:
        return len(self.holders) < self.wanted or self.path_length < self.wanted


@dataclass(frozen=True)
class AuditEntry:
    object_ref: str
    holder: str
    ok: bool
    reason: str = ''
    auditor: str = ''


@dataclass
class AuditReport:
    checked: List[AuditEntry] = field(default_factory=list)
    repairs: List[Tuple[str, str]] = field(default_factory=list)  # (object, new holder)
    lost: List[str] = field(default_factory=list)
    dead: List[str] = field(default_factory=list)
    holders: Dict[str, List[str]] = field(default_factory=dict)  # after repair

    @property
    def failures(self) -> List[AuditEntry]:
        return [e for e in self.checked if not e.ok]

    def summary(self) -> Dict[str, Any]:
        return {
            'checked': len(self.checked),
            'failures': len(self.failures),
            'repairs': len(self.repairs),
            'lost': len(self.lost),
            'dead': len(self.dead),
        }


def _path(routing_key: str, members: Iterable[NodeInfo]) -> List[NodeInfo]:
    return group_path(hex_to_bits(routing_key), members)


def replication_targets(routing_key: str, members: Iterable[NodeInfo],
                        exclude: Iterable[str] = ()) -> List[NodeInfo]:
    """Deepest Group Path nodes first, skipping excluded ids"""
    skip = set(exclude)
    return [n for n in reversed(_path(routing_key, members)) if n.node_id not in skip]


def replicate(client: StorageClient, object_ref: str, primary: NodeInfo,
              policy: ReplicationPolicy, members: Sequence[NodeInfo],
              receipt: Optional[Dict[str, Any]] = None,
              routing_key: Optional[str] = None) -> ReplicationResult:
    """
    Have the primary holder push the object to the deepest Group Path nodes
    until r nodes hold it

    Args:
        routing_key: hash whose Group Path the object belongs to; defaults to
            the object id (manifests and capsules use their file's root)
    """
    key = routing_key or object_ref
    path = _path(key, members)
    wanted = min(policy.r, len(path))
    holders = [primary]
    for target in reversed(path):
        if len(holders) >= policy.r:
            break
        if target.node_id == primary.node_id:
            continue
        try:
            done = client.replicate(primary, object_ref, target, receipt)
        except UnreachableNode as e:
            logger.logger.debug(f"Replication of {object_ref[:12]} via {primary.short_id} failed: {e}")
            continue
        if done.get('ok'):
            holders.append(target)
        else:
            logger.logger.debug(f"{target.short_id} refused replica {object_ref[:12]}: {done.get('error')}")

    result = ReplicationResult(object_ref, holders, wanted, len(path))
    if result.degraded:
        logger.log_event('replication_degraded', {'object': object_ref, 'holders': len(holders),
                                                  'path_length': len(path), 'r': policy.r})
    return result


def challenge(client: StorageClient, holder: NodeInfo, object_ref: str, nonce: bytes,
              reference: bytes, book: NonceBook) -> StorageProof:
    """
    Challenge one holder and check its proof against the verifier's bytes

    Raises:
        ReplayedNonce: nonce already used for this (object, holder)
        ProofTimeout: holder did not answer
        BadProof: answer missing or wrong
    """
    book.issue(object_ref, holder.node_id, nonce)
    try:
        body = client.challenge(holder, object_ref, nonce)
    except UnreachableNode as e:
        raise ProofTimeout(f"{holder.short_id} did not answer challenge for {object_ref[:12]}") from e
    if not body.get('found'):
        raise BadProof(f"{holder.short_id} does not hold {object_ref[:12]}")
    proof = StorageProof(object_ref, nonce, body.get('proof', b''))
    if not proof.matches(reference):
        raise BadProof(f"{holder.short_id} returned a wrong proof for {object_ref[:12]}")
    return proof


def repair(client: StorageClient, object_ref: str, failed_holder: Optional[NodeInfo],
           members: Sequence[NodeInfo], healthy: Sequence[NodeInfo],
           routing_key: Optional[str] = None, dead: Iterable[str] = ()) -> Optional[NodeInfo]:
    """
    Push a fresh copy from a healthy holder to the deepest path node that
    does not hold a good copy; None when no such node is reachable

    Raises:
        ObjectLost: no healthy holder remains
    """
    if not healthy:
        raise ObjectLost(f"no healthy holder left for {object_ref[:12]}")
    down = set(dead)
    live = [m for m in members if m.node_id not in down]
    holding = {n.node_id for n in healthy}
    source = healthy[0]
    for target in replication_targets(routing_key or object_ref, live, exclude=holding):
        try:
            done = client.replicate(source, object_ref, target, overwrite=True)
        except UnreachableNode:
            continue
        if done.get('ok'):
            logger.log_event('object_repaired', {
                'object': object_ref, 'source': source.node_id, 'target': target.node_id,
                'replaced': failed_holder.node_id if failed_holder else None,
            })
            return target
    return None


def _check_single(client: StorageClient, object_ref: str, holder: NodeInfo) -> AuditEntry:
    """Fallback when no peer replica exists: fetch and hash"""
    try:
        fetched = client.fetch(holder, object_ref)
    except UnreachableNode:
        return AuditEntry(object_ref, holder.node_id, False, 'unreachable')
    if fetched is None:
        return AuditEntry(object_ref, holder.node_id, False, 'object missing')
    if not verify_object(object_ref, fetched[1]):
        return AuditEntry(object_ref, holder.node_id, False, 'hash mismatch')
    return AuditEntry(object_ref, holder.node_id, True)


def _audit_holder(client: StorageClient, object_ref: str, holder: NodeInfo,
                  auditors: Sequence[NodeInfo]) -> AuditEntry:
    for auditor in auditors:
        if auditor.node_id == holder.node_id:
            continue
        try:
            verdict = client.audit_peer(auditor, object_ref, holder)
        except UnreachableNode:
            continue
        if not verdict.get('auditor_ok'):
            continue
        return AuditEntry(object_ref, holder.node_id, bool(verdict.get('ok')),
                          verdict.get('reason', ''), auditor.node_id)
    return _check_single(client, object_ref, holder)


def audit_round(client: StorageClient, policy: Optional[ReplicationPolicy] = None,
                members: Optional[Sequence[NodeInfo]] = None) -> AuditReport:
    """
    Challenge every (object, holder) pair once and repair what failed

    The shallowest holder audits the others and the second shallowest audits
    it; objects with a single holder are fetched and hashed by the client.
    Afterwards each object is topped up to min(r, live path length) holders.
    """
    policy = policy or ReplicationPolicy()
    members = sorted({m.node_id: m for m in (members if members is not None else client.members())}.values(),
                     key=node_sort_key)
    report = AuditReport()
    stats = client.stats_many(members)
    report.dead = sorted(node_id for node_id, body in stats.items() if body is None)
    live = [m for m in members if m.node_id not in report.dead]
    by_id = {m.node_id: m for m in live}

    holdings: Dict[str, Set[str]] = {}
    keys: Dict[str, str] = {}
    for node_id, body in sorted(stats.items()):
        if body is None:
            continue
        for object_ref, key in body.get('inventory', []):
            holdings.setdefault(object_ref, set()).add(node_id)
            keys.setdefault(object_ref, key)

    for object_ref in sorted(holdings):
        holders = sorted((by_id[i] for i in holdings[object_ref]), key=node_sort_key)
        healthy: List[NodeInfo] = []
        failed: List[NodeInfo] = []
        for holder in holders:
            entry = _audit_holder(client, object_ref, holder, holders)
            report.checked.append(entry)
            (healthy if entry.ok else failed).append(holder)

        path_ids = {n.node_id for n in _path(keys[object_ref], live)}
        wanted = min(policy.r, len(path_ids))
        on_path = [h for h in healthy if h.node_id in path_ids]
        while len(on_path) < wanted:
            try:
                new = repair(client, object_ref, failed[0] if failed else None, live, healthy,
                             routing_key=keys[object_ref], dead=report.dead)
            except ObjectLost:
                report.lost.append(object_ref)
                logger.log_event('object_lost', {'object': object_ref})
                break
            if new is None:
                break
            if failed:
                failed.pop(0)
            healthy.append(new)
            on_path.append(new)
            report.repairs.append((object_ref, new.node_id))
        report.holders[object_ref] = sorted(h.node_id for h in healthy)

    logger.log_event('audit_round', report.summary())
    return report

