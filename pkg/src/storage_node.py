"""
Storage node: the overlay state machine plus an object store and handlers
for every directed APP request, and a client for issuing those requests
over any StorageNetwork (simulator or TCP)
"""
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

from config.settings import CHALLENGE_SIZE, CONVENTION_OBJECT_SIZE, NEIGHBOR_K
from src.crypto_pre import RandomSource, keygen
from src.errors import FrameError, ObjectTooLarge, ReplayedNonce, StoreFull
from src.event_logger import logger
from src.merkle_store import ObjectStore, split_alias, verify_object
from src.routing import best_candidate
from src.tree_overlay import (
    AppPayload, AppTag, NodeInfo, OverlayMessage, OverlayNode, Outbound, RedundancyConfig
)
from src.utils import PerformanceMonitor, TimeCounter, sha256, sha256_hex


def storage_proof(nonce: bytes, data: bytes) -> bytes:
    return sha256(nonce + data)


def node_identity(seed: int, index: int, host: str = '', port: int = 0) -> NodeInfo:
    """Reproducible identity for the index-th node of a seeded deployment"""
    keys = keygen(seed=f"node/{seed}/{index}")
    return NodeInfo(keys.public.digest(), host, port)


class NonceBook:
    """Remembers issued nonces per (object, holder) so none is ever reused"""

    def __init__(self):
        self.issued: Dict[Tuple[str, str], set] = {}

    def issue(self, object_ref: str, holder_id: str, nonce: bytes) -> None:
        used = self.issued.setdefault((object_ref, holder_id), set())
        if nonce in used:
            raise ReplayedNonce(f"nonce already used for {object_ref[:12]} at {holder_id[:8]}")
        used.add(nonce)

    def fresh(self, rng: RandomSource, object_ref: str, holder_id: str,
              size: int = CHALLENGE_SIZE) -> bytes:
        while True:
            nonce = rng.random_bytes(size)
            try:
                self.issue(object_ref, holder_id, nonce)
                return nonce
            except ReplayedNonce:
                continue


@dataclass
class Relay:
    """A request this node forwarded on behalf of a client"""
    client: str
    request: AppPayload
    kind: str
    peer: NodeInfo
    object_ref: str
    expected: bytes = b''


class StorageNode(OverlayNode):
    """
    Overlay node that stores objects and answers storage requests

    A cheater only keeps digests of the objects pushed to it and still
    claims them; a node with a capacity rejects pushes once full.
    """

    def __init__(self, info: NodeInfo, store: Optional[ObjectStore] = None,
                 redundancy: Optional[RedundancyConfig] = None, k: int = NEIGHBOR_K,
                 cheater: bool = False,
                 contract_check: Optional[Callable[[Dict[str, Any]], bool]] = None):
        super().__init__(info, redundancy=redundancy, k=k)
        self.store = store if store is not None else ObjectStore()
        self.cheater = cheater
        self.claimed: Dict[str, List[str]] = {}  # cheater: object id -> aliases
        self.receipts: Dict[str, Dict[str, Any]] = {}
        self.pending: Dict[int, Relay] = {}
        self.contract_check = contract_check
        self.nonces = NonceBook()
        self.rng = RandomSource(f"nonce/{info.node_id}")
        self.perf = PerformanceMonitor()
        self._handlers = {
            AppTag.FIND_PREFIX: self._on_find_prefix,
            AppTag.PUSH_OBJECT: self._on_push,
            AppTag.FETCH_OBJECT: self._on_fetch,
            AppTag.CHALLENGE: self._on_challenge,
            AppTag.REPLICATE: self._on_replicate,
            AppTag.AUDIT_PEER: self._on_audit_peer,
            AppTag.STATS: self._on_stats,
            AppTag.PUSH_ACK: self._on_push_ack,
            AppTag.PROOF: self._on_proof,
        }

    def handle_app(self, sender: str, message: OverlayMessage, app: AppPayload) -> List[Outbound]:
        if app.tag == AppTag.HELLO:
            return []
        handler = self._handlers.get(app.tag)
        if handler is None:
            if isinstance(app.tag, AppTag) and app.tag.is_response:
                logger.logger.debug(f"Unsolicited {app.tag.name} from {sender[:8]}")
            else:
                logger.logger.warning(f"Unknown APP tag {app.tag!r} from {sender[:8]}; ignored")
            return []
        timer = TimeCounter()
        timer.start()
        try:
            return handler(sender, app)
        finally:
            self.perf.record(timer.elapsed_ms())

    # ----- inventory -----

    def holds(self, object_id: str) -> bool:
        if self.cheater:
            return object_id in self.claimed
        return self.store.has(object_id)

    def inventory(self) -> List[Tuple[str, str]]:
        """(object id, routing key) for everything this node claims"""
        if self.cheater:
            result = []
            for object_id, aliases in sorted(self.claimed.items()):
                key = next((split_alias(a)[0] for a in aliases if split_alias(a)[1]), object_id)
                result.append((object_id, key))
            return result
        return [(oid, self.store.routing_key(oid)) for oid in self.store.object_ids()]

    # ----- request handlers -----

    def _on_find_prefix(self, sender: str, app: AppPayload) -> List[Outbound]:
        target = app.body['target']
        best = best_candidate(target, self.neighbors_within().nodes())
        return [self.reply(sender, app, AppTag.FIND_PREFIX_REPLY, {'node': best.to_record()})]

    def _on_push(self, sender: str, app: AppPayload) -> List[Outbound]:
        body = app.body
        data = body['data']
        receipt = body.get('receipt')
        if body.get('replica'):
            if not receipt:
                return [self.reply(sender, app, AppTag.PUSH_ACK, {'ok': False, 'error': 'no contract'})]
            if self.contract_check is not None and not self.contract_check(receipt):
                return [self.reply(sender, app, AppTag.PUSH_ACK, {'ok': False, 'error': 'unknown contract'})]

        object_id = sha256_hex(data)
        aliases = [a for a in body.get('aliases', []) if split_alias(a)[1]]
        if self.cheater:
            self.claimed.setdefault(object_id, [])
            self.claimed[object_id] = sorted(set(self.claimed[object_id]) | set(aliases))
        else:
            try:
                if body.get('overwrite'):
                    self._overwrite(object_id, data)
                else:
                    self.store.put(data)
                for alias in aliases:
                    self.store.link(alias, object_id)
            except StoreFull:
                return [self.reply(sender, app, AppTag.PUSH_ACK, {'ok': False, 'error': 'full'})]
            except ObjectTooLarge:
                return [self.reply(sender, app, AppTag.PUSH_ACK, {'ok': False, 'error': 'too large'})]
        if receipt:
            self.receipts[object_id] = receipt
        logger.log_event('object_stored', {'node': self.node_id, 'object': object_id,
                                           'replica': bool(body.get('replica'))})
        return [self.reply(sender, app, AppTag.PUSH_ACK, {'ok': True, 'id': object_id})]

    def _overwrite(self, object_id: str, data: bytes) -> None:
        """Replace a (possibly corrupted) local copy with verified bytes"""
        if len(data) > CONVENTION_OBJECT_SIZE:
            raise ObjectTooLarge(f"{len(data)} bytes exceeds {CONVENTION_OBJECT_SIZE}")
        capacity = self.store.capacity_bytes
        if capacity is not None:
            existing = len(self.store.get(object_id)) if self.store.has(object_id) else 0
            if self.store.used_bytes - existing + len(data) > capacity:
                raise StoreFull(f"store full ({self.store.used_bytes}/{capacity} bytes)")
        self.store.put_unchecked(object_id, data)

    def _on_fetch(self, sender: str, app: AppPayload) -> List[Outbound]:
        name = app.body['name']
        object_id = None if self.cheater else self.store.resolve(name)
        if object_id is None:
            return [self.reply(sender, app, AppTag.OBJECT, {'found': False, 'name': name})]
        data = self.store.get(object_id)
        return [self.reply(sender, app, AppTag.OBJECT, {'found': True, 'id': object_id, 'data': data})]

    def _on_challenge(self, sender: str, app: AppPayload) -> List[Outbound]:
        object_ref = app.body['object_ref']
        nonce = app.body['nonce']
        if self.cheater and object_ref in self.claimed:
            # best effort without the bytes
            proof = storage_proof(nonce, bytes.fromhex(object_ref))
        elif self.store.has(object_ref):
            proof = storage_proof(nonce, self.store.get(object_ref))
        else:
            return [self.reply(sender, app, AppTag.PROOF, {'found': False, 'object_ref': object_ref})]
        return [self.reply(sender, app, AppTag.PROOF,
                           {'found': True, 'object_ref': object_ref, 'nonce': nonce, 'proof': proof})]

    def _on_replicate(self, sender: str, app: AppPayload) -> List[Outbound]:
        body = app.body
        object_ref = body['object_ref']
        target = NodeInfo.from_record(body['target'])
        if body.get('receipt'):
            self.receipts.setdefault(object_ref, body['receipt'])
        if self.cheater or not self.store.has(object_ref):
            return [self.reply(sender, app, AppTag.REPLICATE_DONE, {'ok': False, 'error': 'not held'})]
        if target.node_id == self.node_id:
            return [self.reply(sender, app, AppTag.REPLICATE_DONE, {'ok': True, 'target': target.node_id})]

        push = {
            'data': self.store.get(object_ref),
            'aliases': self.store.aliases_of(object_ref),
            'receipt': self.receipts.get(object_ref),
            'replica': True,
            'overwrite': bool(body.get('overwrite')),
        }
        request_id, out = self.request(target, AppTag.PUSH_OBJECT, push)
        self.pending[request_id] = Relay(client=sender, request=app, kind='replicate',
                                         peer=target, object_ref=object_ref)
        return [out]

    def _on_audit_peer(self, sender: str, app: AppPayload) -> List[Outbound]:
        object_ref = app.body['object_ref']
        peer = NodeInfo.from_record(app.body['peer'])
        if self.cheater or not self.store.has(object_ref):
            return [self.reply(sender, app, AppTag.AUDIT_VERDICT,
                               {'ok': False, 'auditor_ok': False, 'reason': 'auditor lacks object'})]
        own = self.store.get(object_ref)
        if not verify_object(object_ref, own):
            return [self.reply(sender, app, AppTag.AUDIT_VERDICT,
                               {'ok': False, 'auditor_ok': False, 'reason': 'auditor replica corrupt'})]
        nonce = self.nonces.fresh(self.rng, object_ref, peer.node_id)
        request_id, out = self.request(peer, AppTag.CHALLENGE, {'object_ref': object_ref, 'nonce': nonce})
        self.pending[request_id] = Relay(client=sender, request=app, kind='audit', peer=peer,
                                         object_ref=object_ref, expected=storage_proof(nonce, own))
        return [out]

    def _on_stats(self, sender: str, app: AppPayload) -> List[Outbound]:
        body = {
            'node': self.info.to_record(),
            'open': len(self.book.open),
            'inventory': [list(item) for item in self.inventory()],
            'used_bytes': self.store.used_bytes,
            'capacity': self.store.capacity_bytes,
            'members': len(self.directory()),
            'perf': self.perf.get_metrics(),
        }
        return [self.reply(sender, app, AppTag.STATS_REPLY, body)]

    # ----- responses to relayed requests -----

    def _on_push_ack(self, sender: str, app: AppPayload) -> List[Outbound]:
        relay = self.pending.pop(app.request_id, None)
        if relay is None or relay.kind != 'replicate':
            return []
        ok = bool(app.body.get('ok'))
        result = {'ok': ok, 'target': relay.peer.node_id}
        if not ok:
            result['error'] = app.body.get('error', 'rejected')
        return [self.reply(relay.client, relay.request, AppTag.REPLICATE_DONE, result)]

    def _on_proof(self, sender: str, app: AppPayload) -> List[Outbound]:
        relay = self.pending.pop(app.request_id, None)
        if relay is None or relay.kind != 'audit':
            return []
        body = app.body
        if not body.get('found'):
            verdict = {'ok': False, 'auditor_ok': True, 'reason': 'object missing'}
        elif body.get('proof') != relay.expected:
            verdict = {'ok': False, 'auditor_ok': True, 'reason': 'bad proof'}
        else:
            verdict = {'ok': True, 'auditor_ok': True, 'reason': ''}
        if not verdict['ok']:
            logger.log_event('audit_failure', {'auditor': self.node_id, 'holder': relay.peer.node_id,
                                               'object': relay.object_ref, 'reason': verdict['reason']})
        return [self.reply(relay.client, relay.request, AppTag.AUDIT_VERDICT, verdict)]

    def on_send_failure(self, to: str, message: OverlayMessage) -> List[Outbound]:
        out = super().on_send_failure(to, message)
        if message.payload and not message.is_broadcast:
            try:
                app = message.app()
            except FrameError:
                return out
            relay = self.pending.pop(app.request_id, None)
            if relay is not None and relay.peer.node_id == to:
                if relay.kind == 'replicate':
                    out.append(self.reply(relay.client, relay.request, AppTag.REPLICATE_DONE,
                                          {'ok': False, 'target': to, 'error': 'unreachable'}))
                else:
                    out.append(self.reply(relay.client, relay.request, AppTag.AUDIT_VERDICT,
                                          {'ok': False, 'auditor_ok': True, 'reason': 'unreachable'}))
        return out


# ========== CLIENT SIDE ==========

class StorageNetwork(Protocol):
    """What workflows need from a network: the simulator and TcpNetwork both qualify"""

    def entry(self) -> NodeInfo: ...

    def request(self, to: NodeInfo, tag: AppTag, body: Any) -> Any: ...

    def request_many(self, calls: Sequence[Tuple[NodeInfo, AppTag, Any]]) -> List[Union[Any, Exception]]: ...


@dataclass
class PushResult:
    node: NodeInfo
    ok: bool
    error: str = ''


class StorageClient:
    """Typed wrappers over the APP request/response pairs"""

    def __init__(self, network: StorageNetwork):
        self.network = network

    def entry(self) -> NodeInfo:
        return self.network.entry()

    def members(self) -> List[NodeInfo]:
        body = self.network.request(self.entry(), AppTag.SNAPSHOT_REQUEST, {})
        return [NodeInfo.from_record(r) for r in body.get('members', [])]

    def ask(self, node: NodeInfo, target: str) -> NodeInfo:
        body = self.network.request(node, AppTag.FIND_PREFIX, {'target': target})
        return NodeInfo.from_record(body['node'])

    def push(self, node: NodeInfo, data: bytes, aliases: Sequence[str] = (),
             receipt: Optional[Dict[str, Any]] = None) -> PushResult:
        body = self.network.request(node, AppTag.PUSH_OBJECT, self._push_body(data, aliases, receipt))
        return PushResult(node, bool(body.get('ok')), body.get('error', ''))

    def push_many(self, pushes: Sequence[Tuple[NodeInfo, bytes, Sequence[str]]]) -> List[PushResult]:
        calls = [(node, AppTag.PUSH_OBJECT, self._push_body(data, aliases, None))
                 for node, data, aliases in pushes]
        results = []
        for (node, _, _), reply in zip(pushes, self.network.request_many(calls)):
            if isinstance(reply, Exception):
                results.append(PushResult(node, False, str(reply)))
            else:
                results.append(PushResult(node, bool(reply.get('ok')), reply.get('error', '')))
        return results

    @staticmethod
    def _push_body(data: bytes, aliases: Sequence[str], receipt: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        return {'data': bytes(data), 'aliases': list(aliases), 'receipt': receipt,
                'replica': False, 'overwrite': False}

    def fetch(self, node: NodeInfo, name: str) -> Optional[Tuple[str, bytes]]:
        body = self.network.request(node, AppTag.FETCH_OBJECT, {'name': name})
        if not body.get('found'):
            return None
        return body['id'], body['data']

    def challenge(self, node: NodeInfo, object_ref: str, nonce: bytes) -> Dict[str, Any]:
        return self.network.request(node, AppTag.CHALLENGE, {'object_ref': object_ref, 'nonce': nonce})

    def replicate(self, holder: NodeInfo, object_ref: str, target: NodeInfo,
                  receipt: Optional[Dict[str, Any]] = None, overwrite: bool = False) -> Dict[str, Any]:
        body = {'object_ref': object_ref, 'target': target.to_record(),
                'receipt': receipt, 'overwrite': overwrite}
        return self.network.request(holder, AppTag.REPLICATE, body)

    def audit_peer(self, auditor: NodeInfo, object_ref: str, peer: NodeInfo) -> Dict[str, Any]:
        return self.network.request(auditor, AppTag.AUDIT_PEER,
                                    {'object_ref': object_ref, 'peer': peer.to_record()})

    def stats_many(self, nodes: Sequence[NodeInfo]) -> Dict[str, Optional[Dict[str, Any]]]:
        replies = self.network.request_many([(n, AppTag.STATS, {}) for n in nodes])
        return {n.node_id: (None if isinstance(r, Exception) else r) for n, r in zip(nodes, replies)}
