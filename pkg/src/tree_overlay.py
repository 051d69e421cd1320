"""
Self-organizing binary-tree overlay

Every node is a single-threaded state machine: handle_message() consumes one
message and returns the outbound messages it causes. The simulator and the
TCP service both drive the same OverlayNode code.
"""
import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import msgpack

from config.settings import (
    CLUSTER_MAX_SIZE, DEDUP_CACHE_CAPACITY, DEFAULT_LINK_RADIUS,
    JOIN_MAX_ATTEMPTS, NEIGHBOR_K
)
from src.errors import (
    AlreadyBootstrapped, JoinFailed, KTooSmall, MalformedFrame, NoOpenBranch, NotAMember,
    Truncated
)
from src.event_logger import logger
from src.utils import sha256


# ========== NAMING ==========

@dataclass(frozen=True, order=True)
class GroupId:
    """Tree position as a bit string; the root is the empty string"""
    bits: str = ''

    def __post_init__(self):
        if any(c not in '01' for c in self.bits):
            raise ValueError(f"group id must be a bit string, got {self.bits!r}")

    @property
    def depth(self) -> int:
        return len(self.bits)

    def child(self, side: 'Side') -> 'GroupId':
        return GroupId(self.bits + str(int(side)))

    def parent(self) -> Optional['GroupId']:
        return GroupId(self.bits[:-1]) if self.bits else None

    def is_prefix_of(self, target: str) -> bool:
        return target.startswith(self.bits)

    def distance(self, other: 'GroupId') -> int:
        common = len(_common_prefix(self.bits, other.bits))
        return self.depth + other.depth - 2 * common

    def to_bytes(self) -> bytes:
        n = len(self.bits)
        packed = b''
        if n:
            width = (n + 7) // 8
            packed = int(self.bits.ljust(width * 8, '0'), 2).to_bytes(width, 'big')
        return n.to_bytes(2, 'big') + packed

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple['GroupId', int]:
        """Decode at offset; returns (group id, next offset)"""
        if len(data) < offset + 2:
            raise Truncated("group id length missing")
        n = int.from_bytes(data[offset:offset + 2], 'big')
        width = (n + 7) // 8
        end = offset + 2 + width
        if len(data) < end:
            raise Truncated("group id bits truncated")
        bits = ''
        if n:
            bits = bin(int.from_bytes(data[offset + 2:end], 'big'))[2:].zfill(width * 8)[:n]
        return cls(bits), end

    def __str__(self) -> str:
        return self.bits if self.bits else '<root>'


GroupId.ROOT = GroupId('')


def _common_prefix(a: str, b: str) -> str:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return a[:n]


def gids_within(bits: str, radius: int) -> Set[str]:
    """Every bit string at tree distance <= radius from bits"""
    result = set()
    for up in range(0, min(radius, len(bits)) + 1):
        ancestor = bits[:len(bits) - up]
        for down in range(0, radius - up + 1):
            for suffix in itertools.product('01', repeat=down):
                result.add(ancestor + ''.join(suffix))
    return result


class Side(IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class NodeInfo:
    node_id: str  # hex digest of the node's public key
    host: str = ''
    port: int = 0
    group_id: Optional[GroupId] = None

    @property
    def short_id(self) -> str:
        return self.node_id[:8]

    def with_group(self, group_id: Optional[GroupId]) -> 'NodeInfo':
        return NodeInfo(self.node_id, self.host, self.port, group_id)

    def to_record(self) -> Dict[str, Any]:
        return {
            'id': self.node_id,
            'host': self.host,
            'port': self.port,
            'gid': None if self.group_id is None else self.group_id.bits,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'NodeInfo':
        try:
            gid = record.get('gid')
            return cls(
                node_id=str(record['id']),
                host=str(record.get('host', '')),
                port=int(record.get('port', 0)),
                group_id=None if gid is None else GroupId(gid),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedFrame(f"bad node record: {e}") from e


def node_sort_key(node: NodeInfo) -> Tuple:
    gid = node.group_id or GroupId.ROOT
    return (gid.depth, gid.bits, node.node_id)


@dataclass(frozen=True)
class OpenBranch:
    """An unfilled child slot; identity is the slot, not the advertised contact"""
    parent_group_id: GroupId
    side: Side
    parent_contact: Optional[NodeInfo] = field(default=None, compare=False, hash=False)

    @property
    def slot(self) -> Tuple[str, int]:
        return (self.parent_group_id.bits, int(self.side))

    @property
    def child_group_id(self) -> GroupId:
        return self.parent_group_id.child(self.side)

    def sort_key(self) -> Tuple[int, str, int]:
        return (self.parent_group_id.depth, self.parent_group_id.bits, int(self.side))

    def to_record(self) -> Dict[str, Any]:
        return {
            'parent': self.parent_group_id.bits,
            'side': int(self.side),
            'contact': None if self.parent_contact is None else self.parent_contact.to_record(),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'OpenBranch':
        try:
            contact = record.get('contact')
            return cls(
                parent_group_id=GroupId(record['parent']),
                side=Side(record['side']),
                parent_contact=None if contact is None else NodeInfo.from_record(contact),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedFrame(f"bad branch record: {e}") from e


def select_branch(open_set: Iterable[OpenBranch]) -> OpenBranch:
    """Shallowest open branch; ties go to the smallest parent bits, left before right"""
    candidates = list(open_set)
    if not candidates:
        raise NoOpenBranch("no open branch is advertised")
    return min(candidates, key=OpenBranch.sort_key)


# ========== MESSAGES ==========

class MessageKind(IntEnum):
    AVAILABLE_BRANCHES = 0
    DISCARDED_BRANCHES = 1
    GROUP_ID = 2
    APP = 3


class AppTag(IntEnum):
    DATA = 0x00
    FIND_PREFIX = 0x01
    PUSH_OBJECT = 0x02
    CHALLENGE = 0x03
    JOIN_REQUEST = 0x04
    SNAPSHOT_REQUEST = 0x05
    MEMBER_ANNOUNCE = 0x06
    FETCH_OBJECT = 0x07
    REPLICATE = 0x08
    HELLO = 0x09
    STATS = 0x0A
    AUDIT_PEER = 0x0B
    FIND_PREFIX_REPLY = 0x81
    PUSH_ACK = 0x82
    PROOF = 0x83
    JOIN_REJECT = 0x84
    SNAPSHOT = 0x85
    OBJECT = 0x87
    REPLICATE_DONE = 0x88
    STATS_REPLY = 0x8A
    AUDIT_VERDICT = 0x8B

    @property
    def is_response(self) -> bool:
        return bool(self.value & 0x80)


BROADCAST_TAGS = frozenset({AppTag.DATA, AppTag.MEMBER_ANNOUNCE})


@dataclass(frozen=True)
class AppPayload:
    """APP variant body: 1-byte tag, 8-byte request id, msgpack body"""
    tag: int
    request_id: int = 0
    body: Any = None

    def to_bytes(self) -> bytes:
        return (bytes([int(self.tag)]) + self.request_id.to_bytes(8, 'big')
                + msgpack.packb(self.body, use_bin_type=True))

    @classmethod
    def from_bytes(cls, data: bytes) -> 'AppPayload':
        if len(data) < 9:
            raise MalformedFrame("APP payload shorter than its header")
        try:
            body = msgpack.unpackb(data[9:], raw=False)
        except (msgpack.exceptions.UnpackException, ValueError, TypeError) as e:
            raise MalformedFrame(f"APP body is not msgpack: {e}") from e
        tag = data[0]
        try:
            tag = AppTag(tag)
        except ValueError:
            pass
        return cls(tag=tag, request_id=int.from_bytes(data[1:9], 'big'), body=body)


@dataclass(frozen=True)
class OverlayMessage:
    kind: MessageKind
    msg_id: bytes
    origin: str
    branches: Tuple[OpenBranch, ...] = ()
    assigned: Optional[GroupId] = None
    payload: bytes = b''

    def app(self) -> AppPayload:
        return AppPayload.from_bytes(self.payload)

    @property
    def is_broadcast(self) -> bool:
        if self.kind in (MessageKind.AVAILABLE_BRANCHES, MessageKind.DISCARDED_BRANCHES):
            return True
        if self.kind is MessageKind.APP and self.payload:
            return self.payload[0] in BROADCAST_TAGS
        return False


@dataclass(frozen=True)
class Outbound:
    to: str
    message: OverlayMessage
    contact: Optional[NodeInfo] = None


def message_id(node_id: str, counter: int) -> bytes:
    return sha256(bytes.fromhex(node_id) + counter.to_bytes(8, 'big'))


# ========== REDUNDANCY / NEIGHBORS ==========

class RedundancyMode(str, Enum):
    NONE = 'none'
    CLUSTER = 'cluster'
    EXTRA_LINKS = 'extra_links'


@dataclass(frozen=True)
class RedundancyConfig:
    mode: RedundancyMode = RedundancyMode.NONE
    cluster_size: int = CLUSTER_MAX_SIZE
    link_radius: int = DEFAULT_LINK_RADIUS

    def __post_init__(self):
        object.__setattr__(self, 'mode', RedundancyMode(self.mode))
        if not 1 <= self.cluster_size <= CLUSTER_MAX_SIZE:
            raise ValueError(f"cluster_size must be in [1, {CLUSTER_MAX_SIZE}]")
        if self.link_radius < 2:
            raise ValueError("link_radius must be >= 2")


@dataclass(frozen=True)
class NeighborTable:
    k: int
    entries: Dict[int, FrozenSet[NodeInfo]]

    def nodes(self) -> List[NodeInfo]:
        return sorted((n for group in self.entries.values() for n in group), key=node_sort_key)

    def group_ids(self) -> Set[str]:
        return {n.group_id.bits for n in self.nodes() if n.group_id is not None}


class OpenBranchBook:
    """Open-branch view with tombstones for slots already taken"""

    def __init__(self):
        self.open: Dict[Tuple[str, int], OpenBranch] = {}
        self.taken: Set[Tuple[str, int]] = set()

    def announce(self, branches: Iterable[OpenBranch]) -> None:
        for branch in branches:
            if branch.slot not in self.taken:
                self.open[branch.slot] = branch

    def discard(self, branches: Iterable[OpenBranch]) -> None:
        for branch in branches:
            self.open.pop(branch.slot, None)
            self.taken.add(branch.slot)

    def is_taken(self, slot: Tuple[str, int]) -> bool:
        return slot in self.taken

    def branches(self) -> List[OpenBranch]:
        return sorted(self.open.values(), key=OpenBranch.sort_key)

    def slots(self) -> Set[Tuple[str, int]]:
        return set(self.open)


@dataclass
class JoinState:
    entry: NodeInfo
    cluster_with: Optional[NodeInfo] = None
    attempts: int = 0
    excluded: Set[Tuple[str, int]] = field(default_factory=set)
    awaiting_from: Optional[str] = None
    requested_slot: Optional[Tuple[str, int]] = None


# ========== NODE ==========

class OverlayNode:
    """
    Overlay state machine for one physical node

    The member directory (group id -> node id -> NodeInfo) is learned from
    snapshots and broadcasts; links and k-hop neighbor tables are derived
    from it.
    """

    def __init__(self, info: NodeInfo, redundancy: Optional[RedundancyConfig] = None,
                 k: int = NEIGHBOR_K, dedup_capacity: int = DEDUP_CACHE_CAPACITY):
        if k < 2:
            raise KTooSmall(f"k must be >= 2, got {k}")
        self.info = info.with_group(None)
        self.redundancy = redundancy or RedundancyConfig()
        self.k = k
        self.book = OpenBranchBook()
        self.members: Dict[str, Dict[str, NodeInfo]] = {}
        self.seen: 'OrderedDict[bytes, None]' = OrderedDict()
        self.dedup_capacity = dedup_capacity
        self.join_state: Optional[JoinState] = None
        self.join_error: Optional[Exception] = None
        self.is_cluster_member = False
        self.deliveries: List[Tuple[bytes, bytes]] = []
        self.on_deliver: Optional[Callable[[OverlayMessage], None]] = None
        self.duplicates_dropped = 0
        self._counter = 0
        self._links_cache: Optional[List[NodeInfo]] = None

    # ----- identity -----

    @property
    def node_id(self) -> str:
        return self.info.node_id

    @property
    def group_id(self) -> Optional[GroupId]:
        return self.info.group_id

    @property
    def is_member(self) -> bool:
        return self.info.group_id is not None

    def _next_id(self) -> bytes:
        self._counter += 1
        return message_id(self.node_id, self._counter)

    def next_request_id(self) -> int:
        self._counter += 1
        return self._counter

    # ----- membership -----

    def learn(self, node: NodeInfo) -> None:
        if node.group_id is None:
            return
        for bucket in self.members.values():
            if node.node_id in bucket and bucket[node.node_id].group_id != node.group_id:
                del bucket[node.node_id]
        self.members.setdefault(node.group_id.bits, {})[node.node_id] = node
        self._links_cache = None

    def directory(self) -> List[NodeInfo]:
        return sorted((n for bucket in self.members.values() for n in bucket.values()),
                      key=node_sort_key)

    def members_at(self, bits: str) -> List[NodeInfo]:
        return sorted(self.members.get(bits, {}).values(), key=lambda n: n.node_id)

    def _link_gids(self, gid: GroupId) -> Set[str]:
        mode = self.redundancy.mode
        if mode is RedundancyMode.EXTRA_LINKS:
            return gids_within(gid.bits, self.redundancy.link_radius) - {gid.bits}
        candidates = {gid.bits + '0', gid.bits + '1'}
        if gid.bits:
            candidates.add(gid.bits[:-1])
        if mode is RedundancyMode.CLUSTER:
            candidates.add(gid.bits)
        return candidates

    def links_of(self, node: NodeInfo) -> List[NodeInfo]:
        if node.group_id is None:
            return []
        found = []
        for bits in self._link_gids(node.group_id):
            found.extend(n for n in self.members.get(bits, {}).values() if n.node_id != node.node_id)
        return sorted(found, key=node_sort_key)

    def links(self) -> List[NodeInfo]:
        if self._links_cache is None:
            self._links_cache = self.links_of(self.info)
        return self._links_cache

    def neighbors_within(self, k: Optional[int] = None) -> NeighborTable:
        """BFS over the link graph up to k hops, self at distance 0"""
        k = self.k if k is None else k
        if k < 2:
            raise KTooSmall(f"k must be >= 2, got {k}")
        if not self.is_member:
            raise NotAMember("node has no group id yet")
        entries: Dict[int, Set[NodeInfo]] = {0: {self.info}}
        visited = {self.node_id}
        frontier = [self.info]
        for hop in range(1, k + 1):
            next_frontier = []
            for node in frontier:
                for peer in self.links_of(node):
                    if peer.node_id not in visited:
                        visited.add(peer.node_id)
                        next_frontier.append(peer)
            if not next_frontier:
                break
            entries[hop] = set(next_frontier)
            frontier = next_frontier
        return NeighborTable(k=k, entries={d: frozenset(s) for d, s in entries.items()})

    # ----- joining -----

    def bootstrap(self) -> List[Outbound]:
        """Become the root of a new tree"""
        if self.is_member or self.members:
            raise AlreadyBootstrapped("node already belongs to a tree")
        self._assume(GroupId.ROOT)
        self.book.announce(self._own_branches())
        logger.log_event('tree_bootstrapped', {'node': self.node_id})
        return []

    def start_join(self, entry: NodeInfo, cluster_with: Optional[NodeInfo] = None) -> List[Outbound]:
        if self.is_member:
            raise AlreadyBootstrapped("node already belongs to a tree")
        self.join_state = JoinState(entry=entry, cluster_with=cluster_with)
        self.join_error = None
        return [self._request_snapshot()]

    def _request_snapshot(self) -> Outbound:
        state = self.join_state
        state.awaiting_from = state.entry.node_id
        return self._direct(state.entry, AppTag.SNAPSHOT_REQUEST, {}, self.next_request_id())

    def _choose_and_request(self) -> List[Outbound]:
        state = self.join_state
        if state.cluster_with is not None:
            target = state.cluster_with
            state.awaiting_from = target.node_id
            state.requested_slot = None
            body = {'cluster': True, 'node': self.info.to_record()}
            return [self._direct(target, AppTag.JOIN_REQUEST, body, self.next_request_id())]

        candidates = [b for b in self.book.branches() if b.slot not in state.excluded]
        if not candidates:
            return self._retry_or_fail("no open branch advertised")
        branch = select_branch(candidates)
        contact = branch.parent_contact or self._any_member(branch.parent_group_id.bits)
        if contact is None:
            state.excluded.add(branch.slot)
            return self._retry_or_fail(f"no contact for branch {branch.slot}")
        state.awaiting_from = contact.node_id
        state.requested_slot = branch.slot
        body = {'cluster': False, 'parent': branch.parent_group_id.bits,
                'side': int(branch.side), 'node': self.info.to_record()}
        return [self._direct(contact, AppTag.JOIN_REQUEST, body, self.next_request_id())]

    def _retry_or_fail(self, reason: str) -> List[Outbound]:
        state = self.join_state
        state.attempts += 1
        if state.attempts >= JOIN_MAX_ATTEMPTS:
            self.join_error = JoinFailed(f"gave up after {state.attempts} attempts: {reason}")
            self.join_state = None
            logger.log_event('join_failed', {'node': self.node_id, 'reason': reason})
            return []
        logger.logger.debug(f"Join retry {state.attempts} for {self.info.short_id}: {reason}")
        return [self._request_snapshot()]

    def _any_member(self, bits: str) -> Optional[NodeInfo]:
        found = self.members_at(bits)
        return found[0] if found else None

    def _assume(self, gid: GroupId) -> None:
        self.info = self.info.with_group(gid)
        self.learn(self.info)

    def _own_branches(self) -> List[OpenBranch]:
        return [OpenBranch(self.group_id, side, self.info) for side in Side]

    # ----- message handling -----

    def handle_message(self, sender: str, message: OverlayMessage) -> List[Outbound]:
        """
        Consume one message; returns outbound messages in deterministic order

        A body of the wrong shape raises MalformedFrame so callers drop it
        like any other bad frame.
        """
        try:
            if message.is_broadcast:
                return self._handle_broadcast(sender, message)
            if message.kind is MessageKind.GROUP_ID:
                return self._handle_group_id(sender, message)
            if message.kind is MessageKind.APP:
                app = message.app()
                return self._handle_directed(sender, message, app)
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise MalformedFrame(f"{message.kind.name} from {sender[:8]} has a malformed body: {e!r}") from e
        logger.logger.warning(f"Ignoring unexpected {message.kind!r} from {sender[:8]}")
        return []

    def _handle_broadcast(self, sender: str, message: OverlayMessage) -> List[Outbound]:
        if message.msg_id in self.seen:
            self.duplicates_dropped += 1
            return []
        self._remember(message.msg_id)

        if message.kind is MessageKind.AVAILABLE_BRANCHES:
            for branch in message.branches:
                if branch.parent_contact is not None:
                    self.learn(branch.parent_contact)
            self.book.announce(message.branches)
        elif message.kind is MessageKind.DISCARDED_BRANCHES:
            self.book.discard(message.branches)
        else:
            app = message.app()
            if app.tag == AppTag.MEMBER_ANNOUNCE:
                self.learn(NodeInfo.from_record(app.body))
            self.deliver(message)

        if not self.is_member:
            return []
        return [Outbound(peer.node_id, message, peer)
                for peer in self.links() if peer.node_id != sender]

    def _remember(self, msg_id: bytes) -> None:
        self.seen[msg_id] = None
        self.seen.move_to_end(msg_id)
        while len(self.seen) > self.dedup_capacity:
            self.seen.popitem(last=False)

    def deliver(self, message: OverlayMessage) -> None:
        """Hand an APP broadcast to the application layer"""
        self.deliveries.append((message.msg_id, message.payload))
        if self.on_deliver is not None:
            self.on_deliver(message)

    def broadcast(self, kind: MessageKind, branches: Tuple[OpenBranch, ...] = (),
                  payload: bytes = b'') -> Tuple[OverlayMessage, List[Outbound]]:
        """Originate a broadcast to every link"""
        if not self.is_member:
            raise NotAMember("only members can broadcast")
        message = OverlayMessage(kind=kind, msg_id=self._next_id(), origin=self.node_id,
                                 branches=tuple(branches), payload=payload)
        self._remember(message.msg_id)
        if kind is MessageKind.APP:
            self.deliver(message)
        return message, [Outbound(peer.node_id, message, peer) for peer in self.links()]

    def broadcast_data(self, data: bytes) -> Tuple[OverlayMessage, List[Outbound]]:
        return self.broadcast(MessageKind.APP, payload=AppPayload(AppTag.DATA, 0, data).to_bytes())

    def _handle_group_id(self, sender: str, message: OverlayMessage) -> List[Outbound]:
        state = self.join_state
        if state is None or self.is_member or sender != state.awaiting_from:
            logger.logger.debug(f"Ignoring GROUP_ID from {sender[:8]} (not joining through it)")
            return []
        self.join_state = None
        self._assume(message.assigned)
        logger.log_event('node_joined', {'node': self.node_id, 'group_id': message.assigned.bits,
                                         'attempts': state.attempts + 1})
        if state.cluster_with is not None:
            self.is_cluster_member = True
            payload = AppPayload(AppTag.MEMBER_ANNOUNCE, 0, self.info.to_record()).to_bytes()
            return self.broadcast(MessageKind.APP, payload=payload)[1]
        branches = tuple(self._own_branches())
        self.book.announce(branches)
        return self.broadcast(MessageKind.AVAILABLE_BRANCHES, branches=branches)[1]

    def _handle_directed(self, sender: str, message: OverlayMessage, app: AppPayload) -> List[Outbound]:
        if app.tag == AppTag.SNAPSHOT_REQUEST:
            return [self.reply(sender, app, AppTag.SNAPSHOT, self.snapshot())]
        if app.tag == AppTag.SNAPSHOT:
            return self._on_snapshot(sender, app)
        if app.tag == AppTag.JOIN_REQUEST:
            return self._on_join_request(sender, message, app)
        if app.tag == AppTag.JOIN_REJECT:
            return self._on_join_reject(sender, app)
        return self.handle_app(sender, message, app)

    def handle_app(self, sender: str, message: OverlayMessage, app: AppPayload) -> List[Outbound]:
        """Application requests; storage nodes override this"""
        logger.logger.warning(f"Unknown APP tag {app.tag!r} from {sender[:8]}; ignored")
        return []

    def snapshot(self) -> Dict[str, Any]:
        return {
            'open': [b.to_record() for b in self.book.branches()],
            'taken': sorted([bits, side] for bits, side in self.book.taken),
            'members': [n.to_record() for n in self.directory()],
        }

    def merge_snapshot(self, body: Dict[str, Any]) -> None:
        for record in body.get('members', []):
            node = NodeInfo.from_record(record)
            if node.node_id != self.node_id:
                self.learn(node)
        for bits, side in body.get('taken', []):
            self.book.discard([OpenBranch(GroupId(bits), Side(side))])
        self.book.announce(OpenBranch.from_record(r) for r in body.get('open', []))

    def _on_snapshot(self, sender: str, app: AppPayload) -> List[Outbound]:
        state = self.join_state
        if state is None or self.is_member or sender != state.awaiting_from:
            return []
        self.merge_snapshot(app.body)
        return self._choose_and_request()

    def _on_join_request(self, sender: str, message: OverlayMessage, app: AppPayload) -> List[Outbound]:
        body = app.body
        joiner = NodeInfo.from_record(body['node'])
        if not self.is_member:
            return [self.reply(sender, app, AppTag.JOIN_REJECT, {'reason': 'not a member'}, joiner)]

        if body.get('cluster'):
            if self.redundancy.mode is not RedundancyMode.CLUSTER:
                return [self.reply(sender, app, AppTag.JOIN_REJECT, {'reason': 'clusters disabled'}, joiner)]
            if len(self.members_at(self.group_id.bits)) >= self.redundancy.cluster_size:
                return [self.reply(sender, app, AppTag.JOIN_REJECT, {'reason': 'cluster full'}, joiner)]
            self.learn(joiner.with_group(self.group_id))
            return [self._group_id_to(joiner, self.group_id)]

        slot = (body.get('parent'), body.get('side'))
        if slot[0] != self.group_id.bits or slot[1] not in (0, 1) or self.is_cluster_member:
            return [self.reply(sender, app, AppTag.JOIN_REJECT, {'reason': 'wrong parent', 'slot': list(slot)}, joiner)]
        branch = OpenBranch(self.group_id, Side(slot[1]), self.info)
        if self.book.is_taken(branch.slot) or self.members.get(branch.child_group_id.bits):
            logger.logger.debug(f"Branch {branch.slot} already taken; rejecting {joiner.short_id}")
            return [self.reply(sender, app, AppTag.JOIN_REJECT, {'reason': 'taken', 'slot': list(slot)}, joiner)]

        assigned = branch.child_group_id
        self.book.discard([branch])
        self.learn(joiner.with_group(assigned))
        out = [self._group_id_to(joiner, assigned)]
        out.extend(self.broadcast(MessageKind.DISCARDED_BRANCHES, branches=(branch,))[1])
        return out

    def _group_id_to(self, joiner: NodeInfo, assigned: GroupId) -> Outbound:
        message = OverlayMessage(kind=MessageKind.GROUP_ID, msg_id=self._next_id(),
                                 origin=self.node_id, assigned=assigned)
        return Outbound(joiner.node_id, message, joiner)

    def _on_join_reject(self, sender: str, app: AppPayload) -> List[Outbound]:
        state = self.join_state
        if state is None or sender != state.awaiting_from:
            return []
        reason = app.body.get('reason', 'rejected')
        if state.cluster_with is not None:
            self.join_error = JoinFailed(f"cluster join rejected: {reason}")
            self.join_state = None
            return []
        if state.requested_slot is not None:
            state.excluded.add(state.requested_slot)
        logger.log_event('join_rejected', {'node': self.node_id, 'reason': reason,
                                           'slot': list(state.requested_slot or ())})
        return self._retry_or_fail(reason)

    def on_send_failure(self, to: str, message: OverlayMessage) -> List[Outbound]:
        """The transport could not deliver message; returns follow-up messages"""
        state = self.join_state
        if state is not None and to == state.awaiting_from:
            if state.requested_slot is not None:
                state.excluded.add(state.requested_slot)
            return self._retry_or_fail(f"{to[:8]} unreachable")
        return []

    # ----- helpers for directed APP traffic -----

    def _direct(self, to: NodeInfo, tag: AppTag, body: Any, request_id: int) -> Outbound:
        message = OverlayMessage(kind=MessageKind.APP, msg_id=self._next_id(), origin=self.node_id,
                                 payload=AppPayload(tag, request_id, body).to_bytes())
        return Outbound(to.node_id, message, to)

    def request(self, to: NodeInfo, tag: AppTag, body: Any) -> Tuple[int, Outbound]:
        request_id = self.next_request_id()
        return request_id, self._direct(to, tag, body, request_id)

    def reply(self, to: str, request: AppPayload, tag: AppTag, body: Any,
              contact: Optional[NodeInfo] = None) -> Outbound:
        message = OverlayMessage(kind=MessageKind.APP, msg_id=self._next_id(), origin=self.node_id,
                                 payload=AppPayload(tag, request.request_id, body).to_bytes())
        return Outbound(to, message, contact)
