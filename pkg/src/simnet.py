"""
Deterministic discrete-event simulator for the storage network

One logical clock and a priority queue of events drive StorageNode state
machines. Every message is passed through the wire codec, so the simulator
exercises the same bytes the TCP transport would carry.
"""
import heapq
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from config.settings import (
    BLOCK_INTERVAL_S, NEIGHBOR_K, SIM_DEFAULT_LATENCY_MS, SIM_DEFAULT_SEED, SIM_MAX_EVENTS
)
from src.crypto_pre import PublicKey, RandomSource, keygen
from src.errors import (
    FrameError, JoinFailed, MtfsError, NotFound, OverlayError, ScenarioError, UnreachableNode
)
from src.event_logger import logger
from src.ledger import Ledger
from src.merkle_store import ObjectStore
from src.replication import AuditReport, ReplicationPolicy, audit_round
from src.storage_node import StorageClient, StorageNode, node_identity
from src.transport import decode, encode
from src.tree_overlay import (
    AppPayload, AppTag, MessageKind, NodeInfo, OverlayMessage, Outbound, RedundancyConfig,
    RedundancyMode, message_id
)
from src.utils import sha256_hex
from src import workflows


# ========== CONFIGURATION ==========

@dataclass(frozen=True)
class LatencyModel:
    """Fixed latency, or uniform in [low_ms, high_ms] drawn once per link"""
    low_ms: float = SIM_DEFAULT_LATENCY_MS
    high_ms: Optional[float] = None

    def __post_init__(self):
        if self.low_ms < 0 or (self.high_ms is not None and self.high_ms < self.low_ms):
            raise ValueError(f"bad latency range [{self.low_ms}, {self.high_ms}]")

    @classmethod
    def fixed(cls, ms: float) -> 'LatencyModel':
        return cls(float(ms))

    @classmethod
    def uniform(cls, low_ms: float, high_ms: float) -> 'LatencyModel':
        return cls(float(low_ms), float(high_ms))

    @classmethod
    def parse(cls, text: str) -> 'LatencyModel':
        """'10', 'fixed:10' or 'uniform:5:20'"""
        parts = text.strip().split(':')
        try:
            if len(parts) == 1:
                return cls.fixed(float(parts[0]))
            if parts[0] == 'fixed' and len(parts) == 2:
                return cls.fixed(float(parts[1]))
            if parts[0] == 'uniform' and len(parts) == 3:
                return cls.uniform(float(parts[1]), float(parts[2]))
        except ValueError as e:
            raise ValueError(f"bad latency model {text!r}: {e}") from e
        raise ValueError(f"bad latency model {text!r}")

    def draw(self, rng: np.random.Generator) -> float:
        if self.high_ms is None:
            return self.low_ms
        return float(rng.uniform(self.low_ms, self.high_ms))


@dataclass(frozen=True)
class FailureEvent:
    time_ms: float
    node: int  # join index
    action: str = 'fail'

    def __post_init__(self):
        if self.action not in ('fail', 'recover'):
            raise ValueError(f"failure action must be fail or recover, got {self.action!r}")


@dataclass
class SimConfig:
    seed: int = SIM_DEFAULT_SEED
    latency: LatencyModel = field(default_factory=LatencyModel)
    nodes: int = 0  # joined sequentially before any script runs
    redundancy: RedundancyConfig = field(default_factory=RedundancyConfig)
    failures: List[FailureEvent] = field(default_factory=list)
    k: int = NEIGHBOR_K
    capacity_bytes: Optional[int] = None
    cheaters: Tuple[int, ...] = ()
    policy: ReplicationPolicy = field(default_factory=ReplicationPolicy)
    block_interval: float = BLOCK_INTERVAL_S
    check_invariants: bool = True
    record_events: bool = True


# ========== TRACES ==========

@dataclass(frozen=True)
class TraceRecord:
    node: str
    time_ms: float
    hops: int
    sender: Optional[str]


@dataclass
class DeliveryTrace:
    """First receipt of one broadcast at every node it reached"""
    msg_id: str
    origin: str
    started_ms: float
    expected: int  # live members when the broadcast started
    records: List[TraceRecord] = field(default_factory=list)
    messages_sent: int = 0
    duplicates: int = 0
    rounds: Optional[int] = None  # gossip only: rounds until full coverage

    def receivers(self) -> Set[str]:
        return {r.node for r in self.records}

    def hops_by_node(self) -> Dict[str, int]:
        return {r.node: r.hops for r in self.records}


@dataclass(frozen=True)
class BroadcastMetrics:
    coverage: float
    max_hops: int
    mean_hops: float
    messages_sent: int
    rounds: Optional[int] = None

    def to_record(self) -> Dict[str, Any]:
        return {'coverage': self.coverage, 'max_hops': self.max_hops, 'mean_hops': self.mean_hops,
                'messages_sent': self.messages_sent, 'rounds': self.rounds}


def metrics(trace: DeliveryTrace) -> BroadcastMetrics:
    hops = [r.hops for r in trace.records if r.node != trace.origin]
    coverage = len(trace.records) / trace.expected if trace.expected else 1.0
    return BroadcastMetrics(
        coverage=min(coverage, 1.0),
        max_hops=max(hops, default=0),
        mean_hops=float(np.mean(hops)) if hops else 0.0,
        messages_sent=trace.messages_sent,
        rounds=trace.rounds,
    )


def traces_frame(traces: Sequence[DeliveryTrace]) -> pd.DataFrame:
    rows = [
        {'msg_id': t.msg_id, 'node': r.node, 'time_ms': r.time_ms, 'hops': r.hops, 'from': r.sender or ''}
        for t in traces for r in t.records
    ]
    return pd.DataFrame(rows, columns=['msg_id', 'node', 'time_ms', 'hops', 'from'])


def export_traces_csv(traces: Sequence[DeliveryTrace], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    traces_frame(traces).to_csv(path, index=False)
    logger.logger.info(f"Exported {len(traces)} traces to {path}")
    return path


# ========== SIMULATOR ==========

NodeRef = Union[int, str]


class Simulator:
    """
    Hosts StorageNodes on a simulated network

    Also a StorageNetwork: workflows issue requests from a client endpoint
    whose replies are routed back through the event queue.
    """

    def __init__(self, config: Optional[SimConfig] = None):
        self.config = config or SimConfig()
        self.rng = np.random.default_rng(self.config.seed)
        self.now = 0.0
        self.nodes: Dict[str, StorageNode] = {}
        self.order: List[str] = []
        self.failed: Set[str] = set()
        self.traces: Dict[bytes, DeliveryTrace] = {}
        self.trace_log: List[DeliveryTrace] = []
        self.event_log: List[Tuple] = []
        self.messages_sent = 0
        self.frames_dropped = 0
        self.ledger = Ledger(clock=lambda: self.now / 1000.0, block_interval=self.config.block_interval)
        self.client_id = sha256_hex(f"client/{self.config.seed}".encode('utf-8'))
        self._queue: List[Tuple[float, int, str, Tuple]] = []
        self._seq = itertools.count()
        self._latency: Dict[Tuple[str, str], float] = {}
        self._client_counter = 0
        self._responses: Dict[int, Any] = {}

        if self.config.nodes:
            self.join(self.config.nodes)
        # failure times count from the end of the initial joins
        for event in self.config.failures:
            self._push(self.now + event.time_ms, event.action, (event.node,))

    # ----- scheduling -----

    def _push(self, time_ms: float, action: str, args: Tuple) -> None:
        heapq.heappush(self._queue, (time_ms, next(self._seq), action, args))

    def latency(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        if key not in self._latency:
            self._latency[key] = self.config.latency.draw(self.rng)
        return self._latency[key]

    def run_until_idle(self, until_ms: Optional[float] = None,
                       stop: Optional[Callable[[], bool]] = None) -> int:
        """Process events in (time, sequence) order; returns the number handled"""
        processed = 0
        while self._queue:
            if stop is not None and stop():
                break
            if until_ms is not None and self._queue[0][0] > until_ms:
                break
            time_ms, _, action, args = heapq.heappop(self._queue)
            self.now = max(self.now, time_ms)
            self._handle(action, args)
            processed += 1
            if self.ledger.pending:
                self.ledger.tick()
            if processed > SIM_MAX_EVENTS:
                raise ScenarioError(f"event budget of {SIM_MAX_EVENTS} exhausted")
        if until_ms is not None:
            self.now = max(self.now, until_ms)
        return processed

    def _send(self, sender: str, out: Outbound, hops: int) -> None:
        frame = encode(out.message)
        self.messages_sent += 1
        trace = self.traces.get(out.message.msg_id)
        if trace is not None:
            trace.messages_sent += 1
        if out.to != self.client_id and (out.to not in self.nodes or out.to in self.failed):
            self._push(self.now, 'refused', (sender, out.to, frame))
            return
        self._push(self.now + self.latency(sender, out.to), 'deliver', (sender, out.to, frame, hops))

    def _send_all(self, sender: str, outs: Sequence[Outbound], hops: int = 1) -> None:
        for out in outs:
            self._send(sender, out, hops)

    def _handle(self, action: str, args: Tuple) -> None:
        if action == 'deliver':
            self._deliver(*args)
        elif action == 'refused':
            self._refused(*args)
        elif action == 'fail':
            self._set_failed(self._resolve_index(args[0]), True)
        elif action == 'recover':
            self._set_failed(self._resolve_index(args[0]), False)

    def _deliver(self, sender: str, to: str, frame: bytes, hops: int) -> None:
        try:
            message = decode(frame)
        except FrameError as e:
            self.frames_dropped += 1
            logger.logger.warning(f"Dropping undecodable frame {sender[:8]}->{to[:8]}: {e}")
            return
        if self.config.record_events:
            self.event_log.append((round(self.now, 6), sender, to, message.msg_id.hex(), hops))

        if to == self.client_id:
            app = message.app()
            self._responses[app.request_id] = app.body
            return
        if to in self.failed or to not in self.nodes:
            self._refused(sender, to, frame)
            return

        trace = self.traces.get(message.msg_id)
        if trace is not None and message.is_broadcast:
            if to in trace.receivers():
                trace.duplicates += 1
            else:
                trace.records.append(TraceRecord(to, self.now, hops, sender))

        try:
            outs = self.nodes[to].handle_message(sender, message)
        except FrameError as e:
            self.frames_dropped += 1
            logger.logger.warning(f"Node {to[:8]} dropped malformed message from {sender[:8]}: {e}")
            return
        for out in outs:
            self._send(to, out, hops + 1 if out.message.msg_id == message.msg_id else 1)
        if self.config.check_invariants and message.kind is MessageKind.GROUP_ID:
            self.check_unique_group_ids()

    def _refused(self, sender: str, to: str, frame: bytes) -> None:
        message = decode(frame)
        if sender == self.client_id:
            self._responses[message.app().request_id] = UnreachableNode(to, "node is down")
            return
        if sender in self.failed or sender not in self.nodes:
            return
        self._send_all(sender, self.nodes[sender].on_send_failure(to, message))

    def _set_failed(self, node_id: Optional[str], failed: bool) -> None:
        if node_id is None:
            return
        if failed:
            self.failed.add(node_id)
        else:
            self.failed.discard(node_id)
        logger.log_event('node_failed' if failed else 'node_recovered',
                         {'node': node_id, 'time_ms': self.now})

    # ----- nodes -----

    def _resolve_index(self, index: int) -> Optional[str]:
        return self.order[index] if 0 <= index < len(self.order) else None

    def node(self, ref: NodeRef) -> StorageNode:
        if isinstance(ref, int):
            node_id = self._resolve_index(ref)
            if node_id is None:
                raise ScenarioError(f"no node with index {ref}")
            return self.nodes[node_id]
        if ref not in self.nodes:
            raise ScenarioError(f"unknown node {ref[:12]}")
        return self.nodes[ref]

    def live_nodes(self) -> List[StorageNode]:
        return [self.nodes[i] for i in self.order if i not in self.failed and self.nodes[i].is_member]

    def live_members(self) -> List[NodeInfo]:
        return [n.info for n in self.live_nodes()]

    def _contract_known(self, receipt: Dict[str, Any]) -> bool:
        try:
            self.ledger.find_transaction(receipt['tx_id'])
            return True
        except (NotFound, KeyError, TypeError):
            return False

    def add_node(self) -> StorageNode:
        index = len(self.order)
        info = node_identity(self.config.seed, index, host='sim', port=index)
        node = StorageNode(
            info,
            store=ObjectStore(capacity_bytes=self.config.capacity_bytes),
            redundancy=self.config.redundancy,
            k=self.config.k,
            cheater=index in self.config.cheaters,
            contract_check=self._contract_known,
        )
        self.nodes[node.node_id] = node
        self.order.append(node.node_id)
        return node

    def _join_entry(self) -> NodeInfo:
        live = self.live_nodes()
        if not live:
            raise ScenarioError("no live member to join through")
        return live[0].info

    def _cluster_primary(self, index: int) -> Optional[NodeInfo]:
        redundancy = self.config.redundancy
        if redundancy.mode is not RedundancyMode.CLUSTER or index % redundancy.cluster_size == 0:
            return None
        return self.nodes[self.order[index - index % redundancy.cluster_size]].info

    def join(self, count: int, concurrent: bool = False) -> List[str]:
        """Add count nodes; the very first one bootstraps the tree"""
        joined = []
        for _ in range(count):
            node = self.add_node()
            joined.append(node.node_id)
            if len(self.order) == 1:
                node.bootstrap()
                continue
            index = len(self.order) - 1
            outs = node.start_join(self._join_entry(), self._cluster_primary(index))
            self._send_all(node.node_id, outs)
            if not concurrent:
                self.run_until_idle()
                self._check_joined(node)
        if concurrent:
            self.run_until_idle()
            for node_id in joined:
                self._check_joined(self.nodes[node_id])
        return joined

    @staticmethod
    def _check_joined(node: StorageNode) -> None:
        if node.join_error is not None:
            raise node.join_error
        if not node.is_member:
            raise JoinFailed(f"{node.info.short_id} did not receive a group id")

    def check_unique_group_ids(self) -> None:
        seen: Dict[str, str] = {}
        for node_id in self.order:
            node = self.nodes[node_id]
            if not node.is_member or node.is_cluster_member:
                continue
            bits = node.group_id.bits
            if bits in seen:
                raise OverlayError(f"group id {bits or '<root>'} held by {seen[bits][:8]} and {node_id[:8]}")
            seen[bits] = node_id

    def height(self) -> int:
        return max((n.group_id.depth for n in self.live_nodes()), default=0)

    # ----- faults -----

    def fail(self, ref: NodeRef, at_ms: Optional[float] = None) -> None:
        self._schedule_fault(ref, 'fail', at_ms)

    def recover(self, ref: NodeRef, at_ms: Optional[float] = None) -> None:
        self._schedule_fault(ref, 'recover', at_ms)

    def _schedule_fault(self, ref: NodeRef, action: str, at_ms: Optional[float]) -> None:
        node_id = self.node(ref).node_id
        if at_ms is None or at_ms <= self.now:
            self._set_failed(node_id, action == 'fail')
        else:
            self._push(at_ms, action, (self.order.index(node_id),))

    def corrupt(self, ref: NodeRef, object_id: str) -> None:
        """Flip one bit of a stored object without updating its id"""
        store = self.node(ref).store
        data = bytearray(store.get(object_id))
        if data:
            data[0] ^= 0x01
        else:
            data = bytearray(b'\x00')
        store.put_unchecked(object_id, bytes(data))

    def holders(self, object_id: str) -> List[str]:
        return [i for i in self.order if self.nodes[i].holds(object_id)]

    def stored_bytes(self) -> Dict[str, Dict[str, bytes]]:
        """Every node's objects, for byte-level comparisons"""
        return {i: {oid: self.nodes[i].store.get(oid) for oid in self.nodes[i].store.object_ids()}
                for i in self.order}

    # ----- broadcasts -----

    def broadcast(self, origin: NodeRef, payload: bytes) -> DeliveryTrace:
        node = self.node(origin)
        if node.node_id in self.failed:
            raise ScenarioError(f"origin {node.info.short_id} is down")
        message, outs = node.broadcast_data(payload)
        trace = DeliveryTrace(msg_id=message.msg_id.hex(), origin=node.node_id, started_ms=self.now,
                              expected=len(self.live_nodes()),
                              records=[TraceRecord(node.node_id, self.now, 0, None)])
        self.traces[message.msg_id] = trace
        self.trace_log.append(trace)
        self._send_all(node.node_id, outs)
        self.run_until_idle()
        return trace

    # ----- StorageNetwork -----

    def entry(self) -> NodeInfo:
        return self._join_entry()

    def _client_request(self, to: NodeInfo, tag: AppTag, body: Any) -> int:
        self._client_counter += 1
        request_id = self._client_counter
        message = OverlayMessage(kind=MessageKind.APP, msg_id=message_id(self.client_id, request_id),
                                 origin=self.client_id,
                                 payload=AppPayload(tag, request_id, body).to_bytes())
        self._send(self.client_id, Outbound(to.node_id, message, to), 1)
        return request_id

    def _response(self, request_id: int, to: NodeInfo) -> Any:
        if request_id not in self._responses:
            return UnreachableNode(to.node_id, "no response")
        return self._responses.pop(request_id)

    def request(self, to: NodeInfo, tag: AppTag, body: Any) -> Any:
        request_id = self._client_request(to, tag, body)
        self.run_until_idle(stop=lambda: request_id in self._responses)
        result = self._response(request_id, to)
        if isinstance(result, Exception):
            raise result
        return result

    def request_many(self, calls: Sequence[Tuple[NodeInfo, AppTag, Any]]) -> List[Any]:
        request_ids = [self._client_request(to, tag, body) for to, tag, body in calls]
        self.run_until_idle(stop=lambda: all(r in self._responses for r in request_ids))
        return [self._response(r, to) for r, (to, _, _) in zip(request_ids, calls)]

    def audit(self) -> AuditReport:
        return audit_round(StorageClient(self), self.config.policy)


# ========== GOSSIP BASELINE ==========

def gossip_baseline(config: SimConfig, fanout: int, rounds: Optional[int] = None,
                    origin: int = 0) -> DeliveryTrace:
    """
    Round-based push gossip over config.nodes peers: every informed node
    pushes to fanout distinct random peers per round
    """
    if fanout < 1:
        raise ValueError(f"fanout must be >= 1, got {fanout}")
    n = config.nodes
    if n < 1 or not 0 <= origin < n:
        raise ValueError(f"need at least one node and a valid origin (nodes={n}, origin={origin})")
    rng = np.random.default_rng(config.seed)
    ids = [node_identity(config.seed, i).node_id for i in range(n)]
    limit = rounds if rounds is not None else max(64, 8 * n)

    informed: Dict[int, int] = {origin: 0}
    trace = DeliveryTrace(msg_id=sha256_hex(f"gossip/{config.seed}/{fanout}".encode('utf-8')),
                          origin=ids[origin], started_ms=0.0, expected=n,
                          records=[TraceRecord(ids[origin], 0.0, 0, None)])
    round_no = 0
    while len(informed) < n and round_no < limit:
        round_no += 1
        newly: Dict[int, Tuple[int, int]] = {}
        for sender in sorted(informed):
            peers = [p for p in range(n) if p != sender]
            chosen = rng.choice(peers, size=min(fanout, len(peers)), replace=False)
            for peer in (int(p) for p in chosen):
                trace.messages_sent += 1
                if peer in informed or peer in newly:
                    trace.duplicates += 1
                else:
                    newly[peer] = (sender, informed[sender] + 1)
        for peer, (sender, hops) in sorted(newly.items()):
            informed[peer] = hops
            trace.records.append(TraceRecord(ids[peer], round_no * config.latency.low_ms, hops, ids[sender]))
    trace.rounds = round_no if len(informed) == n else None
    return trace


# ========== SCENARIOS ==========

_TIME = re.compile(r'^(\d+(?:\.\d+)?)(ms|s)?$')


def parse_time(text: str) -> float:
    """'120ms', '120' (ms) or '1.5s' -> milliseconds"""
    match = _TIME.match(text)
    if not match:
        raise ValueError(f"bad time {text!r}")
    value = float(match.group(1))
    return value * 1000.0 if match.group(2) == 's' else value


@dataclass
class SimulationResult:
    simulator: Simulator
    traces: List[DeliveryTrace]
    outputs: List[Dict[str, Any]]

    def trace_csv(self) -> str:
        return traces_frame(self.traces).to_csv(index=False)


class ScenarioRunner:
    """
    Executes a line-oriented scenario script against a Simulator

    Commands:
        join N [concurrent]
        broadcast from X payload HEX
        fail node X [at T] / recover node X [at T]
        wait T
        put USER PATH [SIZE | file LOCAL]
        get USER PATH [from OWNER]
        mkdir USER PATH
        share USER PATH RECEIVER
        accept USER
        corrupt node X object PREFIX
        audit
        metrics
        gossip fanout F [rounds R]
    """

    def __init__(self, simulator: Simulator, base_dir: Optional[Path] = None):
        self.sim = simulator
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.sessions: Dict[str, workflows.UserSession] = {}
        self.outputs: List[Dict[str, Any]] = []
        self.last_trace: Optional[DeliveryTrace] = None

    def session(self, name: str) -> workflows.UserSession:
        if name not in self.sessions:
            seed = self.sim.config.seed
            self.sessions[name] = workflows.UserSession(
                keygen(seed=f"user/{seed}/{name}"), self.sim.ledger, self.sim,
                rng=RandomSource(f"user-rng/{seed}/{name}"), policy=self.sim.config.policy,
            )
        return self.sessions[name]

    def public_key(self, name: str) -> PublicKey:
        return self.session(name).keys.public

    def execute(self, script: str) -> List[Dict[str, Any]]:
        for number, raw in enumerate(script.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            try:
                self.step(line.split())
            except (ValueError, IndexError, KeyError) as e:
                raise ScenarioError(f"malformed step {line!r}: {e}", number) from e
            except ScenarioError as e:
                if e.line is None:
                    raise ScenarioError(str(e), number) from e
                raise
        return self.outputs

    def step(self, words: List[str]) -> None:
        command = words[0]
        handler = getattr(self, f"_cmd_{command}", None)
        if handler is None:
            raise ScenarioError(f"unknown command {command!r}")
        handler(words[1:])

    @staticmethod
    def _expect(words: List[str], position: int, keyword: str) -> None:
        if len(words) <= position or words[position] != keyword:
            raise ScenarioError(f"expected {keyword!r} at word {position + 1}")

    def _at(self, words: List[str], position: int) -> Optional[float]:
        if len(words) <= position:
            return None
        self._expect(words, position, 'at')
        return parse_time(words[position + 1])

    def _cmd_join(self, args: List[str]) -> None:
        count = int(args[0])
        concurrent = len(args) > 1 and args[1] == 'concurrent'
        if len(args) > 1 and not concurrent:
            raise ScenarioError(f"unexpected {args[1]!r} after join count")
        self.sim.join(count, concurrent=concurrent)
        self.outputs.append({'op': 'join', 'count': count, 'height': self.sim.height()})

    def _cmd_broadcast(self, args: List[str]) -> None:
        self._expect(args, 0, 'from')
        self._expect(args, 2, 'payload')
        payload = bytes.fromhex(args[3])
        self.last_trace = self.sim.broadcast(int(args[1]), payload)
        self.outputs.append({'op': 'broadcast', 'msg_id': self.last_trace.msg_id,
                             **metrics(self.last_trace).to_record()})

    def _fault(self, args: List[str], action: str) -> None:
        self._expect(args, 0, 'node')
        index = int(args[1])
        at_ms = self._at(args, 2)
        if action == 'fail':
            self.sim.fail(index, at_ms)
        else:
            self.sim.recover(index, at_ms)

    def _cmd_fail(self, args: List[str]) -> None:
        self._fault(args, 'fail')

    def _cmd_recover(self, args: List[str]) -> None:
        self._fault(args, 'recover')

    def _cmd_wait(self, args: List[str]) -> None:
        self.sim.run_until_idle(until_ms=self.sim.now + parse_time(args[0]))

    def _content(self, user: str, path: str, args: List[str]) -> bytes:
        if args and args[0] == 'file':
            return (self.base_dir / args[1]).read_bytes()
        size = int(args[0]) if args else 1024
        return RandomSource(f"content/{self.sim.config.seed}/{user}/{path}").random_bytes(size)

    def _cmd_put(self, args: List[str]) -> None:
        user, path = args[0], args[1]
        content = self._content(user, path, args[2:])
        receipt = workflows.put_file(self.session(user), path, content)
        self.outputs.append({'op': 'put', 'user': user, 'path': path, 'size': len(content),
                             'sha256': sha256_hex(content), 'tx_id': receipt.tx_id})

    def _cmd_get(self, args: List[str]) -> None:
        user, path = args[0], args[1]
        owner = None
        if len(args) > 2:
            self._expect(args, 2, 'from')
            owner = self.public_key(args[3]).digest()
        content = workflows.get_file(self.session(user), path, owner=owner)
        self.outputs.append({'op': 'get', 'user': user, 'path': path, 'size': len(content),
                             'sha256': sha256_hex(content)})

    def _cmd_mkdir(self, args: List[str]) -> None:
        receipt = workflows.make_folder(self.session(args[0]), args[1])
        self.outputs.append({'op': 'mkdir', 'user': args[0], 'path': args[1], 'tx_id': receipt.tx_id})

    def _cmd_share(self, args: List[str]) -> None:
        user, path, receiver = args[0], args[1], args[2]
        receipt = workflows.share_file(self.session(user), self.public_key(receiver), path)
        self.outputs.append({'op': 'share', 'user': user, 'path': path, 'receiver': receiver,
                             'tx_id': receipt.tx_id})

    def _cmd_accept(self, args: List[str]) -> None:
        session = self.session(args[0])
        for grant in workflows.pending_shares(session):
            receipt = workflows.accept_share(session, grant)
            self.outputs.append({'op': 'accept', 'user': args[0], 'grant': grant.tx_id,
                                 'tx_id': receipt.tx_id})

    def _cmd_corrupt(self, args: List[str]) -> None:
        self._expect(args, 0, 'node')
        self._expect(args, 2, 'object')
        node = self.sim.node(int(args[1]))
        matches = [oid for oid in node.store.object_ids() if oid.startswith(args[3])]
        if len(matches) != 1:
            raise ScenarioError(f"prefix {args[3]!r} matches {len(matches)} objects on node {args[1]}")
        self.sim.corrupt(int(args[1]), matches[0])

    def _cmd_audit(self, args: List[str]) -> None:
        report = self.sim.audit()
        self.outputs.append({'op': 'audit', **report.summary()})

    def _cmd_metrics(self, args: List[str]) -> None:
        if self.last_trace is None:
            raise ScenarioError("metrics before any broadcast")
        self.outputs.append({'op': 'metrics', **metrics(self.last_trace).to_record()})

    def _cmd_gossip(self, args: List[str]) -> None:
        self._expect(args, 0, 'fanout')
        fanout = int(args[1])
        rounds = None
        if len(args) > 2:
            self._expect(args, 2, 'rounds')
            rounds = int(args[3])
        config = SimConfig(seed=self.sim.config.seed, latency=self.sim.config.latency,
                           nodes=max(len(self.sim.live_nodes()), 1))
        self.last_trace = gossip_baseline(config, fanout, rounds)
        self.outputs.append({'op': 'gossip', 'fanout': fanout, **metrics(self.last_trace).to_record()})


def run(config: SimConfig, script: str, base_dir: Optional[Path] = None) -> SimulationResult:
    """Build a simulator from config and execute the scenario script"""
    simulator = Simulator(config)
    runner = ScenarioRunner(simulator, base_dir)
    try:
        runner.execute(script)
    except MtfsError as e:
        logger.logger.error(f"Scenario stopped: {e}")
        raise
    return SimulationResult(simulator, list(simulator.trace_log), runner.outputs)
