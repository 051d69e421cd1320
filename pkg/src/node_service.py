"""
TCP service hosting one StorageNode, plus the client side used by the CLI

All node state is touched from one asyncio loop: connection readers feed
an inbox and a single worker hands messages to the node in arrival order.
"""
import asyncio
import time
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from config.settings import (
    BACKOFF_ATTEMPTS, DEFAULT_HOST, DEFAULT_PORT, NEIGHBOR_K, REQUEST_TIMEOUT_S, SIM_DEFAULT_SEED
)
from src.crypto_pre import RandomSource
from src.errors import (
    FrameError, JoinFailed, MtfsError, NotFound, PeerClosed, TransportError, UnreachableNode
)
from src.event_logger import logger
from src.ledger import Ledger
from src.merkle_store import ObjectStore
from src.storage_node import StorageNode, node_identity
from src.transport import (
    Connection, EventLoopThread, bound_port, connect, hello_message, listen, parse_hello
)
from src.tree_overlay import (
    AppPayload, AppTag, MessageKind, NodeInfo, OverlayMessage, Outbound, RedundancyConfig,
    RedundancyMode, message_id
)

_POLL_S = 0.01


class NodeService:
    """
    Serves one StorageNode over TCP

    Peers and clients open a connection, send HELLO, and get ours back.
    Outbound messages reuse an existing connection to the peer or dial its
    advertised address.
    """

    def __init__(self, node: StorageNode, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
                 dial_attempts: int = BACKOFF_ATTEMPTS):
        self.node = node
        self.host = host
        self.port = port
        self.dial_attempts = dial_attempts
        self.connections: Dict[str, Connection] = {}
        self.server: Optional[asyncio.AbstractServer] = None
        self.inbox: Optional[asyncio.Queue] = None
        self.is_running = False
        self.frames_in = 0
        self.frames_out = 0
        self.send_failures = 0
        self.started_at: Optional[float] = None
        self._tasks: Set[asyncio.Task] = set()

    @property
    def node_id(self) -> str:
        return self.node.node_id

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def start(self) -> 'NodeService':
        if self.is_running:
            logger.logger.warning("Node service already running")
            return self
        self.server = await listen(self.host, self.port, self._serve)
        self.port = bound_port(self.server)
        # advertise the bound address before anyone learns about us
        self.node.info = NodeInfo(self.node_id, self.host, self.port, self.node.group_id)
        self.inbox = asyncio.Queue()
        self._spawn(self._worker())
        self.is_running = True
        self.started_at = time.time()
        logger.log_event('node_started', {'node': self.node_id, 'host': self.host, 'port': self.port})
        return self

    async def bootstrap(self) -> None:
        await self.dispatch(self.node.bootstrap())

    async def join(self, entry: NodeInfo, cluster_with: Optional[NodeInfo] = None,
                   timeout: float = REQUEST_TIMEOUT_S) -> None:
        """Join through entry and wait for a group id"""
        await self.dispatch(self.node.start_join(entry, cluster_with))
        deadline = time.monotonic() + timeout
        while not self.node.is_member and self.node.join_error is None:
            if time.monotonic() > deadline:
                raise JoinFailed(f"{self.node.info.short_id} got no group id within {timeout}s")
            await asyncio.sleep(_POLL_S)
        if self.node.join_error is not None:
            raise self.node.join_error

    # ----- inbound -----

    async def _serve(self, connection: Connection) -> None:
        peer = parse_hello(await connection.recv())
        connection.peer = peer
        await connection.send(hello_message(self.node.info, message_id(self.node_id, self.node.next_request_id())))
        self.connections[peer.node_id] = connection
        await self._read_loop(connection)

    async def _read_loop(self, connection: Connection) -> None:
        peer_id = connection.peer.node_id
        try:
            while True:
                message = await connection.recv()
                self.frames_in += 1
                await self.inbox.put((peer_id, message))
        except PeerClosed:
            logger.logger.debug(f"Connection to {peer_id[:8]} closed")
        except FrameError as e:
            logger.logger.warning(f"Bad frame from {peer_id[:8]}, dropping connection: {e}")
        finally:
            if self.connections.get(peer_id) is connection:
                del self.connections[peer_id]
            await connection.close()

    async def _worker(self) -> None:
        while True:
            sender, message = await self.inbox.get()
            try:
                outs = self.node.handle_message(sender, message)
            except FrameError as e:
                logger.logger.warning(f"Malformed message from {sender[:8]}: {e}")
                continue
            except MtfsError as e:
                logger.logger.error(f"Handling message from {sender[:8]} failed: {e}")
                continue
            await self.dispatch(outs)

    # ----- outbound -----

    async def dispatch(self, outs: Sequence[Outbound]) -> None:
        pending = list(outs)
        while pending:
            out = pending.pop(0)
            try:
                connection = await self._connection_for(out)
                await connection.send(out.message)
                self.frames_out += 1
            except (TransportError, UnreachableNode, FrameError, OSError) as e:
                self.send_failures += 1
                logger.logger.debug(f"Send to {out.to[:8]} failed: {e}")
                pending.extend(self.node.on_send_failure(out.to, out.message))

    def _lookup(self, node_id: str) -> Optional[NodeInfo]:
        return next((n for n in self.node.directory() if n.node_id == node_id), None)

    async def _connection_for(self, out: Outbound) -> Connection:
        connection = self.connections.get(out.to)
        if connection is not None and not connection.closed:
            return connection
        contact = out.contact if out.contact is not None and out.contact.port else self._lookup(out.to)
        if contact is None or not contact.port:
            raise UnreachableNode(out.to, "no address known")

        connection = await connect(contact.host, contact.port, attempts=self.dial_attempts)
        await connection.send(hello_message(self.node.info, message_id(self.node_id, self.node.next_request_id())))
        peer = parse_hello(await connection.recv())
        if peer.node_id != out.to:
            await connection.close()
            raise UnreachableNode(out.to, f"{contact.host}:{contact.port} is {peer.short_id}")
        connection.peer = peer
        self.connections[peer.node_id] = connection
        self._spawn(self._read_loop(connection))
        return connection

    # ----- lifecycle -----

    async def stop(self) -> None:
        if not self.is_running:
            return
        self.is_running = False
        if self.server is not None:
            self.server.close()
        for task in list(self._tasks):
            task.cancel()
        for connection in list(self.connections.values()):
            await connection.close()
        self.connections.clear()
        logger.log_event('node_stopped', {'node': self.node_id, 'metrics': self.get_metrics()})

    def get_metrics(self) -> Dict[str, Any]:
        group_id = self.node.group_id
        return {
            'node': self.node_id,
            'address': f"{self.host}:{self.port}",
            'group_id': None if group_id is None else group_id.bits,
            'connections': len(self.connections),
            'frames_in': self.frames_in,
            'frames_out': self.frames_out,
            'send_failures': self.send_failures,
            'objects': len(self.node.store.object_ids()),
            'used_bytes': self.node.store.used_bytes,
            'members': len(self.node.directory()),
            'handling': self.node.perf.get_metrics(),
            'uptime_s': 0.0 if self.started_at is None else time.time() - self.started_at,
        }

    async def run(self, entry: Optional[NodeInfo] = None, cluster_with: Optional[NodeInfo] = None,
                  duration: Optional[float] = None) -> None:
        """
        Start, bootstrap or join, then serve

        Args:
            duration: seconds to serve (None = until cancelled)
        """
        await self.start()
        try:
            if entry is None:
                await self.bootstrap()
            else:
                await self.join(entry, cluster_with)
            logger.logger.info(f"Node {self.node.info.short_id} serving at {self.host}:{self.port} "
                               f"as group {self.node.group_id}")
            started = time.monotonic()
            while self.is_running:
                if duration is not None and time.monotonic() - started > duration:
                    break
                await asyncio.sleep(0.5)
        finally:
            await self.stop()


async def probe(host: str, port: int, attempts: int = BACKOFF_ATTEMPTS) -> NodeInfo:
    """HELLO exchange with a node; returns its advertised info"""
    connection = await connect(host, port, attempts=attempts)
    try:
        client = NodeInfo(RandomSource().random_bytes(32).hex())
        await connection.send(hello_message(client, message_id(client.node_id, 0)))
        return parse_hello(await connection.recv())
    finally:
        await connection.close()


# ========== CLIENT ==========

class TcpNetwork:
    """
    StorageNetwork over TCP for user workflows

    Requests are correlated with replies by request id; a request that gets
    no reply within the timeout fails with UnreachableNode.
    """

    def __init__(self, entry_host: str, entry_port: int, loop_thread: Optional[EventLoopThread] = None,
                 name: str = "mtfs-client", timeout: float = REQUEST_TIMEOUT_S,
                 dial_attempts: int = BACKOFF_ATTEMPTS):
        self.entry_host = entry_host
        self.entry_port = entry_port
        self.timeout = timeout
        self.dial_attempts = dial_attempts
        self._owns_loop = loop_thread is None
        self.loop_thread = loop_thread or EventLoopThread(name).start()
        self.info = NodeInfo(RandomSource().random_bytes(32).hex())
        self._entry: Optional[NodeInfo] = None
        self._connections: Dict[str, Connection] = {}
        self._futures: Dict[int, asyncio.Future] = {}
        self._waiting_on: Dict[int, str] = {}
        self._counter = 0

    # ----- asyncio side -----

    async def _open(self, host: str, port: int) -> Tuple[Connection, NodeInfo]:
        try:
            connection = await connect(host, port, attempts=self.dial_attempts)
        except TransportError as e:
            raise UnreachableNode(f"{host}:{port}", str(e)) from e
        await connection.send(hello_message(self.info, message_id(self.info.node_id, 0)))
        peer = parse_hello(await connection.recv())
        connection.peer = peer
        self._connections[peer.node_id] = connection
        asyncio.get_running_loop().create_task(self._reader(connection))
        return connection, peer

    async def _reader(self, connection: Connection) -> None:
        peer_id = connection.peer.node_id
        try:
            while True:
                message = await connection.recv()
                if message.kind is not MessageKind.APP:
                    continue
                app = message.app()
                future = self._futures.pop(app.request_id, None)
                self._waiting_on.pop(app.request_id, None)
                if future is not None and not future.done():
                    future.set_result(app.body)
        except (PeerClosed, FrameError) as e:
            logger.logger.debug(f"Client connection to {peer_id[:8]} ended: {e}")
        finally:
            if self._connections.get(peer_id) is connection:
                del self._connections[peer_id]
            for request_id, node_id in list(self._waiting_on.items()):
                if node_id == peer_id:
                    self._waiting_on.pop(request_id)
                    future = self._futures.pop(request_id, None)
                    if future is not None and not future.done():
                        future.set_exception(UnreachableNode(peer_id, "connection closed"))
            await connection.close()

    async def _connection(self, to: NodeInfo) -> Connection:
        connection = self._connections.get(to.node_id)
        if connection is not None and not connection.closed:
            return connection
        if not to.port:
            raise UnreachableNode(to.node_id, "no address known")
        connection, peer = await self._open(to.host, to.port)
        if peer.node_id != to.node_id:
            raise UnreachableNode(to.node_id, f"{to.host}:{to.port} is {peer.short_id}")
        return connection

    async def _request(self, to: NodeInfo, tag: AppTag, body: Any) -> Any:
        try:
            connection = await self._connection(to)
        except (TransportError, FrameError, OSError) as e:
            raise UnreachableNode(to.node_id, str(e)) from e
        self._counter += 1
        request_id = self._counter
        future = asyncio.get_running_loop().create_future()
        self._futures[request_id] = future
        self._waiting_on[request_id] = to.node_id
        message = OverlayMessage(kind=MessageKind.APP, msg_id=message_id(self.info.node_id, request_id),
                                 origin=self.info.node_id,
                                 payload=AppPayload(tag, request_id, body).to_bytes())
        try:
            await connection.send(message)
            return await asyncio.wait_for(future, self.timeout)
        except PeerClosed as e:
            raise UnreachableNode(to.node_id, str(e)) from e
        except asyncio.TimeoutError as e:
            raise UnreachableNode(to.node_id, f"no reply within {self.timeout}s") from e
        finally:
            self._futures.pop(request_id, None)
            self._waiting_on.pop(request_id, None)

    async def _request_many(self, calls: Sequence[Tuple[NodeInfo, AppTag, Any]]) -> List[Any]:
        results = await asyncio.gather(*(self._request(to, tag, body) for to, tag, body in calls),
                                       return_exceptions=True)
        return [r if not isinstance(r, Exception) or isinstance(r, MtfsError)
                else UnreachableNode(to.node_id, str(r)) for r, (to, _, _) in zip(results, calls)]

    # ----- StorageNetwork -----

    def entry(self) -> NodeInfo:
        if self._entry is None:
            _, self._entry = self.loop_thread.run(self._open(self.entry_host, self.entry_port))
        return self._entry

    def request(self, to: NodeInfo, tag: AppTag, body: Any) -> Any:
        return self.loop_thread.run(self._request(to, tag, body))

    def request_many(self, calls: Sequence[Tuple[NodeInfo, AppTag, Any]]) -> List[Any]:
        return self.loop_thread.run(self._request_many(calls))

    def close(self) -> None:
        async def _close_all():
            for connection in list(self._connections.values()):
                await connection.close()
            self._connections.clear()

        if self.loop_thread.loop.is_running():
            self.loop_thread.run(_close_all(), timeout=5)
        if self._owns_loop:
            self.loop_thread.stop()


# ========== LOCAL CLUSTER ==========

class TcpCluster:
    """
    N node services on loopback sharing one event loop

    Node identities and join order follow the simulator's so both
    transports build the same tree from the same seed.
    """

    def __init__(self, size: int, seed: int = SIM_DEFAULT_SEED,
                 redundancy: Optional[RedundancyConfig] = None, ledger: Optional[Ledger] = None,
                 host: str = DEFAULT_HOST, k: int = NEIGHBOR_K, capacity_bytes: Optional[int] = None,
                 dial_attempts: int = 2, timeout: float = REQUEST_TIMEOUT_S):
        if size < 1:
            raise ValueError(f"cluster size must be >= 1, got {size}")
        self.size = size
        self.seed = seed
        self.redundancy = redundancy or RedundancyConfig()
        self.ledger = ledger if ledger is not None else Ledger()
        self.host = host
        self.k = k
        self.capacity_bytes = capacity_bytes
        self.dial_attempts = dial_attempts
        self.timeout = timeout
        self.loop_thread = EventLoopThread("mtfs-cluster")
        self.services: List[NodeService] = []
        self._networks: List[TcpNetwork] = []

    def _contract_known(self, receipt: Dict[str, Any]) -> bool:
        try:
            self.ledger.find_transaction(receipt['tx_id'])
            return True
        except (NotFound, KeyError, TypeError):
            return False

    def _cluster_primary(self, index: int) -> Optional[NodeInfo]:
        size = self.redundancy.cluster_size
        if self.redundancy.mode is not RedundancyMode.CLUSTER or index % size == 0:
            return None
        return self.services[index - index % size].node.info

    async def _settle(self, count: int) -> None:
        """Wait until every node knows all members and the same open branches"""
        deadline = time.monotonic() + self.timeout
        while time.monotonic() < deadline:
            nodes = [s.node for s in self.services]
            if (all(len(n.directory()) == count for n in nodes)
                    and len({frozenset(n.book.slots()) for n in nodes}) == 1):
                return
            await asyncio.sleep(_POLL_S)
        raise JoinFailed(f"cluster of {count} did not settle within {self.timeout}s")

    async def _start_all(self) -> None:
        for index in range(self.size):
            info = node_identity(self.seed, index, self.host, 0)
            node = StorageNode(info, store=ObjectStore(capacity_bytes=self.capacity_bytes),
                               redundancy=self.redundancy, k=self.k, contract_check=self._contract_known)
            service = NodeService(node, self.host, 0, dial_attempts=self.dial_attempts)
            await service.start()
            self.services.append(service)
            if index == 0:
                await service.bootstrap()
            else:
                await service.join(self.services[0].node.info, self._cluster_primary(index), self.timeout)
            await self._settle(index + 1)

    def start(self) -> 'TcpCluster':
        self.loop_thread.start()
        self.loop_thread.run(self._start_all())
        logger.logger.info(f"Started TCP cluster of {self.size} nodes")
        return self

    def network(self) -> TcpNetwork:
        entry = self.services[0]
        network = TcpNetwork(entry.host, entry.port, loop_thread=self.loop_thread,
                             timeout=self.timeout, dial_attempts=self.dial_attempts)
        self._networks.append(network)
        return network

    def nodes(self) -> List[StorageNode]:
        return [s.node for s in self.services]

    def stop(self) -> None:
        for network in self._networks:
            network.close()
        for service in self.services:
            self.loop_thread.run(service.stop(), timeout=10)
        self.loop_thread.stop()

    def __enter__(self) -> 'TcpCluster':
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
