"""
Wire format and TCP plumbing

Frame layout (all integers big-endian):
    length(4) | version(1) | kind(1) | msg_id(32) | origin(32) | variant payload

    AVAILABLE/DISCARDED: count(2), then per branch
        group id | side(1) | has_contact(1) [| node_id(32) | host_len(1) | host | port(2)]
    GROUP_ID: group id
    APP: raw APP payload (tag, request id, msgpack body)

A group id is its bit length (2) followed by the bits packed MSB first.
"""
import asyncio
import threading
from typing import Awaitable, Callable, List, Optional

from config.settings import BACKOFF_ATTEMPTS, BACKOFF_BASE_MS, BACKOFF_CAP_S, MAX_FRAME_SIZE
from src.errors import (
    ConnectionRefused, FrameError, MalformedFrame, PeerClosed, Truncated,
    UnknownVariant, VersionError
)
from src.event_logger import logger
from src.tree_overlay import (
    AppPayload, AppTag, GroupId, MessageKind, NodeInfo, OpenBranch, OverlayMessage, Side
)

WIRE_VERSION = 1
HEADER_SIZE = 4
ID_SIZE = 32
_BRANCH_KINDS = (MessageKind.AVAILABLE_BRANCHES, MessageKind.DISCARDED_BRANCHES)


# ========== CODEC ==========

def _encode_contact(contact: Optional[NodeInfo]) -> bytes:
    if contact is None:
        return b'\x00'
    host = contact.host.encode('utf-8')
    if len(host) > 255 or not 0 <= contact.port <= 0xFFFF:
        raise MalformedFrame("contact address does not fit the wire format")
    return (b'\x01' + _id_bytes(contact.node_id) + bytes([len(host)]) + host
            + contact.port.to_bytes(2, 'big'))


def _id_bytes(hex_id: str) -> bytes:
    try:
        raw = bytes.fromhex(hex_id)
    except (TypeError, ValueError) as e:
        raise MalformedFrame(f"id is not hex: {hex_id!r}") from e
    if len(raw) != ID_SIZE:
        raise MalformedFrame(f"id must be {ID_SIZE} bytes, got {len(raw)}")
    return raw


def encode(message: OverlayMessage) -> bytes:
    if len(message.msg_id) != ID_SIZE:
        raise MalformedFrame(f"msg_id must be {ID_SIZE} bytes")
    body = bytearray([WIRE_VERSION, int(message.kind)])
    body += message.msg_id
    body += _id_bytes(message.origin)

    if message.kind in _BRANCH_KINDS:
        body += len(message.branches).to_bytes(2, 'big')
        for branch in message.branches:
            body += branch.parent_group_id.to_bytes()
            body.append(int(branch.side))
            body += _encode_contact(branch.parent_contact)
    elif message.kind is MessageKind.GROUP_ID:
        if message.assigned is None:
            raise MalformedFrame("GROUP_ID message without an assigned id")
        body += message.assigned.to_bytes()
    else:
        body += message.payload

    return len(body).to_bytes(HEADER_SIZE, 'big') + bytes(body)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def byte(self) -> int:
        return self.take(1)[0]

    def group_id(self) -> GroupId:
        gid, self.offset = GroupId.from_bytes(self.data, self.offset)
        return gid

    def done(self) -> bool:
        return self.offset == len(self.data)


def _decode_branch(reader: _Reader) -> OpenBranch:
    parent = reader.group_id()
    side_byte = reader.byte()
    if side_byte not in (0, 1):
        raise MalformedFrame(f"branch side must be 0 or 1, got {side_byte}")
    flag = reader.byte()
    contact = None
    if flag == 1:
        node_id = reader.take(ID_SIZE).hex()
        host_len = reader.byte()
        try:
            host = reader.take(host_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise MalformedFrame("contact host is not UTF-8") from e
        port = int.from_bytes(reader.take(2), 'big')
        contact = NodeInfo(node_id, host, port, parent)
    elif flag != 0:
        raise MalformedFrame(f"bad contact flag {flag}")
    return OpenBranch(parent, Side(side_byte), contact)


def decode(data: bytes) -> OverlayMessage:
    """Decode exactly one complete frame"""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise Truncated("frame shorter than its length prefix")
    length = int.from_bytes(data[:HEADER_SIZE], 'big')
    if len(data) < HEADER_SIZE + length:
        raise Truncated(f"frame declares {length} bytes, {len(data) - HEADER_SIZE} present")
    if len(data) > HEADER_SIZE + length:
        raise MalformedFrame("trailing bytes after frame")

    reader = _Reader(data, HEADER_SIZE)
    version = reader.byte()
    if version != WIRE_VERSION:
        raise VersionError(f"unsupported wire version {version}")
    kind_byte = reader.byte()
    try:
        kind = MessageKind(kind_byte)
    except ValueError as e:
        raise UnknownVariant(f"unknown message kind {kind_byte}") from e
    msg_id = reader.take(ID_SIZE)
    origin = reader.take(ID_SIZE).hex()

    if kind in _BRANCH_KINDS:
        count = int.from_bytes(reader.take(2), 'big')
        branches = tuple(_decode_branch(reader) for _ in range(count))
        if not reader.done():
            raise MalformedFrame("trailing bytes after branch list")
        return OverlayMessage(kind=kind, msg_id=msg_id, origin=origin, branches=branches)
    if kind is MessageKind.GROUP_ID:
        assigned = reader.group_id()
        if not reader.done():
            raise MalformedFrame("trailing bytes after group id")
        return OverlayMessage(kind=kind, msg_id=msg_id, origin=origin, assigned=assigned)
    return OverlayMessage(kind=kind, msg_id=msg_id, origin=origin, payload=data[reader.offset:])


def hello_message(info: NodeInfo, msg_id: bytes) -> OverlayMessage:
    """Link-local identification sent first on every connection"""
    payload = AppPayload(AppTag.HELLO, 0, info.to_record()).to_bytes()
    return OverlayMessage(kind=MessageKind.APP, msg_id=msg_id, origin=info.node_id, payload=payload)


def parse_hello(message: OverlayMessage) -> NodeInfo:
    if message.kind is not MessageKind.APP:
        raise MalformedFrame("expected HELLO as first frame")
    app = message.app()
    if app.tag != AppTag.HELLO:
        raise MalformedFrame(f"expected HELLO as first frame, got tag {app.tag!r}")
    return NodeInfo.from_record(app.body)


# ========== CONNECTIONS ==========

class Connection:
    """One TCP stream of frames; sends are serialized, reads belong to one task"""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.peer: Optional[NodeInfo] = None
        self._send_lock = asyncio.Lock()

    @property
    def closed(self) -> bool:
        return self.writer.is_closing()

    async def send(self, message: OverlayMessage) -> None:
        data = encode(message)
        async with self._send_lock:
            try:
                self.writer.write(data)
                await self.writer.drain()
            except (ConnectionError, RuntimeError) as e:
                raise PeerClosed(f"send failed: {e}") from e

    async def recv(self) -> OverlayMessage:
        try:
            header = await self.reader.readexactly(HEADER_SIZE)
            length = int.from_bytes(header, 'big')
            if length > MAX_FRAME_SIZE:
                raise MalformedFrame(f"frame of {length} bytes exceeds {MAX_FRAME_SIZE}")
            body = await self.reader.readexactly(length)
        except asyncio.IncompleteReadError as e:
            raise PeerClosed("peer closed the connection") from e
        except ConnectionError as e:
            raise PeerClosed(str(e)) from e
        return decode(header + body)

    async def close(self) -> None:
        if not self.writer.is_closing():
            self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


def backoff_delays(attempts: int = BACKOFF_ATTEMPTS, base_ms: float = BACKOFF_BASE_MS,
                   cap_s: float = BACKOFF_CAP_S) -> List[float]:
    """Seconds to wait between connection attempts"""
    return [min(cap_s, base_ms / 1000.0 * 2 ** i) for i in range(max(attempts - 1, 0))]


async def connect(host: str, port: int, attempts: int = BACKOFF_ATTEMPTS,
                  base_ms: float = BACKOFF_BASE_MS, cap_s: float = BACKOFF_CAP_S) -> Connection:
    delays = backoff_delays(attempts, base_ms, cap_s)
    last_error: Optional[Exception] = None
    for attempt in range(attempts):
        try:
            reader, writer = await asyncio.open_connection(host, port)
            return Connection(reader, writer)
        except OSError as e:
            last_error = e
            if attempt < len(delays):
                logger.logger.debug(f"Connect to {host}:{port} failed ({e}); retry in {delays[attempt]:.1f}s")
                await asyncio.sleep(delays[attempt])
    raise ConnectionRefused(f"{host}:{port} unreachable after {attempts} attempts: {last_error}")


async def listen(host: str, port: int,
                 on_connection: Callable[[Connection], Awaitable[None]]) -> asyncio.AbstractServer:
    async def _accept(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        connection = Connection(reader, writer)
        try:
            await on_connection(connection)
        except FrameError as e:
            logger.logger.warning(f"Dropping connection after bad frame: {e}")
        except PeerClosed:
            pass
        finally:
            await connection.close()

    return await asyncio.start_server(_accept, host, port)


def bound_port(server: asyncio.AbstractServer) -> int:
    return server.sockets[0].getsockname()[1]


class EventLoopThread:
    """An asyncio loop on a daemon thread so synchronous callers can drive coroutines"""

    def __init__(self, name: str = "mtfs-loop"):
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _run(self) -> None:
        asyncio.set_event_loop(self.loop)
        self.loop.run_forever()

    def start(self) -> 'EventLoopThread':
        self.thread.start()
        return self

    def run(self, coro: Awaitable, timeout: Optional[float] = None):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def stop(self) -> None:
        if self.loop.is_running():
            self.loop.call_soon_threadsafe(self.loop.stop)
            self.thread.join(timeout=5)
