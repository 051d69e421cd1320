"""
Tests for the wire codec and TCP connections
"""
import asyncio
import unittest

import numpy as np

from src.errors import (
    ConnectionRefused, FrameError, MalformedFrame, PeerClosed, Truncated, UnknownVariant, VersionError
)
from src.transport import (
    HEADER_SIZE, WIRE_VERSION, backoff_delays, bound_port, connect, decode, encode, hello_message,
    listen, parse_hello
)
from src.tree_overlay import (
    AppPayload, AppTag, GroupId, MessageKind, NodeInfo, OpenBranch, OverlayMessage, Side, message_id
)
from src.utils import sha256_hex

ORIGIN = sha256_hex(b'origin')


def _msg_id(n=1):
    return message_id(ORIGIN, n)


def _contact(bits='01'):
    return NodeInfo(sha256_hex(b'contact'), '10.0.0.7', 7717, GroupId(bits))


class TestCodec(unittest.TestCase):
    """Test each message variant on the wire"""

    def test_branch_messages(self):
        branches = (OpenBranch(GroupId('01'), Side.LEFT, _contact()), OpenBranch(GroupId(''), Side.RIGHT))
        for kind in (MessageKind.AVAILABLE_BRANCHES, MessageKind.DISCARDED_BRANCHES):
            message = OverlayMessage(kind, _msg_id(), ORIGIN, branches=branches)
            decoded = decode(encode(message))
            self.assertEqual(decoded, message)
            self.assertEqual(decoded.branches[0].parent_contact, _contact())
            self.assertIsNone(decoded.branches[1].parent_contact)

    def test_group_id_message(self):
        message = OverlayMessage(MessageKind.GROUP_ID, _msg_id(), ORIGIN, assigned=GroupId('1101'))
        self.assertEqual(decode(encode(message)).assigned, GroupId('1101'))

    def test_app_message(self):
        payload = AppPayload(AppTag.FETCH_OBJECT, 9, {'name': 'x'}).to_bytes()
        message = OverlayMessage(MessageKind.APP, _msg_id(), ORIGIN, payload=payload)
        decoded = decode(encode(message))
        self.assertEqual(decoded.app().body, {'name': 'x'})
        self.assertEqual(decoded.app().request_id, 9)

    def test_header_layout(self):
        frame = encode(OverlayMessage(MessageKind.APP, _msg_id(), ORIGIN, payload=b'\x00' * 9))
        self.assertEqual(int.from_bytes(frame[:HEADER_SIZE], 'big'), len(frame) - HEADER_SIZE)
        self.assertEqual(frame[4], WIRE_VERSION)
        self.assertEqual(frame[5], MessageKind.APP)
        self.assertEqual(frame[6:38], _msg_id())
        self.assertEqual(frame[38:70].hex(), ORIGIN)

    def test_hello(self):
        info = _contact()
        self.assertEqual(parse_hello(hello_message(info, _msg_id())), info)
        with self.assertRaises(MalformedFrame):
            parse_hello(OverlayMessage(MessageKind.GROUP_ID, _msg_id(), ORIGIN, assigned=GroupId('')))


class TestCodecErrors(unittest.TestCase):
    """Test that malformed frames raise the right FrameError"""

    def setUp(self):
        branches = (OpenBranch(GroupId('0'), Side.RIGHT, _contact('0')),)
        self.frame = encode(OverlayMessage(MessageKind.AVAILABLE_BRANCHES, _msg_id(), ORIGIN, branches=branches))

    def _reframe(self, body: bytes) -> bytes:
        return len(body).to_bytes(HEADER_SIZE, 'big') + body

    def test_truncated(self):
        with self.assertRaises(Truncated):
            decode(b'\x00\x00')
        with self.assertRaises(Truncated):
            decode(self.frame[:-1])
        with self.assertRaises(Truncated):
            decode(self._reframe(self.frame[HEADER_SIZE:-3]))

    def test_trailing_bytes(self):
        with self.assertRaises(MalformedFrame):
            decode(self.frame + b'\x00')
        with self.assertRaises(MalformedFrame):
            decode(self._reframe(self.frame[HEADER_SIZE:] + b'\x00'))

    def test_version(self):
        body = bytearray(self.frame[HEADER_SIZE:])
        body[0] = 2
        with self.assertRaises(VersionError):
            decode(self._reframe(bytes(body)))

    def test_unknown_kind(self):
        body = bytearray(self.frame[HEADER_SIZE:])
        body[1] = 9
        with self.assertRaises(UnknownVariant):
            decode(self._reframe(bytes(body)))

    def test_bad_side_and_flag(self):
        # count(2) + gid len(2) + 1 packed byte precede the side byte
        side_offset = HEADER_SIZE + 2 + 64 + 2 + 3
        for offset, value in ((side_offset, 2), (side_offset + 1, 5)):
            frame = bytearray(self.frame)
            frame[offset] = value
            with self.assertRaises(MalformedFrame):
                decode(bytes(frame))

    def test_encode_rejects_bad_ids(self):
        with self.assertRaises(MalformedFrame):
            encode(OverlayMessage(MessageKind.APP, b'short', ORIGIN))
        with self.assertRaises(MalformedFrame):
            encode(OverlayMessage(MessageKind.APP, _msg_id(), 'not-hex'))
        with self.assertRaises(MalformedFrame):
            encode(OverlayMessage(MessageKind.GROUP_ID, _msg_id(), ORIGIN))

    def test_fuzz_only_frame_errors(self):
        """Random and bit-flipped frames either decode or raise FrameError"""
        rng = np.random.default_rng(99)
        for _ in range(500):
            junk = rng.bytes(int(rng.integers(0, 120)))
            try:
                decode(junk)
            except FrameError:
                pass
        for _ in range(500):
            frame = bytearray(self.frame)
            position = int(rng.integers(HEADER_SIZE, len(frame)))
            frame[position] ^= 1 << int(rng.integers(0, 8))
            try:
                decode(bytes(frame))
            except FrameError:
                pass


class TestBackoff(unittest.TestCase):

    def test_exponential_with_cap(self):
        self.assertEqual(backoff_delays(6, 200, 10), [0.2, 0.4, 0.8, 1.6, 3.2])
        self.assertEqual(backoff_delays(5, 1000, 3), [1.0, 2.0, 3, 3])
        self.assertEqual(backoff_delays(1), [])


class TestConnections(unittest.IsolatedAsyncioTestCase):
    """Test framed messages over real loopback sockets"""

    async def test_echo(self):
        async def echo(connection):
            while True:
                await connection.send(await connection.recv())

        server = await listen('127.0.0.1', 0, echo)
        try:
            connection = await connect('127.0.0.1', bound_port(server))
            messages = [OverlayMessage(MessageKind.APP, _msg_id(i), ORIGIN,
                                       payload=AppPayload(AppTag.DATA, 0, bytes(i * 1000)).to_bytes())
                        for i in range(1, 6)]
            for message in messages:
                await connection.send(message)
            received = [await connection.recv() for _ in messages]
            self.assertEqual(received, messages)
            await connection.close()
        finally:
            server.close()
            await server.wait_closed()

    async def test_peer_close(self):
        async def hang_up(connection):
            await connection.close()

        server = await listen('127.0.0.1', 0, hang_up)
        try:
            connection = await connect('127.0.0.1', bound_port(server))
            with self.assertRaises(PeerClosed):
                await asyncio.wait_for(connection.recv(), timeout=5)
            await connection.close()
        finally:
            server.close()
            await server.wait_closed()

    async def test_refused_after_retries(self):
        server = await listen('127.0.0.1', 0, lambda c: asyncio.sleep(0))
        port = bound_port(server)
        server.close()
        await server.wait_closed()
        with self.assertRaises(ConnectionRefused):
            await connect('127.0.0.1', port, attempts=2, base_ms=1)


if __name__ == '__main__':
    unittest.main()
