"""
Unit tests for the hash-chained ledger
"""
import dataclasses
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.crypto_pre import keygen
from src.errors import BadSignature, LedgerError, NotFound
from src.ledger import (
    Block, FileSend, Ledger, StorageContract, Transaction, payload_from_record, tx_root, verify_chain
)
from src.utils import sha256_hex


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def _contract(keys, label, accepted=()):
    root = sha256_hex(label.encode()) if label else ''
    return Transaction.create(StorageContract(keys.public.digest(), root, '01', tuple(accepted)), keys)


def _send(sender, receiver, label):
    payload = FileSend(sender.public.digest(), receiver.public.digest(),
                       sha256_hex(f"obj/{label}".encode()), sha256_hex(f"cap/{label}".encode()),
                       name=label, size=len(label))
    return Transaction.create(payload, sender)


class TestTransactions(unittest.TestCase):
    """Test signing and payload records"""

    @classmethod
    def setUpClass(cls):
        cls.alice = keygen(seed='ledger-alice')
        cls.bob = keygen(seed='ledger-bob')

    def test_signed_by_actor(self):
        self.assertTrue(_contract(self.alice, 'r').verify())
        self.assertTrue(_send(self.alice, self.bob, 'f').verify())

    def test_signer_must_be_actor(self):
        payload = StorageContract(self.alice.public.digest(), sha256_hex(b'r'), '')
        forged = Transaction.create(payload, self.bob)
        self.assertFalse(forged.verify())

    def test_tampered_payload(self):
        tx = _contract(self.alice, 'r')
        tampered = dataclasses.replace(tx, payload=dataclasses.replace(tx.payload, root_ref=sha256_hex(b'x')))
        self.assertFalse(tampered.verify())
        self.assertFalse(dataclasses.replace(tx, signature='zz').verify())

    def test_records(self):
        tx = _send(self.alice, self.bob, 'file.txt')
        self.assertEqual(Transaction.from_record(tx.to_record()), tx)
        with self.assertRaises(LedgerError):
            payload_from_record({'kind': 'mystery'})


class TestSealing(unittest.TestCase):
    """Test block production and receipts"""

    def setUp(self):
        self.clock = FakeClock()
        self.ledger = Ledger(clock=self.clock, block_interval=1.0, max_txs=4)
        self.keys = keygen(seed='sealer')

    def test_genesis(self):
        self.assertEqual(self.ledger.height, 0)
        self.assertTrue(self.ledger.verify_chain())

    def test_interval_sealing(self):
        receipt = self.ledger.submit(_contract(self.keys, 'a'))
        self.assertEqual(receipt.height, 1)
        self.assertIsNone(self.ledger.tick())
        with self.assertRaises(NotFound):
            self.ledger.find_transaction(receipt.tx_id)
        self.clock.now = 1.0
        block = self.ledger.tick()
        self.assertEqual(block.height, 1)
        self.assertEqual(self.ledger.find_transaction(receipt.tx_id)[0], receipt)

    def test_size_sealing(self):
        receipts = [self.ledger.submit(_contract(self.keys, str(i))) for i in range(4)]
        self.assertEqual(self.ledger.height, 1)
        self.assertEqual([r.index for r in receipts], [0, 1, 2, 3])

    def test_wait_sealed_seals_early(self):
        receipt = self.ledger.submit(_contract(self.keys, 'early'))
        block = self.ledger.wait_sealed(receipt)
        self.assertEqual(block.transactions[receipt.index].tx_id, receipt.tx_id)

    def test_bad_signature_rejected(self):
        other = keygen(seed='other')
        payload = StorageContract(self.keys.public.digest(), sha256_hex(b'r'), '')
        with self.assertRaises(BadSignature):
            self.ledger.submit(Transaction.create(payload, other))
        self.assertEqual(self.ledger.status()['pending'], 0)


class TestQueries(unittest.TestCase):
    """Test the latest-root and pending-share indexes against replayed history"""

    @staticmethod
    def _scan(ledger):
        """Latest roots and pending shares recomputed from every sealed block"""
        roots, accepted, shares = {}, {}, {}
        for block in ledger.blocks:
            for tx in block.transactions:
                payload = tx.payload
                if isinstance(payload, StorageContract):
                    roots[payload.owner] = payload.root_ref
                    accepted.setdefault(payload.owner, set()).update(payload.accepted)
                else:
                    shares.setdefault(payload.receiver, []).append(tx)
        pending = {owner: [tx for tx in txs if tx.tx_id not in accepted.get(owner, set())]
                   for owner, txs in shares.items()}
        return roots, pending

    def test_queries_match_full_scan(self):
        """latest_root and pending_shares agree with a chain scan over 500 random histories"""
        users = [keygen(seed=f"owner-{i}") for i in range(4)]
        for sequence in range(500):
            rng = np.random.default_rng(sequence)
            clock = FakeClock()
            ledger = Ledger(clock=clock, max_txs=int(rng.integers(1, 6)))
            received = {u.public.digest(): [] for u in users}
            for step in range(int(rng.integers(4, 14))):
                actor = users[int(rng.integers(0, len(users)))]
                owner = actor.public.digest()
                if rng.random() < 0.5:
                    receiver = users[int(rng.integers(0, len(users)))]
                    grant = _send(actor, receiver, f"s{sequence}-{step}")
                    ledger.submit(grant)
                    received[receiver.public.digest()].append(grant.tx_id)
                else:
                    label = '' if rng.random() < 0.15 else f"root-{sequence}-{step}"
                    offered = received[owner]
                    accepted = [t for t in offered if rng.random() < 0.5]
                    ledger.submit(_contract(actor, label, accepted=accepted))
                clock.now += float(rng.uniform(0, 2))
                ledger.tick()
            ledger.seal()

            roots, pending = self._scan(ledger)
            for user in users:
                owner = user.public.digest()
                root = roots.get(owner, '')
                if root:
                    self.assertEqual(ledger.latest_root(owner).root_ref, root, f"sequence {sequence}")
                else:
                    with self.assertRaises(NotFound):
                        ledger.latest_root(owner)
                self.assertEqual(ledger.pending_shares(owner), pending.get(owner, []), f"sequence {sequence}")

    def test_unknown_owner(self):
        with self.assertRaises(NotFound):
            Ledger().latest_root(sha256_hex(b'nobody'))

    def test_pending_shares_until_accepted(self):
        alice, bob = keygen(seed='share-a'), keygen(seed='share-b')
        ledger = Ledger()
        grants = [_send(alice, bob, f"f{i}") for i in range(3)]
        for tx in grants:
            ledger.submit(tx)
        ledger.seal()
        self.assertEqual(ledger.pending_shares(bob.public.digest()), grants)
        ledger.submit(_contract(bob, 'bob-root', accepted=[grants[1].tx_id]))
        ledger.seal()
        self.assertEqual(ledger.pending_shares(bob.public.digest()), [grants[0], grants[2]])
        self.assertEqual(ledger.pending_shares(alice.public.digest()), [])

    def test_state_digest_ignores_block_boundaries(self):
        keys = keygen(seed='digest')
        txs = [_contract(keys, str(i)) for i in range(5)]
        one_block, many_blocks = Ledger(), Ledger()
        for tx in txs:
            one_block.submit(tx)
            many_blocks.submit(tx)
            many_blocks.seal()
        one_block.seal()
        self.assertNotEqual(one_block.height, many_blocks.height)
        self.assertEqual(one_block.state_digest(), many_blocks.state_digest())


class TestChainIntegrity(unittest.TestCase):
    """Test verification and persistence"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'chain.dat'
        self.keys = keygen(seed='chain')
        self.ledger = Ledger(self.path)
        for i in range(3):
            self.ledger.submit(_contract(self.keys, f"c{i}"))
            self.ledger.seal()

    def test_any_mutation_detected(self):
        """Changing one block reports exactly that height"""
        blocks = list(self.ledger.blocks)
        other = _contract(self.keys, 'other')
        mutations = {
            1: dataclasses.replace(blocks[1], transactions=(other,)),
            2: dataclasses.replace(blocks[2], prev_hash=sha256_hex(b'x')),
            3: dataclasses.replace(blocks[3], height=7),
        }
        for height, block in mutations.items():
            chain = list(blocks)
            chain[height] = block
            report = verify_chain(chain)
            self.assertFalse(report)
            self.assertEqual(report.failed_height, height)

    def test_bad_signature_in_block(self):
        blocks = list(self.ledger.blocks)
        tx = blocks[1].transactions[0]
        forged = dataclasses.replace(tx, signature='00' * 64)
        chain = blocks[:1] + [dataclasses.replace(blocks[1], transactions=(forged,),
                                                  tx_root=tx_root((forged,)))]
        report = verify_chain(chain)
        self.assertFalse(report)
        self.assertIn('signature', report.reason)

    def test_reopen(self):
        reopened = Ledger(self.path)
        self.assertEqual(reopened.height, 3)
        self.assertEqual(reopened.state_digest(), self.ledger.state_digest())
        self.assertEqual(reopened.latest_root(self.keys.public.digest()).root_ref, sha256_hex(b'c2'))

    def test_truncated_file_rejected(self):
        data = self.path.read_bytes()
        self.path.write_bytes(data[:-1])
        with self.assertRaises(LedgerError):
            Ledger(self.path)

    def test_non_canonical_block(self):
        record = self.ledger.blocks[1].to_bytes()
        with self.assertRaises(LedgerError):
            Block.from_bytes(record.replace(b'{', b'{ ', 1))


if __name__ == '__main__':
    unittest.main()
