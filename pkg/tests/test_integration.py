"""
Integration tests for the whole system: scenario runs on the simulator and
the same flows over real TCP node services
"""
import unittest

from src import workflows
from src.crypto_pre import RandomSource, keygen
from src.node_service import TcpCluster
from src.simnet import SimConfig, Simulator, run
from src.utils import sha256_hex

SCENARIO = """
# three files, one of them 2.5 MB, then a share
put alice /docs/a.txt 1000
put alice /docs/b.bin 2621440
put bob /c.txt 4096
share alice /docs/b.bin bob
accept bob
get bob /b.bin
get alice /docs/a.txt
get bob /c.txt
broadcast from 14 payload abcdef
audit
"""


class TestScenario(unittest.TestCase):
    """Test a 15-node deployment driven by a scenario script"""

    @classmethod
    def setUpClass(cls):
        cls.config = SimConfig(seed=11, nodes=15)
        cls.result = run(cls.config, SCENARIO)

    def _outputs(self, op):
        return [r for r in self.result.outputs if r['op'] == op]

    def test_reads_match_writes(self):
        written = {(r['user'], r['path']): r['sha256'] for r in self._outputs('put')}
        read = {(r['user'], r['path']): r['sha256'] for r in self._outputs('get')}
        self.assertEqual(read[('alice', '/docs/a.txt')], written[('alice', '/docs/a.txt')])
        self.assertEqual(read[('bob', '/c.txt')], written[('bob', '/c.txt')])
        self.assertEqual(read[('bob', '/b.bin')], written[('alice', '/docs/b.bin')])

    def test_share_accepted(self):
        shares = self._outputs('share')
        accepts = self._outputs('accept')
        self.assertEqual(len(accepts), 1)
        self.assertEqual(accepts[0]['grant'], shares[0]['tx_id'])

    def test_broadcast_and_audit(self):
        broadcast = self._outputs('broadcast')[0]
        self.assertEqual(broadcast['coverage'], 1.0)
        self.assertEqual(broadcast['messages_sent'], 14)
        audit = self._outputs('audit')[0]
        self.assertEqual(audit['failures'], 0)
        self.assertEqual(audit['lost'], 0)

    def test_ledger_is_valid(self):
        self.assertTrue(self.result.simulator.ledger.verify_chain())

    def test_runs_are_reproducible(self):
        """Same seed and script give identical outputs, stored bytes and ledger state"""
        again = run(self.config, SCENARIO)
        self.assertEqual(again.outputs, self.result.outputs)
        self.assertEqual(again.simulator.stored_bytes(), self.result.simulator.stored_bytes())
        self.assertEqual(again.simulator.ledger.state_digest(), self.result.simulator.ledger.state_digest())
        self.assertEqual(again.trace_csv(), self.result.trace_csv())


class TestTcpParity(unittest.TestCase):
    """Test that loopback TCP nodes behave like the simulated ones"""

    SEED = 7
    SIZE = 5

    @classmethod
    def setUpClass(cls):
        cls.cluster = TcpCluster(cls.SIZE, seed=cls.SEED).start()
        cls.sim = Simulator(SimConfig(seed=cls.SEED, nodes=cls.SIZE))

    @classmethod
    def tearDownClass(cls):
        cls.cluster.stop()

    def test_same_tree(self):
        tcp = {n.node_id: n.group_id.bits for n in self.cluster.nodes()}
        sim = {n.node_id: n.group_id.bits for n in self.sim.live_nodes()}
        self.assertEqual(tcp, sim)

    def test_same_placement(self):
        content = RandomSource('parity-content').random_bytes(70000)

        def _store(ledger, network):
            session = workflows.UserSession(keygen(seed='parity-user'), ledger, network,
                                            rng=RandomSource('parity-rng'))
            workflows.put_file(session, '/p.bin', content)
            return session

        network = self.cluster.network()
        tcp_session = _store(self.cluster.ledger, network)
        _store(self.sim.ledger, self.sim)

        self.assertEqual(sha256_hex(workflows.get_file(tcp_session, '/p.bin')), sha256_hex(content))
        tcp_objects = {n.node_id: set(n.store.object_ids()) for n in self.cluster.nodes()}
        sim_objects = {i: set(objects) for i, objects in self.sim.stored_bytes().items()}
        self.assertEqual(tcp_objects, sim_objects)


if __name__ == '__main__':
    unittest.main()
