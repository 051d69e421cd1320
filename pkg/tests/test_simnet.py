"""
Tests for the discrete-event simulator: tree construction, broadcast
bounds, fault tolerance and the gossip baseline
"""
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from src.errors import ScenarioError, UnreachableNode
from src.simnet import (
    FailureEvent, LatencyModel, ScenarioRunner, SimConfig, Simulator, gossip_baseline, metrics,
    export_traces_csv, parse_time, run
)
from src.storage_node import StorageClient
from src.tree_overlay import AppTag, RedundancyConfig, RedundancyMode


def _by_gid(sim: Simulator, bits: str):
    return next(n for n in sim.live_nodes() if n.group_id.bits == bits and not n.is_cluster_member)


class TestConfiguration(unittest.TestCase):

    def test_latency_models(self):
        self.assertEqual(LatencyModel.parse('10'), LatencyModel.fixed(10))
        self.assertEqual(LatencyModel.parse('fixed:3'), LatencyModel.fixed(3))
        self.assertEqual(LatencyModel.parse('uniform:5:20'), LatencyModel.uniform(5, 20))
        for bad in ('uniform:5', 'normal:1:2', 'x', 'uniform:9:1'):
            with self.assertRaises(ValueError):
                LatencyModel.parse(bad)

    def test_uniform_draw_in_range(self):
        rng = np.random.default_rng(0)
        model = LatencyModel.uniform(5, 20)
        draws = [model.draw(rng) for _ in range(200)]
        self.assertTrue(all(5 <= d <= 20 for d in draws))

    def test_parse_time(self):
        self.assertEqual(parse_time('120ms'), 120.0)
        self.assertEqual(parse_time('120'), 120.0)
        self.assertEqual(parse_time('1.5s'), 1500.0)
        with self.assertRaises(ValueError):
            parse_time('soon')

    def test_failure_event_action(self):
        with self.assertRaises(ValueError):
            FailureEvent(10, 1, 'explode')


class TestTreeConstruction(unittest.TestCase):
    """Test that joins build a balanced tree with unique group ids"""

    def test_sequential_joins_stay_balanced(self):
        sim = Simulator(SimConfig(seed=1))
        for n in range(1, 129):
            sim.join(1)
            self.assertEqual(sim.height(), int(math.floor(math.log2(n))), f"N={n}")
        gids = [node.group_id.bits for node in sim.live_nodes()]
        self.assertEqual(len(set(gids)), len(gids))

    def test_breadth_first_assignment(self):
        sim = Simulator(SimConfig(seed=2, nodes=7))
        gids = [sim.node(i).group_id.bits for i in range(7)]
        self.assertEqual(gids, ['', '0', '1', '00', '01', '10', '11'])

    def test_concurrent_joins_get_unique_group_ids(self):
        sim = Simulator(SimConfig(seed=3, nodes=1))
        sim.join(6, concurrent=True)
        members = sim.live_nodes()
        self.assertEqual(len(members), 7)
        sim.check_unique_group_ids()
        self.assertEqual(len({n.group_id.bits for n in members}), 7)

    def test_members_learn_full_directory(self):
        sim = Simulator(SimConfig(seed=4, nodes=15))
        for node in sim.live_nodes():
            self.assertEqual(len(node.directory()), 15)

    def test_cluster_members_share_group_ids(self):
        config = SimConfig(seed=5, nodes=9, redundancy=RedundancyConfig(mode=RedundancyMode.CLUSTER))
        sim = Simulator(config)
        gids = [sim.node(i).group_id.bits for i in range(9)]
        self.assertEqual(gids, ['', '', '', '0', '0', '0', '1', '1', '1'])
        self.assertTrue(sim.node(1).is_cluster_member)
        self.assertFalse(sim.node(3).is_cluster_member)


class TestBroadcast(unittest.TestCase):
    """Test broadcast coverage, hop bounds and message counts"""

    def test_seven_node_tree_from_root(self):
        sim = Simulator(SimConfig(seed=6, nodes=7))
        trace = sim.broadcast(0, b'\xab\xcd')
        result = metrics(trace)
        self.assertEqual(result.coverage, 1.0)
        self.assertEqual(result.max_hops, 2)
        self.assertEqual(result.messages_sent, 6)
        self.assertEqual(trace.duplicates, 0)

    def test_hops_equal_tree_distance(self):
        """Every first receipt arrives along the unique tree path"""
        rng = np.random.default_rng(8)
        for size in (1, 2, 3, 7, 15, 31, 63, 255):
            sim = Simulator(SimConfig(seed=size, nodes=size))
            height = sim.height()
            for _ in range(50):
                origin = int(rng.integers(0, size))
                trace = sim.broadcast(origin, b'payload')
                source = sim.node(origin).group_id
                hops = trace.hops_by_node()
                self.assertEqual(len(hops), size)
                for node_id, hop in hops.items():
                    self.assertEqual(hop, source.distance(sim.node(node_id).group_id))
                self.assertEqual(trace.messages_sent, size - 1)
                self.assertLessEqual(metrics(trace).max_hops, 2 * height)

    def test_leaf_to_leaf_is_twice_height(self):
        sim = Simulator(SimConfig(seed=9, nodes=15))
        origin = _by_gid(sim, '000').node_id
        trace = sim.broadcast(origin, b'x')
        self.assertEqual(metrics(trace).max_hops, 2 * sim.height())
        self.assertEqual(trace.hops_by_node()[_by_gid(sim, '111').node_id], 6)

    def test_deliveries_reach_application(self):
        sim = Simulator(SimConfig(seed=10, nodes=5))
        sim.broadcast(2, b'hello')
        for node in sim.live_nodes():
            self.assertEqual(sum(1 for _, payload in node.deliveries if payload.endswith(b'hello')), 1)

    def test_failed_origin_rejected(self):
        sim = Simulator(SimConfig(seed=11, nodes=3))
        sim.fail(1)
        with self.assertRaises(ScenarioError):
            sim.broadcast(1, b'x')


class TestMalformedBodies(unittest.TestCase):
    """Test that requests with wrong-shape bodies are dropped, not raised"""

    def test_node_keeps_serving(self):
        sim = Simulator(SimConfig(seed=13, nodes=7))
        target = sim.node(0).info
        dropped = sim.frames_dropped
        bad = [
            (AppTag.FIND_PREFIX, {}),
            (AppTag.PUSH_OBJECT, [1, 2]),
            (AppTag.JOIN_REQUEST, {}),
            (AppTag.CHALLENGE, {'object_ref': 'ab'}),
        ]
        for tag, body in bad:
            with self.assertRaises(UnreachableNode):
                sim.request(target, tag, body)
        self.assertEqual(sim.frames_dropped, dropped + len(bad))

        answer = StorageClient(sim).ask(target, '0101')
        self.assertIn(answer.node_id, sim.nodes)
        self.assertEqual(metrics(sim.broadcast(0, b'after')).coverage, 1.0)


class TestFailures(unittest.TestCase):
    """Test the effect of a failed interior node under each redundancy mode"""

    def test_plain_tree_loses_subtree(self):
        sim = Simulator(SimConfig(seed=12, nodes=15))
        failed = _by_gid(sim, '0')
        sim.fail(failed.node_id)
        trace = sim.broadcast(0, b'x')
        expected = {n.node_id for n in sim.live_nodes() if not n.group_id.bits.startswith('0')}
        self.assertEqual(trace.receivers(), expected)
        self.assertAlmostEqual(metrics(trace).coverage, 8 / 14)

    def test_extra_links_bridge_failure(self):
        redundancy = RedundancyConfig(mode=RedundancyMode.EXTRA_LINKS, link_radius=2)
        sim = Simulator(SimConfig(seed=13, nodes=15, redundancy=redundancy))
        sim.fail(_by_gid(sim, '0').node_id)
        trace = sim.broadcast(0, b'x')
        self.assertEqual(trace.receivers(), {n.node_id for n in sim.live_nodes()})
        self.assertEqual(metrics(trace).coverage, 1.0)
        self.assertGreater(trace.messages_sent, 13)

    def test_cluster_survives_member_failure(self):
        redundancy = RedundancyConfig(mode=RedundancyMode.CLUSTER, cluster_size=3)
        sim = Simulator(SimConfig(seed=14, nodes=9, redundancy=redundancy))
        sim.fail(3)
        trace = sim.broadcast(0, b'x')
        self.assertEqual(len(trace.receivers()), 8)
        self.assertEqual(metrics(trace).coverage, 1.0)

    def test_scheduled_failure_and_recovery(self):
        config = SimConfig(seed=15, nodes=7, failures=[FailureEvent(5000, 1, 'fail'),
                                                         FailureEvent(9000, 1, 'recover')])
        sim = Simulator(config)
        node_id = sim.node(1).node_id
        joined_at = sim.now
        self.assertNotIn(node_id, sim.failed)
        sim.run_until_idle(until_ms=joined_at + 6000)
        self.assertIn(node_id, sim.failed)
        self.assertEqual(len(sim.broadcast(0, b'x').receivers()), 4)
        sim.run_until_idle(until_ms=joined_at + 10000)
        self.assertNotIn(node_id, sim.failed)
        self.assertEqual(len(sim.broadcast(0, b'y').receivers()), 7)


class TestGossipBaseline(unittest.TestCase):

    def test_gossip_sends_more_than_tree(self):
        """Push gossip needs more messages than the N-1 of a tree broadcast"""
        for n in (4, 16, 64, 100):
            for seed in range(5):
                trace = gossip_baseline(SimConfig(seed=seed, nodes=n), fanout=2)
                self.assertEqual(metrics(trace).coverage, 1.0)
                self.assertIsNotNone(trace.rounds)
                self.assertGreater(trace.messages_sent, n - 1)
                self.assertGreater(trace.duplicates, 0)

    def test_round_limit(self):
        trace = gossip_baseline(SimConfig(seed=1, nodes=200), fanout=1, rounds=1)
        self.assertIsNone(trace.rounds)
        self.assertEqual(len(trace.records), 2)

    def test_invalid_fanout(self):
        with self.assertRaises(ValueError):
            gossip_baseline(SimConfig(nodes=4), fanout=0)


class TestDeterminism(unittest.TestCase):
    """Test that equal seeds give identical runs"""

    SCRIPT = """
        join 10
        broadcast from 3 payload 0102
        fail node 2
        broadcast from 0 payload 0304
        metrics
    """

    def test_same_seed_same_events(self):
        config = SimConfig(seed=21, latency=LatencyModel.uniform(5, 20))
        first = run(config, self.SCRIPT)
        second = run(SimConfig(seed=21, latency=LatencyModel.uniform(5, 20)), self.SCRIPT)
        self.assertEqual(first.simulator.event_log, second.simulator.event_log)
        self.assertEqual(first.trace_csv(), second.trace_csv())
        self.assertEqual(first.outputs, second.outputs)

    def test_different_seed_differs(self):
        first = run(SimConfig(seed=1, latency=LatencyModel.uniform(5, 20)), self.SCRIPT)
        second = run(SimConfig(seed=2, latency=LatencyModel.uniform(5, 20)), self.SCRIPT)
        self.assertNotEqual(first.simulator.event_log, second.simulator.event_log)


class TestScenarioRunner(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_outputs(self):
        result = run(SimConfig(seed=30), "join 7\nbroadcast from 0 payload ff\ngossip fanout 2\n")
        ops = [o['op'] for o in result.outputs]
        self.assertEqual(ops, ['join', 'broadcast', 'gossip'])
        self.assertEqual(result.outputs[0]['height'], 2)
        self.assertEqual(result.outputs[1]['max_hops'], 2)
        self.assertEqual(len(result.traces), 1)

    def test_unknown_command_reports_line(self):
        with self.assertRaises(ScenarioError) as ctx:
            run(SimConfig(seed=31), "join 3\n\nteleport node 1\n")
        self.assertEqual(ctx.exception.line, 3)

    def test_malformed_step(self):
        with self.assertRaises(ScenarioError):
            run(SimConfig(seed=32), "join three\n")
        with self.assertRaises(ScenarioError):
            run(SimConfig(seed=32), "join 3\nbroadcast to 0 payload ff\n")

    def test_metrics_before_broadcast(self):
        with self.assertRaises(ScenarioError):
            run(SimConfig(seed=33), "join 2\nmetrics\n")

    def test_timed_failure_in_script(self):
        script = "join 7\nfail node 1 at 2s\nwait 3s\nbroadcast from 0 payload 00\n"
        result = run(SimConfig(seed=34), script)
        self.assertLess(result.outputs[-1]['coverage'], 1.0)

    def test_trace_csv_export(self):
        result = run(SimConfig(seed=35), "join 4\nbroadcast from 0 payload aa\n")
        path = export_traces_csv(result.traces, Path(self.tmp.name) / 'out' / 'traces.csv')
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['msg_id', 'node', 'time_ms', 'hops', 'from'])
        self.assertEqual(len(frame), 4)
        self.assertEqual(int(frame['hops'].min()), 0)

    def test_runner_reuses_sessions(self):
        runner = ScenarioRunner(Simulator(SimConfig(seed=36, nodes=3)))
        self.assertIs(runner.session('alice'), runner.session('alice'))
        self.assertNotEqual(runner.public_key('alice'), runner.public_key('bob'))


if __name__ == '__main__':
    unittest.main()
