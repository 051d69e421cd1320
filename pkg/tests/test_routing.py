"""
Unit tests for hash-prefix placement
"""
import math
import unittest
from collections import Counter

import numpy as np

from src.errors import InvalidHex, UnreachableNode
from src.routing import (
    MembershipView, best_candidate, fallback_chain, group_path, hex_to_bits, outermost_node, prefix_rank
)
from src.tree_overlay import GroupId, NodeInfo
from src.utils import sha256_hex


def _node(bits: str) -> NodeInfo:
    return NodeInfo(sha256_hex(f"node/{bits}".encode()), 'h', 0, GroupId(bits))


def _random_tree(rng, size):
    """Grow a tree by filling random open slots"""
    taken, open_slots = [''], ['0', '1']
    while len(taken) < size:
        bits = open_slots.pop(int(rng.integers(0, len(open_slots))))
        taken.append(bits)
        open_slots += [bits + '0', bits + '1']
    return [_node(bits) for bits in taken]


def _full_tree(depth):
    return [_node(format(i, f"0{d}b") if d else '') for d in range(depth + 1) for i in range(2 ** d)]


def _random_bits(rng, length=256):
    return ''.join(str(b) for b in rng.integers(0, 2, size=length))


class TestHexToBits(unittest.TestCase):

    def test_conversion(self):
        self.assertEqual(hex_to_bits('a'), '1010')
        self.assertEqual(hex_to_bits('0F'), '00001111')
        self.assertEqual(hex_to_bits(''), '')
        self.assertEqual(len(hex_to_bits(sha256_hex(b'x'))), 256)

    def test_invalid(self):
        for bad in ('xyz', '12 3', None):
            with self.assertRaises(InvalidHex):
                hex_to_bits(bad)


class TestGroupPath(unittest.TestCase):
    """Test Group Path extraction against brute force"""

    def test_against_brute_force(self):
        """Group Path equals every prefix-matching member sorted by depth"""
        rng = np.random.default_rng(7)
        for size in (1, 2, 5, 17, 64, 255):
            members = _random_tree(rng, size)
            for _ in range(20):
                target = _random_bits(rng)
                expected = sorted((m for m in members if target.startswith(m.group_id.bits)),
                                  key=lambda m: m.group_id.depth)
                path = group_path(target, members)
                self.assertEqual(path, expected)
                self.assertEqual(path[0].group_id, GroupId.ROOT)
                depths = [n.group_id.depth for n in path]
                self.assertEqual(depths, list(range(len(depths))))

    def test_fallback_chain(self):
        members = _full_tree(3)
        target = '0110' + '0' * 252
        outermost = group_path(target, members)[-1]
        chain = fallback_chain(target, outermost, members)
        self.assertEqual([n.group_id.bits for n in chain], ['011', '01', '0', ''])


class TestDiscovery(unittest.TestCase):
    """Test the greedy walk toward the outermost node"""

    def test_prefix_rank_order(self):
        target = '0101'
        self.assertGreater(prefix_rank(_node('010'), target), prefix_rank(_node('0'), target))
        self.assertGreater(prefix_rank(_node(''), target), prefix_rank(_node('1'), target))
        self.assertGreater(prefix_rank(_node('1'), target), prefix_rank(_node('11'), target))

    def test_best_candidate_empty(self):
        with self.assertRaises(ValueError):
            best_candidate('0', [])

    def test_walk_reaches_deepest_match(self):
        """From any start the walk ends on the deepest prefix match"""
        rng = np.random.default_rng(13)
        for size in (1, 3, 10, 50, 200):
            members = _random_tree(rng, size)
            view = MembershipView(members, k=2)
            for _ in range(25):
                target = _random_bits(rng)
                start = members[int(rng.integers(0, size))]
                expected = max((m for m in members if target.startswith(m.group_id.bits)),
                               key=lambda m: m.group_id.depth)
                self.assertEqual(view.outermost(target, start), expected)

    def test_down_start_is_unreachable(self):
        members = _full_tree(2)
        view = MembershipView(members, down=[members[0].node_id])
        with self.assertRaises(UnreachableNode):
            view.outermost('0' * 8, members[0])

    def test_non_converging_walk(self):
        """A neighbor oracle that always points elsewhere is cut off"""
        a, b = _node('0'), _node('00')

        def ask(node, target):
            return _node(node.group_id.bits + '0')

        with self.assertRaises(UnreachableNode):
            outermost_node('0' * 600, a, ask, max_hops=5)
        self.assertEqual(outermost_node('00', b, lambda n, t: _node('')), b)

    def test_uniform_placement(self):
        """Random ids land evenly on the leaves of a full depth-4 tree"""
        members = _full_tree(4)
        view = MembershipView(members)
        leaves = [m for m in members if m.group_id.depth == 4]
        trials = 10000
        counts = Counter()
        for i in range(trials):
            target = hex_to_bits(sha256_hex(f"object/{i}".encode()))
            counts[view.outermost(target, members[0]).node_id] += 1
        self.assertEqual(set(counts), {leaf.node_id for leaf in leaves})
        p = 1 / len(leaves)
        sigma = math.sqrt(trials * p * (1 - p))
        for leaf in leaves:
            self.assertLessEqual(abs(counts[leaf.node_id] - trials * p), 3 * sigma)


if __name__ == '__main__':
    unittest.main()
