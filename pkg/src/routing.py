"""
Hash-prefix placement over the tree overlay

Content hashes are read as bit strings; the nodes whose group ids prefix
those bits form the Group Path, and the deepest of them stores the object.
"""
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from src.errors import InvalidHex, UnreachableNode
from src.tree_overlay import GroupId, NodeInfo, node_sort_key

GroupPath = List[NodeInfo]  # root first, strictly increasing depth
AskFn = Callable[[NodeInfo, str], NodeInfo]

_HEX = frozenset("0123456789abcdefABCDEF")


def hex_to_bits(hex_string: str) -> str:
    """4 bits per hex digit, most significant bit first"""
    if not isinstance(hex_string, str) or any(c not in _HEX for c in hex_string):
        raise InvalidHex(f"not a hex string: {hex_string!r}")
    return ''.join(format(int(c, 16), '04b') for c in hex_string)


def group_path(target: str, members: Iterable[NodeInfo]) -> GroupPath:
    """One node per prefix-matching group id, ordered root-first"""
    by_gid: Dict[str, NodeInfo] = {}
    for node in sorted(members, key=node_sort_key):
        if node.group_id is not None and node.group_id.is_prefix_of(target):
            by_gid.setdefault(node.group_id.bits, node)
    return [by_gid[bits] for bits in sorted(by_gid, key=len)]


def prefix_rank(node: NodeInfo, target: str) -> Tuple[bool, int]:
    """
    Preference for the next discovery hop

    Prefix matches beat non-matches and deeper matches beat shallower ones;
    among non-matches the shallowest wins so the walk climbs toward the root.
    """
    gid = node.group_id or GroupId.ROOT
    if gid.is_prefix_of(target):
        return (True, gid.depth)
    return (False, -gid.depth)


def best_candidate(target: str, candidates: Iterable[NodeInfo]) -> NodeInfo:
    ordered = sorted(candidates, key=node_sort_key)
    if not ordered:
        raise ValueError("no candidates to rank")
    return max(ordered, key=lambda n: prefix_rank(n, target))


def outermost_node(target: str, start: NodeInfo, ask: AskFn, max_hops: int = 512) -> NodeInfo:
    """
    Walk toward the deepest prefix match by asking each node's neighbor table

    Args:
        target: bit string of the content hash
        start: a live member to begin from
        ask: queries a node for its best neighbor; raises UnreachableNode when
            the node cannot be contacted
    """
    current = start
    for _ in range(max_hops):
        best = ask(current, target)
        if prefix_rank(best, target) <= prefix_rank(current, target):
            return current
        current = best
    raise UnreachableNode(current.node_id, "discovery did not converge")


def placement_target(object_id: str, start: NodeInfo, ask: AskFn) -> NodeInfo:
    return outermost_node(hex_to_bits(object_id), start, ask)


def fallback_chain(target: str, outermost: NodeInfo, members: Iterable[NodeInfo]) -> List[NodeInfo]:
    """Outermost node first, then shallower Group Path nodes for capacity fallback"""
    chain = [outermost]
    for node in reversed(group_path(target, members)):
        if node.node_id != outermost.node_id and node.group_id.depth < outermost.group_id.depth:
            chain.append(node)
    return chain


class MembershipView:
    """
    Routing over a membership snapshot with k-hop neighbor tables derived
    from tree distance; used where no live network is at hand
    """

    def __init__(self, members: Sequence[NodeInfo], k: int = 2,
                 down: Optional[Iterable[str]] = None):
        self.members = sorted(members, key=node_sort_key)
        self.k = k
        self.down = set(down or ())

    def neighbors(self, node: NodeInfo) -> List[NodeInfo]:
        return [m for m in self.members if m.group_id.distance(node.group_id) <= self.k]

    def ask(self, node: NodeInfo, target: str) -> NodeInfo:
        if node.node_id in self.down:
            raise UnreachableNode(node.node_id, "node is down")
        return best_candidate(target, self.neighbors(node))

    def group_path(self, target: str) -> GroupPath:
        return group_path(target, self.members)

    def outermost(self, target: str, start: NodeInfo) -> NodeInfo:
        return outermost_node(target, start, self.ask)
