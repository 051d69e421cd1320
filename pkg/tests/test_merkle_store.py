"""
Unit tests for Merkle chunking and the object store
"""
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from config.settings import CONVENTION_OBJECT_SIZE
from src.errors import (
    EmptyLeafSet, IntegrityFailure, MissingObject, ObjectTooLarge, RootMismatch, StorageError, StoreFull
)
from src.merkle_store import (
    MerkleManifest, ObjectStore, build_levels, build_root, capsule_name, chunk, manifest_name,
    reassemble, split_alias, verify_object
)
from src.utils import sha256_hex

MiB = CONVENTION_OBJECT_SIZE


def _lookup(result):
    objects = {leaf.id: leaf.data for leaf in result.leaves}
    return objects, objects.get


class TestChunking(unittest.TestCase):
    """Test splitting content into objects"""

    def test_small_content_is_one_object(self):
        """Content up to 1 MiB is its own root"""
        content = b'hello world'
        result = chunk(content)
        self.assertEqual(result.root, sha256_hex(content))
        self.assertIsNone(result.manifest)
        self.assertEqual(len(result.leaves), 1)

    def test_exact_boundary(self):
        """Exactly 1 MiB stays single, one more byte makes two leaves"""
        self.assertEqual(len(chunk(bytes(MiB)).leaves), 1)
        result = chunk(bytes(MiB + 1))
        self.assertEqual(len(result.leaves), 2)
        self.assertEqual(len(result.leaves[1].data), 1)
        self.assertIsNotNone(result.manifest)

    def test_empty_content(self):
        """Empty content is a single empty object"""
        result = chunk(b'')
        self.assertEqual(result.root, sha256_hex(b''))
        self.assertEqual(reassemble(result, _lookup(result)[1]), b'')

    def test_random_round_trips(self):
        """Random contents up to 5 MiB survive chunk + reassemble"""
        rng = np.random.default_rng(5)
        sizes = [0, 1, MiB - 1, MiB, MiB + 1, 5 * MiB]
        sizes += [int(s) for s in rng.integers(0, 5 * MiB + 1, size=194)]
        for size in sizes:
            content = rng.bytes(size)
            result = chunk(content)
            _, fetch = _lookup(result)
            self.assertEqual(reassemble(result, fetch), content)
            self.assertEqual(len(result.leaves), max(1, math.ceil(size / MiB)))
            self.assertTrue(all(len(leaf.data) <= MiB for leaf in result.leaves))

    def test_manifest_serialization(self):
        """Manifest bytes decode to the same tree"""
        result = chunk(bytes(range(256)) * (3 * MiB // 256))
        restored = MerkleManifest.from_bytes(result.manifest.to_bytes())
        self.assertEqual(restored, result.manifest)
        self.assertEqual(restored.root, result.root)

    def test_malformed_manifest(self):
        """Garbage or unknown versions are rejected"""
        with self.assertRaises(StorageError):
            MerkleManifest.from_bytes(b'not json')
        with self.assertRaises(StorageError):
            MerkleManifest.from_bytes(b'{"version": 99}')


class TestMerkleTree(unittest.TestCase):
    """Test Merkle level construction"""

    def test_empty_leaf_set(self):
        with self.assertRaises(EmptyLeafSet):
            build_levels([])

    def test_pairwise_hashing(self):
        """Two leaves hash to H(a || b)"""
        a, b = sha256_hex(b'a'), sha256_hex(b'b')
        self.assertEqual(build_root([a, b]), sha256_hex(bytes.fromhex(a) + bytes.fromhex(b)))

    def test_odd_leaf_promoted(self):
        """An unpaired last node moves up unchanged"""
        leaves = [sha256_hex(bytes([i])) for i in range(3)]
        levels = build_levels(leaves)
        self.assertEqual(levels[1][1], leaves[2])
        self.assertEqual(len(levels[-1]), 1)


class TestIntegrity(unittest.TestCase):
    """Test corruption detection during reassembly"""

    def test_single_bit_corruption_detected(self):
        """Flipping any one bit in any leaf raises IntegrityFailure"""
        rng = np.random.default_rng(11)
        content = rng.bytes(2 * MiB + 12345)
        result = chunk(content)
        for leaf in result.leaves:
            for _ in range(5):
                objects, _ = _lookup(result)
                data = bytearray(objects[leaf.id])
                position = int(rng.integers(0, len(data)))
                data[position] ^= 1 << int(rng.integers(0, 8))
                objects[leaf.id] = bytes(data)
                with self.assertRaises(IntegrityFailure):
                    reassemble(result, objects.get)

    def test_missing_leaf(self):
        result = chunk(bytes(MiB + 10))
        objects, _ = _lookup(result)
        del objects[result.leaves[0].id]
        with self.assertRaises(MissingObject):
            reassemble(result, objects.get)

    def test_tampered_manifest(self):
        """A manifest whose leaves do not hash to its root is rejected"""
        result = chunk(bytes(2 * MiB + 1))
        manifest = result.manifest
        forged = MerkleManifest(root=sha256_hex(b'other'), total_size=manifest.total_size,
                                leaf_ids=manifest.leaf_ids, levels=manifest.levels)
        with self.assertRaises(RootMismatch):
            reassemble(forged, _lookup(result)[1])

    def test_verify_object(self):
        self.assertTrue(verify_object(sha256_hex(b'x'), b'x'))
        self.assertFalse(verify_object(sha256_hex(b'x'), b'y'))


class TestAliases(unittest.TestCase):

    def test_alias_names(self):
        root = sha256_hex(b'root')
        self.assertEqual(split_alias(manifest_name(root)), (root, '_mt'))
        self.assertEqual(split_alias(capsule_name(root)), (root, '_capsule'))
        self.assertEqual(split_alias(root), (root, ''))
        self.assertEqual(split_alias('plain_mt'), ('plain_mt', ''))


class TestObjectStore(unittest.TestCase):
    """Test the in-memory and on-disk object store"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_put_get_memory(self):
        store = ObjectStore()
        object_id = store.put(b'data')
        self.assertEqual(store.get(object_id), b'data')
        self.assertEqual(store.used_bytes, 4)
        self.assertEqual(store.put(b'data'), object_id)
        self.assertEqual(store.used_bytes, 4)

    def test_put_too_large(self):
        with self.assertRaises(ObjectTooLarge):
            ObjectStore().put(bytes(MiB + 1))

    def test_capacity(self):
        store = ObjectStore(capacity_bytes=10)
        store.put(b'12345678')
        with self.assertRaises(StoreFull):
            store.put(b'abc')

    def test_missing(self):
        with self.assertRaises(MissingObject):
            ObjectStore().get(sha256_hex(b'nope'))

    def test_alias_resolution_and_routing_key(self):
        """Aliases resolve to ids and set the routing key"""
        store = ObjectStore()
        root = sha256_hex(b'file root')
        object_id = store.put(b'manifest bytes')
        store.link(manifest_name(root), object_id)
        self.assertEqual(store.resolve(manifest_name(root)), object_id)
        self.assertEqual(store.resolve(object_id), object_id)
        self.assertEqual(store.routing_key(object_id), root)
        self.assertIsNone(store.resolve(capsule_name(root)))

    def test_link_requires_object(self):
        with self.assertRaises(MissingObject):
            ObjectStore().link('x_mt', sha256_hex(b'absent'))

    def test_disk_persistence(self):
        """Objects and aliases survive reopening the directory"""
        path = Path(self.tmp.name)
        store = ObjectStore(path)
        root = sha256_hex(b'root')
        object_id = store.put(b'persisted')
        store.link(capsule_name(root), object_id)

        reopened = ObjectStore(path)
        self.assertEqual(reopened.get(object_id), b'persisted')
        self.assertEqual(reopened.resolve(capsule_name(root)), object_id)
        self.assertEqual(reopened.used_bytes, len(b'persisted'))
        self.assertEqual(reopened.object_ids(), [object_id])

    def test_delete_removes_aliases(self):
        store = ObjectStore(Path(self.tmp.name))
        object_id = store.put(b'gone soon')
        store.link(manifest_name(sha256_hex(b'r')), object_id)
        self.assertTrue(store.delete(object_id))
        self.assertFalse(store.has(object_id))
        self.assertEqual(store.aliases_of(object_id), [])
        self.assertEqual(store.used_bytes, 0)
        self.assertFalse(store.delete(object_id))

    def test_put_unchecked_corrupts(self):
        store = ObjectStore()
        object_id = store.put(b'good')
        store.put_unchecked(object_id, b'bad!')
        self.assertFalse(verify_object(object_id, store.get(object_id)))


if __name__ == '__main__':
    unittest.main()
