"""
Content-addressed object store with Merkle-tree chunking of encrypted content
"""
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from config.settings import (
    CAPSULE_SUFFIX, CONVENTION_OBJECT_SIZE, MANIFEST_SUFFIX, MANIFEST_VERSION
)
from src.errors import (
    EmptyLeafSet, IntegrityFailure, MissingObject,
    ObjectTooLarge, RootMismatch, StorageError, StoreFull
)
from src.utils import canonical_json, is_object_id, sha256_hex

ObjectId = str  # lowercase hex SHA-256 digest, 64 chars


@dataclass(frozen=True)
class StoredObject:
    id: ObjectId
    data: bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> 'StoredObject':
        if len(data) > CONVENTION_OBJECT_SIZE:
            raise ObjectTooLarge(f"{len(data)} bytes exceeds {CONVENTION_OBJECT_SIZE}")
        return cls(id=sha256_hex(data), data=data)


@dataclass(frozen=True)
class MerkleManifest:
    """Serialized Merkle tree binding leaf objects to a root hash"""
    root: ObjectId
    total_size: int
    leaf_ids: Tuple[ObjectId, ...]
    levels: Tuple[Tuple[ObjectId, ...], ...]  # leaves first, root last

    def to_bytes(self) -> bytes:
        return canonical_json({
            'version': MANIFEST_VERSION,
            'total_size': self.total_size,
            'leaves': list(self.leaf_ids),
            'levels': [list(level) for level in self.levels],
        })

    @classmethod
    def from_bytes(cls, data: bytes) -> 'MerkleManifest':
        try:
            record = json.loads(data.decode('utf-8'))
            if record.get('version') != MANIFEST_VERSION:
                raise StorageError(f"unsupported manifest version {record.get('version')}")
            leaves = tuple(record['leaves'])
            levels = tuple(tuple(level) for level in record['levels'])
            total_size = int(record['total_size'])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
            raise StorageError(f"malformed manifest: {e}") from e
        if not leaves or not levels or len(levels[-1]) != 1:
            raise StorageError("manifest has no root level")
        if not all(is_object_id(h) for level in levels for h in level):
            raise StorageError("manifest contains non-digest entries")
        return cls(root=levels[-1][0], total_size=total_size, leaf_ids=leaves, levels=levels)


@dataclass(frozen=True)
class ChunkingResult:
    root: ObjectId
    leaves: Tuple[StoredObject, ...]
    manifest: Optional[MerkleManifest] = None

    @property
    def total_size(self) -> int:
        return sum(len(leaf.data) for leaf in self.leaves)

    def objects(self) -> List[StoredObject]:
        """Every object that must be stored: leaves, then the manifest when present"""
        stored = list(self.leaves)
        if self.manifest is not None:
            stored.append(StoredObject.from_bytes(self.manifest.to_bytes()))
        return stored


def manifest_name(root: ObjectId) -> str:
    return f"{root}{MANIFEST_SUFFIX}"


def capsule_name(root: ObjectId) -> str:
    return f"{root}{CAPSULE_SUFFIX}"


def split_alias(name: str) -> Tuple[ObjectId, str]:
    """'<root>_mt' -> (root, '_mt'); a bare id returns (id, '')"""
    for suffix in (MANIFEST_SUFFIX, CAPSULE_SUFFIX):
        if name.endswith(suffix) and is_object_id(name[:-len(suffix)]):
            return name[:-len(suffix)], suffix
    return name, ''


def build_levels(leaf_ids: Sequence[ObjectId]) -> List[List[ObjectId]]:
    """
    Pairwise-hash leaf digests up to a single root

    An unpaired last node is promoted to the next level unchanged.
    """
    if not leaf_ids:
        raise EmptyLeafSet("cannot build a Merkle tree without leaves")
    levels = [list(leaf_ids)]
    while len(levels[-1]) > 1:
        current = levels[-1]
        parents = []
        for i in range(0, len(current) - 1, 2):
            parents.append(sha256_hex(bytes.fromhex(current[i]) + bytes.fromhex(current[i + 1])))
        if len(current) % 2 == 1:
            parents.append(current[-1])
        levels.append(parents)
    return levels


def build_root(leaf_ids: Sequence[ObjectId]) -> ObjectId:
    return build_levels(leaf_ids)[-1][0]


def chunk(content: bytes) -> ChunkingResult:
    """Split content into <= 1 MiB objects and bind them with a Merkle root"""
    if len(content) <= CONVENTION_OBJECT_SIZE:
        leaf = StoredObject(id=sha256_hex(content), data=bytes(content))
        return ChunkingResult(root=leaf.id, leaves=(leaf,))

    view = memoryview(content)
    leaves = tuple(
        StoredObject(id=sha256_hex(view[i:i + CONVENTION_OBJECT_SIZE]),
                     data=bytes(view[i:i + CONVENTION_OBJECT_SIZE]))
        for i in range(0, len(content), CONVENTION_OBJECT_SIZE)
    )
    leaf_ids = tuple(leaf.id for leaf in leaves)
    levels = build_levels(leaf_ids)
    manifest = MerkleManifest(
        root=levels[-1][0],
        total_size=len(content),
        leaf_ids=leaf_ids,
        levels=tuple(tuple(level) for level in levels),
    )
    return ChunkingResult(root=manifest.root, leaves=leaves, manifest=manifest)


def verify_object(object_id: ObjectId, data: bytes) -> bool:
    return sha256_hex(data) == object_id


Descriptor = Union[ChunkingResult, MerkleManifest, ObjectId]


def reassemble(descriptor: Descriptor, fetch: Callable[[ObjectId], bytes]) -> bytes:
    """
    Fetch and verify every object named by the descriptor and return the content

    Args:
        descriptor: a ChunkingResult, a MerkleManifest, or the root id of a
            single-object content
        fetch: returns the bytes for an object id; may raise MissingObject
    """
    if isinstance(descriptor, ChunkingResult):
        descriptor = descriptor.manifest if descriptor.manifest is not None else descriptor.root

    if isinstance(descriptor, str):
        data = _fetch_verified(descriptor, fetch)
        return data

    manifest = descriptor
    rebuilt = build_root(manifest.leaf_ids)
    if rebuilt != manifest.root:
        raise RootMismatch(manifest.root, rebuilt)

    parts = [_fetch_verified(leaf_id, fetch) for leaf_id in manifest.leaf_ids]
    content = b''.join(parts)
    if len(content) != manifest.total_size:
        raise RootMismatch(manifest.root, f"size {len(content)} != {manifest.total_size}")
    return content


def _fetch_verified(object_id: ObjectId, fetch: Callable[[ObjectId], bytes]) -> bytes:
    data = fetch(object_id)
    if data is None:
        raise MissingObject(object_id)
    if not verify_object(object_id, data):
        raise IntegrityFailure(object_id)
    return data


class ObjectStore:
    """
    Local object store keyed by hex id

    With a data directory, objects live under <data_dir>/objects/<hex id> and
    aliases ('<root>_mt', '<root>_capsule') are small link files holding the
    target id. Without one, everything stays in memory.
    """

    def __init__(self, data_dir: Optional[Path] = None, capacity_bytes: Optional[int] = None):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.capacity_bytes = capacity_bytes
        self.lock = threading.Lock()
        self._memory: Dict[ObjectId, bytes] = {}
        self._aliases: Dict[str, ObjectId] = {}
        self._used = 0

        if self.data_dir is not None:
            self.objects_dir.mkdir(parents=True, exist_ok=True)
            for entry in self.objects_dir.iterdir():
                if is_object_id(entry.name):
                    self._used += entry.stat().st_size
                else:
                    self._aliases[entry.name] = entry.read_text().strip()

    @property
    def objects_dir(self) -> Path:
        return self.data_dir / "objects"

    @property
    def used_bytes(self) -> int:
        return self._used

    def put(self, data: bytes) -> ObjectId:
        if len(data) > CONVENTION_OBJECT_SIZE:
            raise ObjectTooLarge(f"{len(data)} bytes exceeds {CONVENTION_OBJECT_SIZE}")
        object_id = sha256_hex(data)
        with self.lock:
            if self._has(object_id):
                return object_id
            if self.capacity_bytes is not None and self._used + len(data) > self.capacity_bytes:
                raise StoreFull(f"store full ({self._used}/{self.capacity_bytes} bytes)")
            self._write(object_id, data)
            self._used += len(data)
        return object_id

    def put_unchecked(self, object_id: ObjectId, data: bytes) -> None:
        """Store bytes under an id without hashing them (fault injection)"""
        with self.lock:
            if self._has(object_id):
                self._used -= len(self._read(object_id))
            self._write(object_id, data)
            self._used += len(data)

    def get(self, object_id: ObjectId) -> bytes:
        with self.lock:
            if not self._has(object_id):
                raise MissingObject(object_id)
            return self._read(object_id)

    def has(self, object_id: ObjectId) -> bool:
        with self.lock:
            return self._has(object_id)

    def delete(self, object_id: ObjectId) -> bool:
        with self.lock:
            if not self._has(object_id):
                return False
            self._used -= len(self._read(object_id))
            if self.data_dir is None:
                del self._memory[object_id]
            else:
                (self.objects_dir / object_id).unlink()
            for name in [n for n, target in self._aliases.items() if target == object_id]:
                self._unlink_alias(name)
            return True

    def link(self, name: str, object_id: ObjectId) -> None:
        """Bind an alias name to a stored object"""
        with self.lock:
            if not self._has(object_id):
                raise MissingObject(object_id)
            self._aliases[name] = object_id
            if self.data_dir is not None:
                self._atomic_write(self.objects_dir / name, object_id.encode('ascii'))

    def resolve(self, name: str) -> Optional[ObjectId]:
        with self.lock:
            if is_object_id(name):
                return name if self._has(name) else None
            return self._aliases.get(name)

    def aliases_of(self, object_id: ObjectId) -> List[str]:
        with self.lock:
            return sorted(n for n, target in self._aliases.items() if target == object_id)

    def object_ids(self) -> List[ObjectId]:
        with self.lock:
            if self.data_dir is None:
                return sorted(self._memory)
            return sorted(p.name for p in self.objects_dir.iterdir() if is_object_id(p.name))

    def routing_key(self, object_id: ObjectId) -> ObjectId:
        """The hash whose Group Path this object is placed on"""
        for name in self.aliases_of(object_id):
            root, suffix = split_alias(name)
            if suffix:
                return root
        return object_id

    # ----- internals (caller holds the lock) -----

    def _has(self, object_id: ObjectId) -> bool:
        if self.data_dir is None:
            return object_id in self._memory
        return (self.objects_dir / object_id).is_file()

    def _read(self, object_id: ObjectId) -> bytes:
        if self.data_dir is None:
            return self._memory[object_id]
        return (self.objects_dir / object_id).read_bytes()

    def _write(self, object_id: ObjectId, data: bytes) -> None:
        if self.data_dir is None:
            self._memory[object_id] = bytes(data)
        else:
            self._atomic_write(self.objects_dir / object_id, data)

    def _unlink_alias(self, name: str) -> None:
        self._aliases.pop(name, None)
        if self.data_dir is not None:
            path = self.objects_dir / name
            if path.exists():
                path.unlink()

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix='.tmp-')
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(data)
            os.replace(tmp, path)
        except Exception:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
