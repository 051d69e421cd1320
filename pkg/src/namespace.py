"""
Folder objects: encrypted directory records naming files and sub-folders

Object ids carry no names; names and sizes live only inside folder objects,
which are sealed with the owner's key like any other content.
"""
import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Tuple

from src.crypto_pre import Capsule, PrivateKey, PublicKey, RandomSource, decrypt, encrypt
from src.errors import DuplicateName, MalformedFolder, NameNotFound, NamespaceError
from src.merkle_store import ChunkingResult, chunk
from src.utils import canonical_json, is_object_id

FOLDER_VERSION = 1


class EntryKind(str, Enum):
    FILE = 'file'
    FOLDER = 'folder'


@dataclass(frozen=True)
class FolderEntry:
    name: str
    kind: EntryKind
    object_ref: str
    size: int
    capsule_ref: str

    def __post_init__(self):
        object.__setattr__(self, 'kind', EntryKind(self.kind))
        validate_name(self.name)
        if self.size < 0:
            raise NamespaceError(f"negative size for {self.name!r}")

    def to_record(self) -> Dict:
        return {
            'kind': self.kind.value,
            'object_ref': self.object_ref,
            'size': self.size,
            'capsule_ref': self.capsule_ref,
        }


@dataclass(frozen=True)
class FolderObject:
    """Immutable folder value; entries are kept sorted by name"""
    entries: Tuple[FolderEntry, ...] = ()
    total_size: int = 0

    @classmethod
    def empty(cls) -> 'FolderObject':
        return cls()

    @classmethod
    def of(cls, entries: Iterable[FolderEntry]) -> 'FolderObject':
        folder = cls.empty()
        for entry in entries:
            folder = add_entry(folder, entry)
        return folder

    def get(self, name: str) -> Optional[FolderEntry]:
        for entry in self.entries:
            if entry.name == name:
                return entry
        return None

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return [e.name for e in self.entries]


@dataclass(frozen=True)
class RootPointer:
    owner: str
    root_ref: str
    group_id: str  # bits of the node that stored the root folder


def validate_name(name: str) -> None:
    if not isinstance(name, str) or not name or '/' in name or name in ('.', '..'):
        raise NamespaceError(f"invalid entry name {name!r}")


def split_path(path: str) -> List[str]:
    """'/a/b/c.txt' -> ['a', 'b', 'c.txt']; the root folder is []"""
    parts = [p for p in path.strip().split('/') if p]
    for part in parts:
        validate_name(part)
    return parts


# ========== ENCODING ==========

def encode_folder(folder: FolderObject) -> bytes:
    return canonical_json({
        'version': FOLDER_VERSION,
        'entries': {e.name: e.to_record() for e in folder.entries},
        'total_size': folder.total_size,
    })


def decode_folder(data: bytes) -> FolderObject:
    try:
        record = json.loads(data.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedFolder(f"folder data is not JSON: {e}") from e
    if not isinstance(record, dict) or record.get('version') != FOLDER_VERSION:
        raise MalformedFolder("missing or unsupported folder version")
    raw_entries = record.get('entries')
    total = record.get('total_size')
    if not isinstance(raw_entries, dict) or not isinstance(total, int):
        raise MalformedFolder("folder needs an entries map and an integer total_size")

    entries = []
    for name, fields in raw_entries.items():
        try:
            entry = FolderEntry(
                name=name,
                kind=fields['kind'],
                object_ref=fields['object_ref'],
                size=int(fields['size']),
                capsule_ref=fields['capsule_ref'],
            )
        except (KeyError, TypeError, ValueError, NamespaceError) as e:
            raise MalformedFolder(f"bad entry {name!r}: {e}") from e
        if not (is_object_id(entry.object_ref) and is_object_id(entry.capsule_ref)):
            raise MalformedFolder(f"entry {name!r} does not reference object ids")
        entries.append(entry)

    folder = FolderObject(entries=tuple(sorted(entries, key=lambda e: e.name)),
                          total_size=sum(e.size for e in entries))
    if folder.total_size != total:
        raise MalformedFolder(f"total_size {total} disagrees with entries ({folder.total_size})")
    return folder


# ========== MUTATION ==========

def add_entry(folder: FolderObject, entry: FolderEntry) -> FolderObject:
    if entry.name in folder:
        raise DuplicateName(f"{entry.name!r} already exists")
    entries = tuple(sorted(folder.entries + (entry,), key=lambda e: e.name))
    return FolderObject(entries=entries, total_size=folder.total_size + entry.size)


def remove_entry(folder: FolderObject, name: str) -> FolderObject:
    entry = folder.get(name)
    if entry is None:
        raise NameNotFound(f"{name!r} not found")
    entries = tuple(e for e in folder.entries if e.name != name)
    return FolderObject(entries=entries, total_size=folder.total_size - entry.size)


def replace_entry(folder: FolderObject, entry: FolderEntry) -> FolderObject:
    """Insert or overwrite by name (used when a sub-folder is re-sealed)"""
    if entry.name in folder:
        folder = remove_entry(folder, entry.name)
    return add_entry(folder, entry)


def folder_total(folder: FolderObject,
                 load: Optional[Callable[[FolderEntry], FolderObject]] = None) -> int:
    """
    Total bytes under a folder

    Without a loader the stored sizes are summed (folder entries already carry
    their subtree totals); with one, sub-folders are opened and recomputed.
    """
    total = 0
    for entry in folder.entries:
        if entry.kind is EntryKind.FOLDER and load is not None:
            total += folder_total(load(entry), load)
        else:
            total += entry.size
    return total


# ========== SEALING ==========

class SealedContent(NamedTuple):
    ciphertext: bytes
    capsule: Capsule
    chunks: ChunkingResult

    @property
    def root(self) -> str:
        return self.chunks.root


def seal_bytes(public_key: PublicKey, data: bytes, rng: Optional[RandomSource] = None) -> SealedContent:
    """Encrypt under the owner's key, then chunk the ciphertext"""
    ciphertext, capsule = encrypt(public_key, data, rng)
    return SealedContent(ciphertext, capsule, chunk(ciphertext))


def seal_folder(public_key: PublicKey, folder: FolderObject,
                rng: Optional[RandomSource] = None) -> SealedContent:
    return seal_bytes(public_key, encode_folder(folder), rng)


def open_folder(private_key: PrivateKey, capsule: Capsule, ciphertext: bytes) -> FolderObject:
    return decode_folder(decrypt(private_key, capsule, ciphertext))
