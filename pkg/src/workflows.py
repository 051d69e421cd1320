"""
User-level flows: upload, retrieval, folders, sharing and acceptance

Every flow talks to storage nodes through a StorageNetwork (simulator or
TCP client) and to the ledger through Ledger or RemoteLedger.
"""
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from src.crypto_pre import Capsule, KeyPair, PublicKey, RandomSource, decrypt, reencrypt, rekey
from src.errors import (
    DuplicateName, IntegrityFailure, MissingObject, NameNotFound, NamespaceError,
    NotAddressee, NotAFile, NotAFolder, NotFound, RootMismatch, StoreFull, StorageError,
    UnreachableNode
)
from src.event_logger import logger
from src.ledger import FileSend, Receipt, StorageContract, Transaction
from src.merkle_store import (
    MerkleManifest, StoredObject, capsule_name, manifest_name, reassemble, verify_object
)
from src.namespace import (
    EntryKind, FolderEntry, FolderObject, RootPointer, SealedContent, add_entry,
    decode_folder, folder_total, replace_entry, seal_bytes, seal_folder, split_path
)
from src.replication import ReplicationPolicy, ReplicationResult, replicate
from src.routing import fallback_chain, group_path, hex_to_bits, placement_target
from src.storage_node import StorageClient, StorageNetwork
from src.tree_overlay import NodeInfo
from src.utils import is_object_id, sha256_hex


@dataclass(frozen=True)
class Placed:
    """An object pushed during a workflow and the node that took it"""
    object_id: str
    routing_key: str
    node: NodeInfo


class UserSession:
    """
    One user's view of the network: key pair, ledger handle, network entry
    and a root-folder cache that is revalidated against the ledger
    """

    def __init__(self, keys: KeyPair, ledger, network: StorageNetwork,
                 rng: Optional[RandomSource] = None, policy: Optional[ReplicationPolicy] = None):
        self.keys = keys
        self.ledger = ledger
        self.client = StorageClient(network)
        self.rng = rng or RandomSource()
        self.policy = policy or ReplicationPolicy()
        self.root_cache: Optional[Tuple[FolderObject, RootPointer]] = None
        self.accepted: Tuple[str, ...] = ()
        self.replications: List[ReplicationResult] = []
        self._members: Optional[List[NodeInfo]] = None

    @property
    def owner(self) -> str:
        return self.keys.public.digest()

    # ----- membership -----

    def members(self, refresh: bool = False) -> List[NodeInfo]:
        if refresh or self._members is None:
            self._members = self.client.members()
        return self._members

    # ----- object transfer -----

    def _store(self, data: bytes, aliases: Sequence[str] = (), routing_key: Optional[str] = None,
               target: Optional[NodeInfo] = None) -> Placed:
        """Push to the outermost node, falling back up the Group Path when full"""
        object_id = sha256_hex(data)
        key = routing_key or object_id
        bits = hex_to_bits(key)
        if target is None:
            target = placement_target(key, self.client.entry(), self.client.ask)
        last_error = ''
        for node in fallback_chain(bits, target, self.members()):
            result = self.client.push(node, data, aliases)
            if result.ok:
                return Placed(object_id, key, node)
            last_error = result.error
            if result.error != 'full':
                raise StorageError(f"{node.short_id} rejected {object_id[:12]}: {result.error}")
        raise StoreFull(f"every Group Path node for {key[:12]} refused the object ({last_error})")

    def _upload(self, sealed: SealedContent) -> List[Placed]:
        """Leaves concurrently, then the capsule, then the manifest last; all keyed for placement"""
        root = sealed.root
        leaves = sealed.chunks.leaves
        targets = [placement_target(leaf.id, self.client.entry(), self.client.ask) for leaf in leaves]
        results = self.client.push_many([(node, leaf.data, ()) for node, leaf in zip(targets, leaves)])

        placed = []
        for leaf, node, result in zip(leaves, targets, results):
            if result.ok:
                placed.append(Placed(leaf.id, leaf.id, node))
            else:
                placed.append(self._store(leaf.data, routing_key=leaf.id, target=node))

        placed.append(self._store(sealed.capsule.to_bytes(), [capsule_name(root)], routing_key=root))
        manifest = sealed.chunks.manifest
        if manifest is not None:
            stored = StoredObject.from_bytes(manifest.to_bytes())
            placed.append(self._store(stored.data, [manifest_name(root)], routing_key=root))
        return placed

    def _candidates(self, routing_key: str, hint: Optional[str] = None) -> List[NodeInfo]:
        path = list(reversed(group_path(hex_to_bits(routing_key), self.members())))
        if hint is not None:
            path.sort(key=lambda n: n.group_id.bits != hint)
        return path

    def fetch(self, name: str, routing_key: str, hint: Optional[str] = None) -> bytes:
        """
        Fetch an object by id or alias from its Group Path, deepest holder
        first (the group id hint goes first when given)
        """
        corrupted = False
        for node in self._candidates(routing_key, hint):
            try:
                found = self.client.fetch(node, name)
            except UnreachableNode:
                continue
            if found is None:
                continue
            object_id, data = found
            if not verify_object(object_id, data) or (is_object_id(name) and object_id != name):
                corrupted = True
                logger.log_event('fetch_integrity_failed', {'object': name, 'node': node.node_id})
                continue
            return data
        if corrupted:
            raise IntegrityFailure(name)
        raise MissingObject(name)

    def _fetch_capsule(self, object_ref: str, capsule_ref: Optional[str]) -> Capsule:
        if capsule_ref is None:
            return Capsule.from_bytes(self.fetch(capsule_name(object_ref), object_ref))
        try:
            return Capsule.from_bytes(self.fetch(capsule_ref, object_ref))
        except MissingObject:
            return Capsule.from_bytes(self.fetch(capsule_ref, capsule_ref))

    def _ciphertext(self, object_ref: str, hint: Optional[str] = None) -> bytes:
        try:
            return self.fetch(object_ref, object_ref, hint)
        except MissingObject:
            pass
        manifest = MerkleManifest.from_bytes(self.fetch(manifest_name(object_ref), object_ref, hint))
        if manifest.root != object_ref:
            raise RootMismatch(object_ref, manifest.root)
        return reassemble(manifest, lambda oid: self.fetch(oid, oid))

    def read(self, object_ref: str, capsule_ref: Optional[str] = None, hint: Optional[str] = None) -> bytes:
        """Fetch, verify and decrypt one stored content"""
        capsule = self._fetch_capsule(object_ref, capsule_ref)
        return decrypt(self.keys.private, capsule, self._ciphertext(object_ref, hint))

    # ----- folders -----

    def load_root(self, owner: Optional[str] = None) -> Tuple[FolderObject, Optional[RootPointer]]:
        owner = owner or self.owner
        try:
            pointer = self.ledger.latest_root(owner)
        except NotFound:
            if owner == self.owner:
                self.root_cache = None
                self._load_accepted()
            return FolderObject.empty(), None
        if owner == self.owner and self.root_cache is not None and self.root_cache[1] == pointer:
            return self.root_cache
        folder = decode_folder(self.read(pointer.root_ref, hint=pointer.group_id))
        if owner == self.owner:
            self.root_cache = (folder, pointer)
            self._load_accepted()
        return folder, pointer

    def _load_accepted(self) -> None:
        found = self.ledger.latest_contract(self.owner)
        self.accepted = tuple(found[1].accepted) if found is not None else ()

    def open_entry_folder(self, entry: FolderEntry) -> FolderObject:
        if entry.kind is not EntryKind.FOLDER:
            raise NotAFolder(f"{entry.name!r} is a file")
        return decode_folder(self.read(entry.object_ref, entry.capsule_ref))

    def folder_chain(self, names: Sequence[str], create: bool = False,
                     owner: Optional[str] = None) -> List[FolderObject]:
        """Folders from the root down to names[-1]; missing ones are empty when create"""
        folder, _ = self.load_root(owner)
        chain = [folder]
        for name in names:
            entry = folder.get(name)
            if entry is None:
                if not create:
                    raise NameNotFound(f"{name!r} not found")
                folder = FolderObject.empty()
            else:
                folder = self.open_entry_folder(entry)
            chain.append(folder)
        return chain

    def _seal_chain(self, chain: List[FolderObject], names: Sequence[str],
                    leaf_folder: FolderObject) -> Tuple[FolderObject, List[Placed]]:
        """Re-seal every ancestor of a changed folder; returns the new root and uploads"""
        placed: List[Placed] = []
        folder = leaf_folder
        for depth in reversed(range(len(names))):
            sealed = seal_folder(self.keys.public, folder, self.rng)
            placed += self._upload(sealed)
            entry = FolderEntry(names[depth], EntryKind.FOLDER, sealed.root, folder.total_size,
                                sha256_hex(sealed.capsule.to_bytes()))
            folder = replace_entry(chain[depth], entry)
        return folder, placed

    def commit(self, root: FolderObject, placed: List[Placed], extra_accepted: Iterable[str] = ()) -> Receipt:
        """Store the new root folder, commit it, then replicate everything pushed"""
        sealed = seal_folder(self.keys.public, root, self.rng)
        root_uploads = self._upload(sealed)
        placed = placed + root_uploads
        anchor = next((p for p in root_uploads if p.object_id == sealed.root), root_uploads[-1])

        accepted = tuple(sorted(set(self.accepted) | set(extra_accepted)))
        contract = StorageContract(owner=self.owner, root_ref=sealed.root,
                                   group_id=anchor.node.group_id.bits, accepted=accepted)
        receipt = self.submit(contract)
        self.accepted = accepted
        self.root_cache = (root, RootPointer(self.owner, sealed.root, contract.group_id))
        logger.log_event('contract_committed', {'owner': self.owner, 'root': sealed.root,
                                                'group_id': contract.group_id, 'height': receipt.height})
        self.replicate_all(placed, receipt)
        return receipt

    def submit(self, payload: Union[StorageContract, FileSend]) -> Receipt:
        receipt = self.ledger.submit(Transaction.create(payload, self.keys))
        self.ledger.wait_sealed(receipt)
        return receipt

    def replicate_all(self, placed: Sequence[Placed], receipt: Receipt) -> None:
        members = self.members(refresh=True)
        for item in placed:
            result = replicate(self.client, item.object_id, item.node, self.policy, members,
                               receipt.to_record(), routing_key=item.routing_key)
            self.replications.append(result)


# ========== FLOWS ==========

def _split_file_path(path: str) -> Tuple[List[str], str]:
    parts = split_path(path)
    if not parts:
        raise NamespaceError("path does not name an entry")
    return parts[:-1], parts[-1]


def put_file(session: UserSession, path: str, content: bytes) -> Receipt:
    """Encrypt, chunk, place and replicate a file, then commit the new root"""
    session.members(refresh=True)
    folders, name = _split_file_path(path)
    chain = session.folder_chain(folders, create=True)
    if name in chain[-1]:
        raise DuplicateName(f"{path!r} already exists")

    sealed = seal_bytes(session.keys.public, content, session.rng)
    placed = session._upload(sealed)
    entry = FolderEntry(name, EntryKind.FILE, sealed.root, len(content),
                        sha256_hex(sealed.capsule.to_bytes()))
    root, folder_uploads = session._seal_chain(chain, folders, add_entry(chain[-1], entry))
    receipt = session.commit(root, placed + folder_uploads)
    logger.log_event('file_stored', {'owner': session.owner, 'path': path, 'size': len(content),
                                     'objects': len(placed)})
    return receipt


def make_folder(session: UserSession, path: str) -> Receipt:
    session.members(refresh=True)
    folders, name = _split_file_path(path)
    chain = session.folder_chain(folders, create=True)
    if name in chain[-1]:
        raise DuplicateName(f"{path!r} already exists")
    sealed = seal_folder(session.keys.public, FolderObject.empty(), session.rng)
    placed = session._upload(sealed)
    entry = FolderEntry(name, EntryKind.FOLDER, sealed.root, 0, sha256_hex(sealed.capsule.to_bytes()))
    root, folder_uploads = session._seal_chain(chain, folders, add_entry(chain[-1], entry))
    return session.commit(root, placed + folder_uploads)


def resolve_entry(session: UserSession, path: str, owner: Optional[str] = None) -> FolderEntry:
    folders, name = _split_file_path(path)
    folder = session.folder_chain(folders, owner=owner)[-1]
    entry = folder.get(name)
    if entry is None:
        raise NameNotFound(f"{path!r} not found")
    return entry


def get_file(session: UserSession, path: str, owner: Optional[str] = None) -> bytes:
    """
    Read a file; owner selects another user's namespace, which only
    decrypts for that user's own key (anyone else gets WrongKey)
    """
    session.members(refresh=True)
    entry = resolve_entry(session, path, owner)
    if entry.kind is not EntryKind.FILE:
        raise NotAFile(f"{path!r} is a folder")
    return session.read(entry.object_ref, entry.capsule_ref)


def list_folder(session: UserSession, path: str = '/') -> List[FolderEntry]:
    session.members(refresh=True)
    names = split_path(path)
    return list(session.folder_chain(names)[-1].entries)


def storage_usage(session: UserSession, path: str = '/') -> int:
    """Bytes under a folder, recomputed by opening every sub-folder"""
    session.members(refresh=True)
    folder = session.folder_chain(split_path(path))[-1]
    return folder_total(folder, session.open_entry_folder)


def share_file(session: UserSession, receiver: PublicKey, path: str) -> Receipt:
    """Re-target the file's capsule to receiver and record the grant on the ledger"""
    session.members(refresh=True)
    entry = resolve_entry(session, path)
    if entry.kind is not EntryKind.FILE:
        raise NotAFile(f"{path!r} is a folder")

    capsule = session._fetch_capsule(entry.object_ref, entry.capsule_ref)
    shared = reencrypt(rekey(session.keys.private, receiver, session.rng), capsule)
    placed = session._store(shared.to_bytes())
    grant = FileSend(sender=session.owner, receiver=receiver.digest(), object_ref=entry.object_ref,
                     reenc_capsule_ref=placed.object_id, name=entry.name, size=entry.size)
    receipt = session.submit(grant)
    session.replicate_all([placed], receipt)
    logger.log_event('file_shared', {'sender': session.owner, 'receiver': grant.receiver,
                                     'object': entry.object_ref, 'tx': receipt.tx_id})
    return receipt


def share_with_many(session: UserSession, receivers: Sequence[PublicKey], path: str) -> List[Receipt]:
    return [share_file(session, receiver, path) for receiver in receivers]


def pending_shares(session: UserSession) -> List[Transaction]:
    return session.ledger.pending_shares(session.owner)


def accept_share(session: UserSession, grant: Transaction, folder: str = '/',
                 name: Optional[str] = None) -> Receipt:
    """Add a shared file to the receiver's namespace; no object bytes move"""
    payload = grant.payload
    if not isinstance(payload, FileSend) or payload.receiver != session.owner:
        raise NotAddressee(f"transaction {grant.tx_id[:12]} is not addressed to {session.owner[:12]}")
    session.members(refresh=True)
    names = split_path(folder)
    chain = session.folder_chain(names, create=True)
    entry_name = name or payload.name or payload.object_ref[:16]
    if entry_name in chain[-1]:
        raise DuplicateName(f"{entry_name!r} already exists")
    entry = FolderEntry(entry_name, EntryKind.FILE, payload.object_ref, payload.size,
                        payload.reenc_capsule_ref)
    root, placed = session._seal_chain(chain, names, add_entry(chain[-1], entry))
    receipt = session.commit(root, placed, extra_accepted=[grant.tx_id])
    logger.log_event('share_accepted', {'receiver': session.owner, 'tx': grant.tx_id})
    return receipt


def cancel_subscription(session: UserSession) -> Receipt:
    """Commit an empty root; latest_root reports NotFound afterwards"""
    session.load_root()
    receipt = session.submit(StorageContract(owner=session.owner, root_ref='', group_id='',
                                             accepted=session.accepted))
    session.root_cache = None
    logger.log_event('subscription_cancelled', {'owner': session.owner})
    return receipt
