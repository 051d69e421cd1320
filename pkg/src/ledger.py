"""
Append-only hash-chained ledger of storage contracts and file-send grants

A single sequencer seals pending transactions into blocks every
BLOCK_INTERVAL_S seconds (injected clock) or every BLOCK_MAX_TXS
transactions, whichever comes first.
"""
import json
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, Union

from config.settings import BLOCK_INTERVAL_S, BLOCK_MAX_TXS
from src.crypto_pre import KeyPair, PublicKey, sign, verify_signature
from src.errors import BadSignature, InvalidKey, LedgerError, NotFound
from src.event_logger import logger
from src.merkle_store import build_root
from src.namespace import RootPointer
from src.utils import canonical_json, sha256_hex

ZERO_HASH = '00' * 32


class TxKind(str, Enum):
    STORAGE_CONTRACT = 'storage_contract'
    FILE_SEND = 'file_send'


@dataclass(frozen=True)
class StorageContract:
    owner: str
    root_ref: str  # empty string cancels the subscription
    group_id: str
    accepted: Tuple[str, ...] = ()

    kind = TxKind.STORAGE_CONTRACT

    @property
    def actor(self) -> str:
        return self.owner

    @property
    def is_cancellation(self) -> bool:
        return self.root_ref == ''

    def to_record(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'owner': self.owner,
            'root_ref': self.root_ref,
            'group_id': self.group_id,
            'accepted': list(self.accepted),
        }


@dataclass(frozen=True)
class FileSend:
    sender: str
    receiver: str
    object_ref: str
    reenc_capsule_ref: str
    name: str = ''
    size: int = 0

    kind = TxKind.FILE_SEND

    @property
    def actor(self) -> str:
        return self.sender

    def to_record(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'sender': self.sender,
            'receiver': self.receiver,
            'object_ref': self.object_ref,
            'reenc_capsule_ref': self.reenc_capsule_ref,
            'name': self.name,
            'size': self.size,
        }


TxPayload = Union[StorageContract, FileSend]


def payload_from_record(record: Dict[str, Any]) -> TxPayload:
    try:
        kind = TxKind(record['kind'])
        if kind is TxKind.STORAGE_CONTRACT:
            return StorageContract(
                owner=record['owner'],
                root_ref=record['root_ref'],
                group_id=record['group_id'],
                accepted=tuple(record.get('accepted', ())),
            )
        return FileSend(
            sender=record['sender'],
            receiver=record['receiver'],
            object_ref=record['object_ref'],
            reenc_capsule_ref=record['reenc_capsule_ref'],
            name=record.get('name', ''),
            size=int(record.get('size', 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise LedgerError(f"malformed transaction payload: {e}") from e


@dataclass(frozen=True)
class Transaction:
    payload: TxPayload
    signer: str  # hex public key record
    signature: str  # hex

    @classmethod
    def create(cls, payload: TxPayload, keys: KeyPair) -> 'Transaction':
        body = canonical_json(payload.to_record())
        return cls(payload=payload, signer=keys.public.hex(), signature=sign(keys.private, body).hex())

    @property
    def body_bytes(self) -> bytes:
        return canonical_json(self.payload.to_record())

    @property
    def tx_id(self) -> str:
        return sha256_hex(canonical_json(self.to_record()))

    def verify(self) -> bool:
        """Signature is valid and made by the acting party"""
        try:
            public_key = PublicKey.from_hex(self.signer)
            signature = bytes.fromhex(self.signature)
        except (InvalidKey, ValueError):
            return False
        if public_key.digest() != self.payload.actor:
            return False
        return verify_signature(public_key, self.body_bytes, signature)

    def to_record(self) -> Dict[str, Any]:
        return {'payload': self.payload.to_record(), 'signer': self.signer, 'signature': self.signature}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'Transaction':
        try:
            return cls(payload=payload_from_record(record['payload']),
                       signer=str(record['signer']), signature=str(record['signature']))
        except (KeyError, TypeError) as e:
            raise LedgerError(f"malformed transaction: {e}") from e


def tx_root(transactions: Tuple[Transaction, ...]) -> str:
    if not transactions:
        return ZERO_HASH
    return build_root([tx.tx_id for tx in transactions])


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    tx_root: str
    timestamp: float
    transactions: Tuple[Transaction, ...] = ()

    def header(self) -> Dict[str, Any]:
        return {'height': self.height, 'prev_hash': self.prev_hash,
                'tx_root': self.tx_root, 'timestamp': self.timestamp}

    @property
    def block_hash(self) -> str:
        return sha256_hex(canonical_json(self.header()))

    def to_record(self) -> Dict[str, Any]:
        record = self.header()
        record['hash'] = self.block_hash
        record['transactions'] = [tx.to_record() for tx in self.transactions]
        return record

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_record())

    @classmethod
    def from_bytes(cls, data: bytes) -> 'Block':
        try:
            record = json.loads(data.decode('utf-8'))
            block = cls(
                height=int(record['height']),
                prev_hash=str(record['prev_hash']),
                tx_root=str(record['tx_root']),
                timestamp=float(record['timestamp']),
                transactions=tuple(Transaction.from_record(t) for t in record['transactions']),
            )
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise LedgerError(f"malformed block record: {e}") from e
        if record.get('hash') != block.block_hash or block.to_bytes() != data:
            raise LedgerError(f"block {block.height} record is not canonical or hash mismatch")
        return block


def genesis_block() -> Block:
    return Block(height=0, prev_hash=ZERO_HASH, tx_root=ZERO_HASH, timestamp=0.0)


@dataclass(frozen=True)
class Receipt:
    height: int
    index: int
    tx_id: str

    def to_record(self) -> Dict[str, Any]:
        return {'height': self.height, 'index': self.index, 'tx_id': self.tx_id}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'Receipt':
        return cls(int(record['height']), int(record['index']), str(record['tx_id']))


@dataclass
class ChainReport:
    valid: bool
    height: int  # last height checked
    failed_height: Optional[int] = None
    reason: str = ''

    def __bool__(self) -> bool:
        return self.valid


def verify_chain(blocks: List[Block]) -> ChainReport:
    """Check links, tx roots and signatures; reports the first failing height"""
    if not blocks:
        return ChainReport(False, -1, 0, 'no genesis block')
    prev_hash = None
    for expected_height, block in enumerate(blocks):
        failure = None
        if block.height != expected_height:
            failure = f"height {block.height} out of sequence"
        elif expected_height == 0 and (block.prev_hash != ZERO_HASH or block.transactions):
            failure = 'genesis must have a zero prev_hash and no transactions'
        elif expected_height > 0 and block.prev_hash != prev_hash:
            failure = 'prev_hash does not match the previous header'
        elif tx_root(block.transactions) != block.tx_root:
            failure = 'tx_root mismatch'
        else:
            bad = [i for i, tx in enumerate(block.transactions) if not tx.verify()]
            if bad:
                failure = f"bad signature at index {bad[0]}"
        if failure:
            return ChainReport(False, expected_height, expected_height, failure)
        prev_hash = block.block_hash
    return ChainReport(True, len(blocks) - 1)


def read_chain_file(path: Path) -> Tuple[List[Block], ChainReport]:
    """Parse length-prefixed block records; stops at the first unreadable record"""
    data = Path(path).read_bytes()
    blocks: List[Block] = []
    offset = 0
    while offset < len(data):
        height = len(blocks)
        if offset + 4 > len(data):
            return blocks, ChainReport(False, height, height, 'truncated length prefix')
        size = int.from_bytes(data[offset:offset + 4], 'big')
        record = data[offset + 4:offset + 4 + size]
        if len(record) != size:
            return blocks, ChainReport(False, height, height, 'truncated block record')
        try:
            blocks.append(Block.from_bytes(record))
        except LedgerError as e:
            return blocks, ChainReport(False, height, height, str(e))
        offset += 4 + size
    return blocks, verify_chain(blocks)


class Ledger:
    """Single-writer sequencer and query surface"""

    def __init__(self, path: Optional[Path] = None, clock: Callable[[], float] = time.time,
                 block_interval: float = BLOCK_INTERVAL_S, max_txs: int = BLOCK_MAX_TXS):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.block_interval = block_interval
        self.max_txs = max_txs
        self.lock = threading.RLock()
        self.blocks: List[Block] = []
        self.pending: List[Transaction] = []
        self.pending_since: Optional[float] = None

        # indexes over sealed blocks
        self._latest: Dict[str, Tuple[Receipt, StorageContract]] = {}
        self._accepted: Dict[str, set] = {}
        self._shares: Dict[str, List[Tuple[Receipt, Transaction]]] = {}
        self._by_id: Dict[str, Tuple[Receipt, Transaction]] = {}

        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            blocks, report = read_chain_file(self.path)
            if not report:
                raise LedgerError(f"chain file corrupt at height {report.failed_height}: {report.reason}")
            for block in blocks:
                self._append(block, persist=False)
            logger.logger.info(f"Ledger loaded: height {self.height}")
        else:
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
            self._append(genesis_block())

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    def head(self) -> Block:
        return self.blocks[-1]

    # ----- writing -----

    def submit(self, tx: Transaction) -> Receipt:
        if not tx.verify():
            raise BadSignature(f"transaction {tx.tx_id[:12]} does not verify")
        with self.lock:
            self.tick()
            if not self.pending:
                self.pending_since = self.clock()
            self.pending.append(tx)
            receipt = Receipt(height=len(self.blocks), index=len(self.pending) - 1, tx_id=tx.tx_id)
            if len(self.pending) >= self.max_txs:
                self.seal()
        logger.log_event('tx_submitted', {'kind': tx.payload.kind.value, **receipt.to_record()})
        return receipt

    def tick(self) -> Optional[Block]:
        """Seal if the pending block is older than the block interval"""
        with self.lock:
            if self.pending and self.clock() - self.pending_since >= self.block_interval:
                return self.seal()
        return None

    def seal(self) -> Optional[Block]:
        with self.lock:
            if not self.pending:
                return None
            txs = tuple(self.pending)
            block = Block(height=len(self.blocks), prev_hash=self.head().block_hash,
                          tx_root=tx_root(txs), timestamp=float(self.clock()), transactions=txs)
            self.pending = []
            self.pending_since = None
            self._append(block)
        logger.log_event('block_sealed', {'height': block.height, 'txs': len(block.transactions)})
        return block

    def wait_sealed(self, receipt: Receipt) -> Block:
        """Block containing the receipt's transaction, sealing early if needed"""
        with self.lock:
            if receipt.height >= len(self.blocks):
                self.seal()
            if receipt.height >= len(self.blocks):
                raise NotFound(f"no pending transaction for receipt {receipt.tx_id[:12]}")
            return self.blocks[receipt.height]

    def _append(self, block: Block, persist: bool = True) -> None:
        self.blocks.append(block)
        for index, tx in enumerate(block.transactions):
            receipt = Receipt(block.height, index, tx.tx_id)
            self._by_id[tx.tx_id] = (receipt, tx)
            payload = tx.payload
            if isinstance(payload, StorageContract):
                self._latest[payload.owner] = (receipt, payload)
                self._accepted.setdefault(payload.owner, set()).update(payload.accepted)
            else:
                self._shares.setdefault(payload.receiver, []).append((receipt, tx))
        if persist and self.path is not None:
            record = block.to_bytes()
            with open(self.path, 'ab') as f:
                f.write(len(record).to_bytes(4, 'big') + record)

    # ----- reading -----

    def latest_root(self, owner: str) -> RootPointer:
        with self.lock:
            found = self._latest.get(owner)
        if found is None or found[1].is_cancellation:
            raise NotFound(f"no storage contract for {owner[:12]}")
        contract = found[1]
        return RootPointer(owner=owner, root_ref=contract.root_ref, group_id=contract.group_id)

    def latest_contract(self, owner: str) -> Optional[Tuple[Receipt, StorageContract]]:
        with self.lock:
            return self._latest.get(owner)

    def pending_shares(self, receiver: str) -> List[Transaction]:
        with self.lock:
            accepted = self._accepted.get(receiver, set())
            return [tx for _, tx in self._shares.get(receiver, []) if tx.tx_id not in accepted]

    def find_transaction(self, tx_id: str) -> Tuple[Receipt, Transaction]:
        with self.lock:
            found = self._by_id.get(tx_id)
        if found is None:
            raise NotFound(f"transaction {tx_id[:12]} not in a sealed block")
        return found

    def transactions(self) -> Iterator[Tuple[Receipt, Transaction]]:
        with self.lock:
            blocks = list(self.blocks)
        for block in blocks:
            for index, tx in enumerate(block.transactions):
                yield Receipt(block.height, index, tx.tx_id), tx

    def verify_chain(self) -> ChainReport:
        with self.lock:
            return verify_chain(list(self.blocks))

    def status(self) -> Dict[str, Any]:
        with self.lock:
            return {'height': self.height, 'head': self.head().block_hash, 'pending': len(self.pending)}

    def state_digest(self) -> str:
        """Hash over sealed transaction ids, independent of block timing"""
        return sha256_hex(canonical_json([r.tx_id for r, _ in self.transactions()]))
