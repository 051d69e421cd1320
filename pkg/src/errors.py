"""
Exception hierarchy for the MTFS storage network
"""
from typing import Optional


class MtfsError(Exception):
    """Base class for every error raised by the package"""


# ========== STORAGE ==========
class StorageError(MtfsError):
    pass


class EmptyLeafSet(StorageError):
    pass


class ObjectTooLarge(StorageError):
    pass


class StoreFull(StorageError):
    pass


class MissingObject(StorageError):
    def __init__(self, object_id: str):
        super().__init__(f"object {object_id} is not available")
        self.object_id = object_id


class IntegrityFailure(StorageError):
    def __init__(self, object_id: str):
        super().__init__(f"object {object_id} failed hash verification")
        self.object_id = object_id


class RootMismatch(StorageError):
    def __init__(self, declared: str, rebuilt: str):
        super().__init__(f"rebuilt root {rebuilt} does not match declared root {declared}")
        self.declared = declared
        self.rebuilt = rebuilt


# ========== CRYPTOGRAPHY ==========
class CryptoError(MtfsError):
    pass


class WrongKey(CryptoError):
    pass


class CapsuleMismatch(CryptoError):
    pass


class AlreadyReencrypted(CryptoError):
    pass


class InvalidCapsule(CryptoError):
    pass


class InvalidKey(CryptoError):
    pass


# ========== OVERLAY ==========
class OverlayError(MtfsError):
    pass


class AlreadyBootstrapped(OverlayError):
    pass


class NoOpenBranch(OverlayError):
    pass


class JoinFailed(OverlayError):
    pass


class KTooSmall(OverlayError):
    pass


class NotAMember(OverlayError):
    pass


# ========== ROUTING ==========
class RoutingError(MtfsError):
    pass


class InvalidHex(RoutingError):
    pass


class UnreachableNode(RoutingError):
    def __init__(self, node_id: str, detail: str = ""):
        message = f"node {node_id[:12]} is unreachable"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.node_id = node_id


# ========== NAMESPACE ==========
class NamespaceError(MtfsError):
    pass


class MalformedFolder(NamespaceError):
    pass


class DuplicateName(NamespaceError):
    pass


class NameNotFound(NamespaceError):
    pass


class NotAFolder(NamespaceError):
    pass


# ========== LEDGER ==========
class LedgerError(MtfsError):
    pass


class BadSignature(LedgerError):
    pass


class NotFound(LedgerError):
    pass


class LedgerDown(LedgerError):
    pass


# ========== REPLICATION ==========
class ReplicationError(MtfsError):
    pass


class ProofTimeout(ReplicationError):
    pass


class BadProof(ReplicationError):
    pass


class ReplayedNonce(ReplicationError):
    pass


class ObjectLost(ReplicationError):
    pass


# ========== WIRE / TRANSPORT ==========
class FrameError(MtfsError):
    pass


class Truncated(FrameError):
    pass


class VersionError(FrameError):
    pass


class UnknownVariant(FrameError):
    pass


class MalformedFrame(FrameError):
    pass


class TransportError(MtfsError):
    pass


class ConnectionRefused(TransportError):
    pass


class PeerClosed(TransportError):
    pass


# ========== SIMULATION / WORKFLOWS ==========
class ScenarioError(MtfsError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class WorkflowError(MtfsError):
    pass


class NotAddressee(WorkflowError):
    pass


class NotAFile(WorkflowError):
    pass
