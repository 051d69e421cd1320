"""
Proxy re-encryption with capsules

A hybrid KEM + AEAD construction over the ed25519 prime-order group:

* encrypt() derives a symmetric key from an ElGamal-style encapsulation
  (the capsule) and seals the content with ChaCha20-Poly1305.
* rekey() binds the sender's secret to the receiver's public key through an
  ephemeral precursor point.
* reencrypt() transforms only the capsule; the ciphertext is never read.

Single hop: a re-encrypted capsule cannot be re-encrypted again.
"""
import hashlib
import os
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Tuple, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from nacl import bindings as sodium
from nacl.exceptions import CryptoError as SodiumError

from src.errors import (
    AlreadyReencrypted, CapsuleMismatch, InvalidCapsule, InvalidKey, WrongKey
)
from src.utils import sha256_hex

RECORD_VERSION = 1
POINT_SIZE = 32
SCALAR_SIZE = 32
CAPSULE_SIZE = 2 + 3 * POINT_SIZE
AEAD_OVERHEAD = 16
SIGNATURE_SIZE = POINT_SIZE + SCALAR_SIZE
_AEAD_NONCE = bytes(12)  # every capsule carries a fresh key

Seed = Union[int, str, bytes]


class CapsuleFlag(IntEnum):
    ORIGINAL = 0
    REENCRYPTED = 1


class RecordTag(IntEnum):
    PUBLIC_KEY = 0x10
    PRIVATE_KEY = 0x11
    REENCRYPTION_KEY = 0x12


# ========== GROUP HELPERS ==========

def _hash_to_scalar(domain: bytes, *parts: bytes) -> bytes:
    h = hashlib.sha512(b"mtfs/" + domain)
    for part in parts:
        h.update(len(part).to_bytes(4, 'big'))
        h.update(part)
    return sodium.crypto_core_ed25519_scalar_reduce(h.digest())


def _base(scalar: bytes) -> bytes:
    return sodium.crypto_scalarmult_ed25519_base_noclamp(scalar)


def _mul(scalar: bytes, point: bytes) -> bytes:
    try:
        return sodium.crypto_scalarmult_ed25519_noclamp(scalar, point)
    except SodiumError as e:
        raise InvalidCapsule(f"group operation failed: {e}") from e


def _add(p: bytes, q: bytes) -> bytes:
    return sodium.crypto_core_ed25519_add(p, q)


def _is_point(value: bytes) -> bool:
    return len(value) == POINT_SIZE and bool(sodium.crypto_core_ed25519_is_valid_point(value))


def _is_scalar(value: bytes) -> bool:
    return (
        len(value) == SCALAR_SIZE
        and value != bytes(SCALAR_SIZE)
        and sodium.crypto_core_ed25519_scalar_reduce(value + bytes(SCALAR_SIZE)) == value
    )


def _normalize_seed(seed: Seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    return str(seed).encode('utf-8')


class RandomSource:
    """
    Entropy for key generation and encryption

    Seeded sources produce a reproducible SHA-512 counter stream so protocol
    runs can be replayed exactly; unseeded sources read the OS generator.
    """

    def __init__(self, seed: Optional[Seed] = None):
        self._seed = None if seed is None else _normalize_seed(seed)
        self._counter = 0
        self._lock = threading.Lock()

    @property
    def seeded(self) -> bool:
        return self._seed is not None

    def random_bytes(self, n: int) -> bytes:
        if self._seed is None:
            return os.urandom(n)
        blocks = []
        with self._lock:
            for _ in range(-(-n // 64)):
                blocks.append(hashlib.sha512(self._seed + self._counter.to_bytes(8, 'big')).digest())
                self._counter += 1
        return b''.join(blocks)[:n]

    def scalar(self) -> bytes:
        while True:
            candidate = sodium.crypto_core_ed25519_scalar_reduce(self.random_bytes(64))
            if candidate != bytes(SCALAR_SIZE):
                return candidate

    def child(self, label: str) -> 'RandomSource':
        """Independent sub-stream; unseeded parents give unseeded children"""
        if self._seed is None:
            return RandomSource()
        return RandomSource(hashlib.sha256(self._seed + b"/" + label.encode('utf-8')).digest())


_default_source = RandomSource()


# ========== KEYS ==========

@dataclass(frozen=True)
class PublicKey:
    point: bytes

    def to_bytes(self) -> bytes:
        return bytes([RECORD_VERSION, RecordTag.PUBLIC_KEY]) + self.point

    @classmethod
    def from_bytes(cls, data: bytes) -> 'PublicKey':
        if len(data) != 2 + POINT_SIZE or data[0] != RECORD_VERSION or data[1] != RecordTag.PUBLIC_KEY:
            raise InvalidKey("not a version-1 public key record")
        point = data[2:]
        if not _is_point(point):
            raise InvalidKey("public key is not a valid group element")
        return cls(point)

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> 'PublicKey':
        try:
            return cls.from_bytes(bytes.fromhex(text.strip()))
        except ValueError as e:
            raise InvalidKey(f"public key is not hex: {e}") from e

    def digest(self) -> str:
        """Stable identity of the key holder (owner / node id)"""
        return sha256_hex(self.point)


@dataclass(frozen=True)
class PrivateKey:
    scalar: bytes

    def __repr__(self) -> str:
        return "PrivateKey(<redacted>)"

    def public_key(self) -> PublicKey:
        return PublicKey(_base(self.scalar))

    def to_bytes(self) -> bytes:
        return bytes([RECORD_VERSION, RecordTag.PRIVATE_KEY]) + self.scalar

    @classmethod
    def from_bytes(cls, data: bytes) -> 'PrivateKey':
        if len(data) != 2 + SCALAR_SIZE or data[0] != RECORD_VERSION or data[1] != RecordTag.PRIVATE_KEY:
            raise InvalidKey("not a version-1 private key record")
        if not _is_scalar(data[2:]):
            raise InvalidKey("private key is not a canonical non-zero scalar")
        return cls(data[2:])


@dataclass(frozen=True)
class KeyPair:
    private: PrivateKey
    public: PublicKey


def keygen(seed: Optional[Seed] = None) -> KeyPair:
    """Generate a key pair; a seed makes the result deterministic"""
    if seed is None:
        scalar = _default_source.scalar()
    else:
        scalar = _hash_to_scalar(b"keygen", _normalize_seed(seed))
    private = PrivateKey(scalar)
    return KeyPair(private=private, public=private.public_key())


# ========== CAPSULES ==========

@dataclass(frozen=True)
class Capsule:
    """
    Encapsulation of a content key

    Original capsules carry (E, V, s) with s a proof-of-well-formedness
    scalar; re-encrypted capsules carry (E', V', X) with X the rekey
    precursor point.
    """
    flag: CapsuleFlag
    e: bytes
    v: bytes
    tail: bytes

    def to_bytes(self) -> bytes:
        return bytes([RECORD_VERSION, self.flag]) + self.e + self.v + self.tail

    @classmethod
    def from_bytes(cls, data: bytes) -> 'Capsule':
        if len(data) != CAPSULE_SIZE:
            raise InvalidCapsule(f"capsule must be {CAPSULE_SIZE} bytes, got {len(data)}")
        if data[0] != RECORD_VERSION:
            raise InvalidCapsule(f"unsupported capsule version {data[0]}")
        try:
            flag = CapsuleFlag(data[1])
        except ValueError as e:
            raise InvalidCapsule(f"unknown capsule flag {data[1]}") from e
        e_point = data[2:2 + POINT_SIZE]
        v_point = data[2 + POINT_SIZE:2 + 2 * POINT_SIZE]
        tail = data[2 + 2 * POINT_SIZE:]
        if not (_is_point(e_point) and _is_point(v_point)):
            raise InvalidCapsule("capsule elements are not valid group points")
        if flag is CapsuleFlag.ORIGINAL and not _is_scalar(tail):
            raise InvalidCapsule("capsule signature scalar is not canonical")
        if flag is CapsuleFlag.REENCRYPTED and not _is_point(tail):
            raise InvalidCapsule("capsule precursor is not a valid group point")
        return cls(flag=flag, e=e_point, v=v_point, tail=tail)

    def is_valid(self) -> bool:
        if self.flag is CapsuleFlag.REENCRYPTED:
            return True
        h = _hash_to_scalar(b"capsule", self.e, self.v)
        try:
            return _base(self.tail) == _add(self.v, _mul(h, self.e))
        except InvalidCapsule:
            return False


@dataclass(frozen=True)
class ReencryptionKey:
    scalar: bytes
    precursor: bytes
    delegator: bytes
    receiver: bytes

    def __repr__(self) -> str:
        return f"ReencryptionKey(delegator={self.delegator.hex()[:12]}, receiver={self.receiver.hex()[:12]})"

    def to_bytes(self) -> bytes:
        return (bytes([RECORD_VERSION, RecordTag.REENCRYPTION_KEY])
                + self.scalar + self.precursor + self.delegator + self.receiver)

    @classmethod
    def from_bytes(cls, data: bytes) -> 'ReencryptionKey':
        if len(data) != 2 + 4 * POINT_SIZE or data[0] != RECORD_VERSION or data[1] != RecordTag.REENCRYPTION_KEY:
            raise InvalidKey("not a version-1 re-encryption key record")
        parts = [data[2 + i * POINT_SIZE:2 + (i + 1) * POINT_SIZE] for i in range(4)]
        if not _is_scalar(parts[0]) or not all(_is_point(p) for p in parts[1:]):
            raise InvalidKey("re-encryption key has invalid elements")
        return cls(*parts)


def _dem_key(shared_point: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=b"mtfs/dem"
    ).derive(shared_point)


def _open(shared_point: bytes, ciphertext: bytes) -> bytes:
    try:
        return ChaCha20Poly1305(_dem_key(shared_point)).decrypt(_AEAD_NONCE, ciphertext, None)
    except InvalidTag as e:
        raise WrongKey("authentication failed: wrong key or capsule") from e


# ========== OPERATIONS ==========

def encrypt(public_key: PublicKey, plaintext: bytes,
            rng: Optional[RandomSource] = None) -> Tuple[bytes, Capsule]:
    """Encrypt under a public key; returns (ciphertext, capsule)"""
    rng = rng or _default_source
    r = rng.scalar()
    u = rng.scalar()
    e_point = _base(r)
    v_point = _base(u)
    h = _hash_to_scalar(b"capsule", e_point, v_point)
    s = sodium.crypto_core_ed25519_scalar_add(u, sodium.crypto_core_ed25519_scalar_mul(r, h))
    shared = _mul(sodium.crypto_core_ed25519_scalar_add(r, u), public_key.point)
    ciphertext = ChaCha20Poly1305(_dem_key(shared)).encrypt(_AEAD_NONCE, bytes(plaintext), None)
    return ciphertext, Capsule(flag=CapsuleFlag.ORIGINAL, e=e_point, v=v_point, tail=s)


def decrypt_own(private_key: PrivateKey, capsule: Capsule, ciphertext: bytes) -> bytes:
    if capsule.flag is not CapsuleFlag.ORIGINAL:
        raise CapsuleMismatch("re-encrypted capsules are opened with decrypt_shared")
    if not capsule.is_valid():
        raise InvalidCapsule("capsule failed its well-formedness check")
    shared = _mul(private_key.scalar, _add(capsule.e, capsule.v))
    return _open(shared, ciphertext)


def rekey(sender_private: PrivateKey, receiver_public: PublicKey,
          rng: Optional[RandomSource] = None) -> ReencryptionKey:
    rng = rng or _default_source
    x = rng.scalar()
    precursor = _base(x)
    d = _hash_to_scalar(b"rekey", precursor, receiver_public.point, _mul(x, receiver_public.point))
    scalar = sodium.crypto_core_ed25519_scalar_mul(
        sender_private.scalar, sodium.crypto_core_ed25519_scalar_invert(d)
    )
    return ReencryptionKey(
        scalar=scalar,
        precursor=precursor,
        delegator=sender_private.public_key().point,
        receiver=receiver_public.point,
    )


def reencrypt(rk: ReencryptionKey, capsule: Capsule) -> Capsule:
    """Re-target a capsule to the receiver bound in rk; no ciphertext involved"""
    if capsule.flag is CapsuleFlag.REENCRYPTED:
        raise AlreadyReencrypted("capsules can be re-encrypted only once")
    if not capsule.is_valid():
        raise InvalidCapsule("capsule failed its well-formedness check")
    return Capsule(
        flag=CapsuleFlag.REENCRYPTED,
        e=_mul(rk.scalar, capsule.e),
        v=_mul(rk.scalar, capsule.v),
        tail=rk.precursor,
    )


def decrypt_shared(receiver_private: PrivateKey, capsule: Capsule, ciphertext: bytes) -> bytes:
    if capsule.flag is not CapsuleFlag.REENCRYPTED:
        raise CapsuleMismatch("original capsules are opened with decrypt_own")
    receiver_point = receiver_private.public_key().point
    d = _hash_to_scalar(b"rekey", capsule.tail, receiver_point, _mul(receiver_private.scalar, capsule.tail))
    shared = _mul(d, _add(capsule.e, capsule.v))
    return _open(shared, ciphertext)


def decrypt(private_key: PrivateKey, capsule: Capsule, ciphertext: bytes) -> bytes:
    """Dispatch on the capsule flag"""
    if capsule.flag is CapsuleFlag.REENCRYPTED:
        return decrypt_shared(private_key, capsule, ciphertext)
    return decrypt_own(private_key, capsule, ciphertext)


# ========== SIGNATURES ==========

def sign(private_key: PrivateKey, message: bytes) -> bytes:
    """Deterministic Schnorr signature over the same group as the keys"""
    public_point = private_key.public_key().point
    k = _hash_to_scalar(b"sign-nonce", private_key.scalar, message)
    r_point = _base(k)
    e = _hash_to_scalar(b"sign", r_point, public_point, message)
    s = sodium.crypto_core_ed25519_scalar_add(k, sodium.crypto_core_ed25519_scalar_mul(e, private_key.scalar))
    return r_point + s


def verify_signature(public_key: PublicKey, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_SIZE:
        return False
    r_point, s = signature[:POINT_SIZE], signature[POINT_SIZE:]
    if not _is_point(r_point) or not _is_scalar(s):
        return False
    e = _hash_to_scalar(b"sign", r_point, public_key.point, message)
    try:
        return _base(s) == _add(r_point, _mul(e, public_key.point))
    except (InvalidCapsule, SodiumError):
        return False
