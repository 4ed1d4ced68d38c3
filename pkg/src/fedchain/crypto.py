"""Cryptographic primitives consumed by the enclave, attestation and ledger code.

Algorithm choices are fixed (one per role) so that every node hashes and
verifies identically:

* symmetric AEAD     AES-256-GCM, 12-byte counter nonce, 16-byte tag
* key agreement      X25519 + HKDF-SHA256 bound to the full transcript
* signatures         Ed25519 (deterministic)
* public-key enc.    ephemeral X25519 -> HKDF-SHA256 -> AES-256-GCM

All randomness comes from an :class:`Entropy` source. Simulations pass a
seeded one so whole runs are reproducible; the default draws from the OS.
"""

from __future__ import annotations

import hashlib
import itertools
import secrets
import struct
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from fedchain.errors import (
    AuthenticationError,
    ContractViolation,
    DecryptionError,
    KeyAgreementError,
    NonceReuseError,
    SignatureFormatError,
)

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
SIG_LEN = 64
PUB_LEN = 32

# bumped whenever any primitive above changes; recorded in chain dumps
SUITE_VERSION = 1

_CT_HEAD = struct.Struct("<I12sQ")


class Entropy:
    """Byte source. ``Entropy(seed, label)`` is a deterministic SHA-256 stream."""

    def __init__(self, seed: int | None = None, label: str = ""):
        self._seed = seed
        self._label = label.encode()
        self._counter = itertools.count()

    def take(self, n: int) -> bytes:
        if self._seed is None:
            return secrets.token_bytes(n)
        out = b""
        while len(out) < n:
            block = struct.pack("<QQ", self._seed & 0xFFFFFFFFFFFFFFFF, next(self._counter))
            out += hashlib.sha256(b"fedchain-entropy\x00" + self._label + b"\x00" + block).digest()
        return out[:n]

    def child(self, label: str) -> "Entropy":
        if self._seed is None:
            return Entropy()
        return Entropy(self._seed, self._label.decode() + "/" + label)


_OS_ENTROPY = Entropy()


def _hkdf(secret: bytes, info: bytes, length: int = KEY_LEN) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(secret)


def _raw_pub(pub) -> bytes:
    return pub.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _raw_priv(priv) -> bytes:
    return priv.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


# symmetric AEAD ---------------------------------------------------------------

@dataclass(eq=False)
class SymmetricKey:
    """A 32-byte AEAD key. The nonce counter is owned by whoever encrypts."""

    key_bytes: bytes
    key_id: int
    _counter: itertools.count = field(default_factory=itertools.count, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if len(self.key_bytes) != KEY_LEN:
            raise ContractViolation("symmetric keys are exactly 32 bytes")
        if not 0 <= self.key_id < 2**32:
            raise ContractViolation("key_id must fit in u32")

    def next_nonce(self) -> bytes:
        with self._lock:
            n = next(self._counter)
        return struct.pack("<IQ", self.key_id, n)


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes
    key_id: int

    def to_bytes(self) -> bytes:
        return _CT_HEAD.pack(self.key_id, self.nonce, len(self.body)) + self.body + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < _CT_HEAD.size + TAG_LEN:
            raise AuthenticationError("ciphertext shorter than header and tag")
        key_id, nonce, n = _CT_HEAD.unpack_from(data)
        if len(data) != _CT_HEAD.size + n + TAG_LEN:
            raise AuthenticationError("ciphertext length field does not match")
        body = data[_CT_HEAD.size:_CT_HEAD.size + n]
        return cls(nonce, body, data[-TAG_LEN:], key_id)


class NonceRegistry:
    """Test-mode audit: raises if a (key_id, nonce) pair is ever seen twice."""

    def __init__(self):
        self._seen = set()
        self._lock = threading.Lock()

    def record(self, key_id: int, nonce: bytes) -> None:
        with self._lock:
            if (key_id, nonce) in self._seen:
                raise NonceReuseError(f"nonce reused under key {key_id}")
            self._seen.add((key_id, nonce))

    def __len__(self):
        return len(self._seen)


def encrypt(payload: bytes, key: SymmetricKey, registry: NonceRegistry | None = None) -> Ciphertext:
    nonce = key.next_nonce()
    if registry is not None:
        registry.record(key.key_id, nonce)
    sealed = AESGCM(key.key_bytes).encrypt(nonce, bytes(payload), struct.pack("<I", key.key_id))
    return Ciphertext(nonce, sealed[:-TAG_LEN], sealed[-TAG_LEN:], key.key_id)


def decrypt(ct: Ciphertext, key: SymmetricKey) -> bytes:
    if ct.key_id != key.key_id:
        raise AuthenticationError(f"ciphertext is for key {ct.key_id}, not {key.key_id}")
    if len(ct.nonce) != NONCE_LEN or len(ct.tag) != TAG_LEN:
        raise AuthenticationError("malformed nonce or tag")
    try:
        return AESGCM(key.key_bytes).decrypt(
            ct.nonce, ct.body + ct.tag, struct.pack("<I", ct.key_id))
    except InvalidTag:
        raise AuthenticationError("authentication tag mismatch") from None


# key agreement ----------------------------------------------------------------

@dataclass(frozen=True)
class Transcript:
    """Public values of one Diffie-Hellman exchange as seen by one party."""

    initiator_id: str
    responder_id: str
    initiator_public: bytes
    responder_public: bytes
    key_id: int

    def to_bytes(self) -> bytes:
        a, b = self.initiator_id.encode(), self.responder_id.encode()
        return (struct.pack("<I", len(a)) + a + struct.pack("<I", len(b)) + b
                + self.initiator_public + self.responder_public
                + struct.pack("<I", self.key_id))


class EphemeralSecret:
    """One party's ephemeral X25519 secret for a single session."""

    def __init__(self, party_id: str, entropy: Entropy = _OS_ENTROPY):
        self.party_id = party_id
        self._priv = X25519PrivateKey.from_private_bytes(entropy.take(32))
        self.public = _raw_pub(self._priv.public_key())

    def exchange(self, peer_public: bytes) -> bytes:
        if len(peer_public) != PUB_LEN:
            raise KeyAgreementError("peer public value must be 32 bytes")
        try:
            return self._priv.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as exc:
            raise KeyAgreementError(str(exc)) from None


def establish_session_key(initiator_id: str, responder_id: str, transcript: Transcript,
                          own: EphemeralSecret) -> SymmetricKey:
    """Derive the session key for ``own``'s side of ``transcript``.

    The transcript must name the same two parties and carry ``own``'s public
    value in ``own``'s slot; otherwise :class:`KeyAgreementError`. A peer value
    altered in transit yields a different key, which surfaces as an
    authentication failure on first use.
    """
    if (transcript.initiator_id, transcript.responder_id) != (initiator_id, responder_id):
        raise KeyAgreementError("transcript names different parties")
    if own.party_id == initiator_id:
        mine, peer = transcript.initiator_public, transcript.responder_public
    elif own.party_id == responder_id:
        mine, peer = transcript.responder_public, transcript.initiator_public
    else:
        raise KeyAgreementError(f"{own.party_id!r} is not a party to this exchange")
    if mine != own.public:
        raise KeyAgreementError("transcript does not carry our own public value")
    shared = own.exchange(peer)
    if shared == bytes(32):
        raise KeyAgreementError("degenerate shared secret")
    info = b"fedchain-session\x00" + transcript.to_bytes()
    return SymmetricKey(_hkdf(shared, info), transcript.key_id)


# signatures -------------------------------------------------------------------

@dataclass(frozen=True)
class SigningKeyPair:
    secret: bytes = field(repr=False)
    public: bytes
    owner: str

    def __post_init__(self):
        if not self.owner:
            raise ContractViolation("signing key owner must be non-empty")
        if len(self.secret) != 32:
            raise SignatureFormatError("Ed25519 secret must be 32 bytes")
        derived = _raw_pub(Ed25519PrivateKey.from_private_bytes(self.secret).public_key())
        if derived != self.public:
            raise ContractViolation("public key does not derive from secret")

    @classmethod
    def generate(cls, owner: str, entropy: Entropy = _OS_ENTROPY) -> "SigningKeyPair":
        seed = entropy.take(32)
        pub = _raw_pub(Ed25519PrivateKey.from_private_bytes(seed).public_key())
        return cls(seed, pub, owner)


def sign(message: bytes, kp: SigningKeyPair) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(kp.secret).sign(bytes(message))


def verify_sig(message: bytes, sig: bytes, public: bytes) -> bool:
    if len(public) != PUB_LEN:
        raise SignatureFormatError("Ed25519 public key must be 32 bytes")
    if len(sig) != SIG_LEN:
        raise SignatureFormatError("Ed25519 signature must be 64 bytes")
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, bytes(message))
    except InvalidSignature:
        return False
    return True


# public-key encryption to the attestation service -------------------------------

@dataclass(frozen=True)
class IasKeyPair:
    private: bytes = field(repr=False)
    public: bytes

    @classmethod
    def generate(cls, entropy: Entropy = _OS_ENTROPY) -> "IasKeyPair":
        priv = X25519PrivateKey.from_private_bytes(entropy.take(32))
        return cls(_raw_priv(priv), _raw_pub(priv.public_key()))


_PK_INFO = b"fedchain-ias-seal"


def pk_encrypt(payload: bytes, public: bytes, entropy: Entropy = _OS_ENTROPY) -> bytes:
    """Seal ``payload`` to ``public``: ``eph_pub(32) || nonce(12) || ct || tag``."""
    eph = X25519PrivateKey.from_private_bytes(entropy.take(32))
    eph_pub = _raw_pub(eph.public_key())
    shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
    key = _hkdf(shared, _PK_INFO + eph_pub + public)
    nonce = entropy.take(NONCE_LEN)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, bytes(payload), eph_pub)


def pk_decrypt(blob: bytes, private: bytes) -> bytes:
    if len(blob) < PUB_LEN + NONCE_LEN + TAG_LEN:
        raise DecryptionError("sealed blob too short")
    eph_pub, nonce, ct = blob[:PUB_LEN], blob[PUB_LEN:PUB_LEN + NONCE_LEN], blob[PUB_LEN + NONCE_LEN:]
    priv = X25519PrivateKey.from_private_bytes(private)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError:
        raise DecryptionError("invalid ephemeral public value") from None
    key = _hkdf(shared, _PK_INFO + eph_pub + _raw_pub(priv.public_key()))
    try:
        return AESGCM(key).decrypt(nonce, ct, eph_pub)
    except InvalidTag:
        raise DecryptionError("sealed blob failed authentication") from None
