"""Quoting and the simulated attestation service (IAS).

Evidence chain checked by :func:`ias_verify`, in order:

    sealed blob   -> decrypts under the IAS private key
    quote         -> signed by the registered quoting key of its node
    report        -> signed by the registered attestation key of that node's enclave
    identity      -> measurement matches, svn >= registry minimum

Each broken link maps to exactly one :class:`Reason`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from fedchain.crypto import (
    SIG_LEN,
    Entropy,
    IasKeyPair,
    SigningKeyPair,
    pk_decrypt,
    pk_encrypt,
    sign,
    verify_sig,
)
from fedchain.enclave import MEASUREMENT, AttestationReport
from fedchain.errors import ContractViolation, DecryptionError, QuoteRefused


class Reason(str, enum.Enum):
    UNDECRYPTABLE = "undecryptable"
    BAD_QUOTE_SIG = "bad-quote-sig"
    BAD_REPORT_SIG = "bad-report-sig"
    UNKNOWN_ENCLAVE = "unknown-enclave"
    STALE_SVN = "stale-svn"
    # collector-level: a verified quote for a different round (replay)
    WRONG_ROUND = "wrong-round"


@dataclass
class Registries:
    """What the IAS and quoting enclaves trust."""

    enclave_keys: dict = field(default_factory=dict)
    quoting_keys: dict = field(default_factory=dict)
    measurement: bytes = MEASUREMENT
    min_svn: int = 1

    def register_node(self, node_id: int, enclave_public: bytes, quoting_public: bytes):
        self.enclave_keys[node_id] = enclave_public
        self.quoting_keys[node_id] = quoting_public


@dataclass(frozen=True)
class Quote:
    report: AttestationReport
    quoting_node: int
    quote_signature: bytes

    def to_bytes(self) -> bytes:
        rb = self.report.to_bytes()
        return (struct.pack("<I", len(rb)) + rb + struct.pack("<I", self.quoting_node)
                + struct.pack("<I", len(self.quote_signature)) + self.quote_signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        try:
            (n,) = struct.unpack_from("<I", data, 0)
            rb = data[4:4 + n]
            if len(rb) != n:
                raise ContractViolation("quote report truncated")
            node, slen = struct.unpack_from("<II", data, 4 + n)
            sig = data[12 + n:]
            if len(sig) != slen:
                raise ContractViolation("quote signature length mismatch")
        except struct.error:
            raise ContractViolation("quote bytes truncated") from None
        return cls(AttestationReport.from_bytes(rb, node), node, sig)


@dataclass(frozen=True)
class EncryptedQuote:
    blob: bytes
    origin: int


@dataclass(frozen=True)
class AttestationVerdict:
    valid: bool
    node: int
    model_hash: bytes | None = None
    reason: Reason | None = None
    round: int | None = None

    def __post_init__(self):
        if self.valid != (self.model_hash is not None) or self.valid == (self.reason is not None):
            raise ContractViolation("valid verdicts carry a hash, invalid ones a reason")


def _report_problem(report: AttestationReport, reg: Registries) -> Reason | None:
    pub = reg.enclave_keys.get(report.enclave.node_id)
    if pub is None:
        return Reason.UNKNOWN_ENCLAVE
    if not report.verify(pub):
        return Reason.BAD_REPORT_SIG
    if report.enclave.measurement != reg.measurement:
        return Reason.UNKNOWN_ENCLAVE
    if report.enclave.svn < reg.min_svn:
        return Reason.STALE_SVN
    return None


def generate_quote(report: AttestationReport, quoting_key: SigningKeyPair,
                   quoting_node: int, registries: Registries) -> Quote:
    """Verify ``report`` against the registry, then counter-sign it."""
    problem = _report_problem(report, registries)
    if problem is not None:
        raise QuoteRefused(problem)
    return Quote(report, quoting_node, sign(report.to_bytes(), quoting_key))


def encrypt_quote(q: Quote, ias_public: bytes, entropy: Entropy | None = None) -> EncryptedQuote:
    blob = pk_encrypt(q.to_bytes(), ias_public) if entropy is None else \
        pk_encrypt(q.to_bytes(), ias_public, entropy)
    return EncryptedQuote(blob, q.quoting_node)


def open_quote(eq: EncryptedQuote, ias_private: bytes) -> Quote:
    return Quote.from_bytes(pk_decrypt(eq.blob, ias_private))


def ias_verify(eq: EncryptedQuote, ias_private: bytes, registries: Registries) -> AttestationVerdict:
    node = eq.origin

    def bad(reason):
        return AttestationVerdict(False, node, reason=reason)

    try:
        raw = pk_decrypt(eq.blob, ias_private)
    except DecryptionError:
        return bad(Reason.UNDECRYPTABLE)
    try:
        q = Quote.from_bytes(raw)
    except ContractViolation:
        return bad(Reason.BAD_QUOTE_SIG)
    qpub = registries.quoting_keys.get(q.quoting_node)
    if (qpub is None or q.quoting_node != node or len(q.quote_signature) != SIG_LEN
            or not verify_sig(q.report.to_bytes(), q.quote_signature, qpub)):
        return bad(Reason.BAD_QUOTE_SIG)
    problem = _report_problem(q.report, registries)
    if problem is not None:
        return bad(problem)
    return AttestationVerdict(True, node, model_hash=q.report.model_hash, round=q.report.round)


class IasService:
    """Synchronous attestation oracle; read-only after setup."""

    def __init__(self, keys: IasKeyPair, registries: Registries):
        self._keys = keys
        self.registries = registries

    @property
    def public(self) -> bytes:
        return self._keys.public

    def verify(self, eq: EncryptedQuote) -> AttestationVerdict:
        return ias_verify(eq, self._keys.private, self.registries)


def collect_quotes(round_: int, submissions: dict, ias: IasService,
                   nodes) -> dict:
    """Verdict per node for this round; ``None`` marks a node that sent nothing."""
    out = {}
    for node in sorted(nodes):
        eq = submissions.get(node)
        if eq is None:
            out[node] = None
            continue
        v = ias.verify(eq)
        if v.valid and v.round != round_:
            v = AttestationVerdict(False, node, reason=Reason.WRONG_ROUND)
        out[node] = v
    return out
