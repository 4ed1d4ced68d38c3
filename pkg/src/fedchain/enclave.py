"""Simulated sealed aggregation enclave.

Each blockchain node hosts one :class:`Enclave`. It is the only place where
local models exist in plaintext: ciphertexts go in, a global model and a signed
attestation report come out. Decrypted local models are never logged, returned
or attached to exceptions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedchain.crypto import (
    SIG_LEN,
    Ciphertext,
    SigningKeyPair,
    SymmetricKey,
    decrypt,
    sign,
    verify_sig,
)
from fedchain.errors import (
    AggregationError,
    AuthenticationError,
    ContractViolation,
    ModelFormatError,
)
from fedchain.params import (
    ParameterVector,
    canonical_deserialize,
    digest,
    model_hash,
)

ENCLAVE_CODE_ID = b"fedchain aggregation enclave 1.0"
MEASUREMENT = digest(ENCLAVE_CODE_ID)

_REPORT_BODY = struct.Struct("<Q32s32sI")


@dataclass(frozen=True)
class EnclaveIdentity:
    measurement: bytes
    svn: int
    node_id: int

    def __post_init__(self):
        if len(self.measurement) != 32:
            raise ContractViolation("measurement must be a 32-byte digest")
        if self.svn < 1:
            raise ContractViolation("svn starts at 1")


@dataclass(frozen=True)
class AggregationEntry:
    cluster_id: int
    ciphertext: Ciphertext
    size: int


@dataclass(frozen=True)
class AggregationInput:
    round: int
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ContractViolation("aggregation needs at least one local model")
        ids = [e.cluster_id for e in entries]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ContractViolation("cluster ids must be strictly ascending")
        if any(e.size < 1 for e in entries):
            raise ContractViolation("dataset sizes must be >= 1")


@dataclass(frozen=True)
class AttestationReport:
    round: int
    model_hash: bytes
    enclave: EnclaveIdentity
    signature: bytes

    def payload(self) -> bytes:
        return report_payload(self.round, self.model_hash, self.enclave)

    def to_bytes(self) -> bytes:
        return self.payload() + struct.pack("<I", len(self.signature)) + self.signature

    @classmethod
    def from_bytes(cls, data: bytes, node_id: int) -> "AttestationReport":
        """Parse the wire form. ``node_id`` comes from the carrying quote."""
        head = _REPORT_BODY.size
        if len(data) < head + 4:
            raise ContractViolation("report bytes truncated")
        rnd, mh, meas, svn = _REPORT_BODY.unpack_from(data)
        (n,) = struct.unpack_from("<I", data, head)
        if len(data) != head + 4 + n:
            raise ContractViolation("report signature length mismatch")
        if svn < 1:
            raise ContractViolation("report svn must be >= 1")
        return cls(rnd, mh, EnclaveIdentity(meas, svn, node_id), data[head + 4:])

    def verify(self, public: bytes) -> bool:
        if len(self.signature) != SIG_LEN:
            return False
        return verify_sig(self.payload(), self.signature, public)


@dataclass(frozen=True)
class AggregationOutcome:
    global_model: ParameterVector
    report: AttestationReport


def report_payload(round_: int, mhash: bytes, identity: EnclaveIdentity) -> bytes:
    return _REPORT_BODY.pack(round_, mhash, identity.measurement, identity.svn)


def fedavg(models: list[ParameterVector], sizes: list[int]) -> ParameterVector:
    """Dataset-size weighted average of ``models``.

    Accumulates ``sizes[i] / N * models[i]`` linearly for ``i = 0..p-1``.
    The order is part of the contract: honest nodes compare hashes of the
    resulting float bytes, so callers pass models in ascending cluster order.
    """
    if not models or len(models) != len(sizes):
        raise ContractViolation("need one size per model and at least one model")
    n_vals = len(models[0])
    spec = models[0].spec_digest
    for m in models:
        if len(m) != n_vals:
            raise ContractViolation("models have different lengths")
        if m.spec_digest != spec:
            raise ContractViolation("models belong to different ModelSpecs")
    if any(int(s) != s or s < 1 for s in sizes):
        raise ContractViolation("sizes must be positive integers")
    total = sum(int(s) for s in sizes)
    out = (int(sizes[0]) / total) * models[0].values
    for m, s in zip(models[1:], sizes[1:]):
        out = out + (int(s) / total) * m.values
    return ParameterVector(spec, out)


def make_report(model: ParameterVector, round_: int, identity: EnclaveIdentity,
                att_key: SigningKeyPair) -> AttestationReport:
    mhash = model_hash(model)
    sig = sign(report_payload(round_, mhash, identity), att_key)
    return AttestationReport(round_, mhash, identity, sig)


def enclave_aggregate(inp: AggregationInput, keys: dict[int, SymmetricKey],
                      att_key: SigningKeyPair, identity: EnclaveIdentity,
                      expected_spec: bytes | None = None) -> AggregationOutcome:
    """Decrypt every local model, FedAvg them and sign a report over the result.

    Aborts on the first undecryptable or malformed input; no report is
    produced for a round that aborts.
    """
    models, sizes = [], []
    for entry in inp.entries:
        cid = entry.cluster_id
        key = keys.get(cid)
        if key is None:
            raise AggregationError(f"no session key for cluster {cid}", cid)
        try:
            plain = decrypt(entry.ciphertext, key)
        except AuthenticationError:
            raise AggregationError(f"authentication failed for cluster {cid}", cid) from None
        try:
            model = canonical_deserialize(plain)
        except ModelFormatError:
            raise AggregationError(f"malformed model from cluster {cid}", cid) from None
        finally:
            del plain
        spec = expected_spec if expected_spec is not None else (
            models[0].spec_digest if models else model.spec_digest)
        if model.spec_digest != spec or (models and len(model) != len(models[0])):
            raise AggregationError(f"model spec mismatch from cluster {cid}", cid)
        models.append(model)
        sizes.append(entry.size)
    glob = fedavg(models, sizes)
    models.clear()
    return AggregationOutcome(glob, make_report(glob, inp.round, identity, att_key))


class Enclave:
    """Per-node enclave state: identity, attestation key and per-cluster keys."""

    def __init__(self, identity: EnclaveIdentity, att_key: SigningKeyPair,
                 expected_spec: bytes | None = None):
        self.identity = identity
        self._att_key = att_key
        self._keys: dict[int, SymmetricKey] = {}
        self.expected_spec = expected_spec

    @property
    def attestation_public(self) -> bytes:
        return self._att_key.public

    def install_key(self, cluster_id: int, key: SymmetricKey) -> None:
        self._keys[cluster_id] = key

    def aggregate(self, inp: AggregationInput) -> AggregationOutcome:
        return enclave_aggregate(inp, self._keys, self._att_key, self.identity,
                                 self.expected_spec)

    def resign(self, model: ParameterVector, round_: int) -> AttestationReport:
        """Report over an arbitrary model; used only by fault hooks."""
        return make_report(model, round_, self.identity, self._att_key)


def perturb(model: ParameterVector, coord: int = 0, delta: float = 1.0) -> ParameterVector:
    vals = model.values.copy()
    vals[coord] += delta
    return ParameterVector(model.spec_digest, np.asarray(vals))
