import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedchain.attestation import (
    AttestationVerdict,
    EncryptedQuote,
    IasService,
    Quote,
    Reason,
    Registries,
    collect_quotes,
    encrypt_quote,
    generate_quote,
    ias_verify,
    open_quote,
)
from fedchain.crypto import Entropy, IasKeyPair, SigningKeyPair, sign
from fedchain.enclave import MEASUREMENT, EnclaveIdentity, make_report
from fedchain.errors import ContractViolation, DecryptionError, QuoteRefused
from fedchain.params import ParameterVector

MODEL = ParameterVector(bytes(32), [0.5, -0.5, 2.0])
OTHER = ParameterVector(bytes(32), [0.5, -0.5, 2.5])


class World:
    def __init__(self, n=3, min_svn=1, seed=0):
        e = Entropy(seed, "attestation-tests")
        self.entropy = e
        self.reg = Registries(min_svn=min_svn)
        self.att, self.qk = {}, {}
        for j in range(n):
            self.att[j] = SigningKeyPair.generate(f"enclave-{j}", e.child(f"att{j}"))
            self.qk[j] = SigningKeyPair.generate(f"quoting-{j}", e.child(f"q{j}"))
            self.reg.register_node(j, self.att[j].public, self.qk[j].public)
        self.ias_keys = IasKeyPair.generate(e.child("ias"))
        self.ias = IasService(self.ias_keys, self.reg)

    def report(self, j, model=MODEL, round_=1, svn=1, measurement=MEASUREMENT, key=None):
        ident = EnclaveIdentity(measurement, svn, j)
        return make_report(model, round_, ident, key or self.att[j])

    def quote(self, j, **kw):
        return generate_quote(self.report(j, **kw), self.qk[j], j, self.reg)

    def sealed(self, q, label="seal"):
        return encrypt_quote(q, self.ias.public, self.entropy.child(label))


@pytest.fixture
def world():
    return World()


# quoting enclave -------------------------------------------------------------------

def test_honest_report_is_quoted(world):
    q = world.quote(0)
    assert q.quoting_node == 0
    assert q.report.model_hash == make_report(MODEL, 1, EnclaveIdentity(MEASUREMENT, 1, 0),
                                              world.att[0]).model_hash


def test_altered_report_is_refused(world):
    rep = world.report(0)
    forged = type(rep)(rep.round, bytes(32), rep.enclave, rep.signature)
    with pytest.raises(QuoteRefused) as info:
        generate_quote(forged, world.qk[0], 0, world.reg)
    assert info.value.reason == Reason.BAD_REPORT_SIG


def test_unregistered_enclave_key_is_refused(world):
    rogue = SigningKeyPair.generate("rogue", world.entropy.child("rogue"))
    with pytest.raises(QuoteRefused) as info:
        generate_quote(world.report(0, key=rogue), world.qk[0], 0, world.reg)
    assert info.value.reason == Reason.BAD_REPORT_SIG
    with pytest.raises(QuoteRefused) as info:
        generate_quote(world.report(9, key=rogue), world.qk[0], 0, world.reg)
    assert info.value.reason == Reason.UNKNOWN_ENCLAVE


def test_quote_wire_roundtrip(world):
    q = world.quote(1)
    wire = q.to_bytes()
    (n,) = struct.unpack_from("<I", wire)
    assert wire[4:4 + n] == q.report.to_bytes()
    assert struct.unpack_from("<II", wire, 4 + n) == (1, 64)
    assert Quote.from_bytes(wire) == q
    for cut in (2, 10, len(wire) - 1):
        with pytest.raises(ContractViolation):
            Quote.from_bytes(wire[:cut])


# encryption to the IAS -------------------------------------------------------------

def test_encrypted_quote_roundtrip(world):
    q = world.quote(0)
    a, b = world.sealed(q, "a"), world.sealed(q, "b")
    assert a.blob != b.blob
    assert open_quote(a, world.ias_keys.private) == q
    with pytest.raises(DecryptionError):
        open_quote(EncryptedQuote(a.blob[:-3], 0), world.ias_keys.private)


# IAS ------------------------------------------------------------------------------

def test_valid_quote_yields_hash(world):
    v = world.ias.verify(world.sealed(world.quote(2, round_=4)))
    assert v == AttestationVerdict(True, 2, model_hash=world.quote(2).report.model_hash, round=4)


def test_resigned_under_unregistered_quoting_key(world):
    rogue = SigningKeyPair.generate("rogue-q", world.entropy.child("rq"))
    rep = world.report(0)
    q = Quote(rep, 0, sign(rep.to_bytes(), rogue))
    assert world.ias.verify(world.sealed(q)).reason == Reason.BAD_QUOTE_SIG


def test_stale_svn():
    w = World(min_svn=2)
    rep = w.report(0, svn=1)
    q = Quote(rep, 0, sign(rep.to_bytes(), w.qk[0]))
    assert w.ias.verify(w.sealed(q)).reason == Reason.STALE_SVN


def test_wrong_measurement(world):
    rep = world.report(0, measurement=bytes(32))
    q = Quote(rep, 0, sign(rep.to_bytes(), world.qk[0]))
    assert world.ias.verify(world.sealed(q)).reason == Reason.UNKNOWN_ENCLAVE


def test_quote_claiming_another_origin(world):
    eq = world.sealed(world.quote(0))
    v = world.ias.verify(EncryptedQuote(eq.blob, 1))
    assert not v.valid and v.reason == Reason.BAD_QUOTE_SIG and v.node == 1


def test_sealed_to_wrong_key(world):
    other = IasKeyPair.generate(world.entropy.child("other-ias"))
    eq = encrypt_quote(world.quote(0), other.public, world.entropy.child("s"))
    assert world.ias.verify(eq).reason == Reason.UNDECRYPTABLE


MUTATIONS = {
    "blob-byte": Reason.UNDECRYPTABLE,
    "quote-sig": Reason.BAD_QUOTE_SIG,
    "report-hash": Reason.BAD_REPORT_SIG,
    "report-sig": Reason.BAD_REPORT_SIG,
    "svn": Reason.STALE_SVN,
    "measurement": Reason.UNKNOWN_ENCLAVE,
}


def mutated(world, kind, pos):
    """A sealed quote with exactly one link of the evidence chain broken."""
    rep = world.report(0)
    if kind == "blob-byte":
        eq = world.sealed(world.quote(0))
        blob = bytearray(eq.blob)
        blob[pos % len(blob)] ^= 1 << (pos % 8)
        return EncryptedQuote(bytes(blob), 0)
    if kind == "quote-sig":
        sig = bytearray(sign(rep.to_bytes(), world.qk[0]))
        sig[pos % 64] ^= 1 << (pos % 8)
        return world.sealed(Quote(rep, 0, bytes(sig)))
    if kind == "report-hash":
        h = bytearray(rep.model_hash)
        h[pos % 32] ^= 1 << (pos % 8)
        rep = type(rep)(rep.round, bytes(h), rep.enclave, rep.signature)
    elif kind == "report-sig":
        s = bytearray(rep.signature)
        s[pos % 64] ^= 1 << (pos % 8)
        rep = type(rep)(rep.round, rep.model_hash, rep.enclave, bytes(s))
    elif kind == "svn":
        world.reg.min_svn = 2 + pos % 5
    elif kind == "measurement":
        rep = world.report(0, measurement=bytes([pos % 256]) * 32)
    return world.sealed(Quote(rep, 0, sign(rep.to_bytes(), world.qk[0])))


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(sorted(MUTATIONS)), pos=st.integers(0, 10_000))
def test_each_mutation_maps_to_its_reason(kind, pos):
    w = World()
    v = w.ias.verify(mutated(w, kind, pos))
    assert not v.valid
    assert v.reason == MUTATIONS[kind]
    assert v.model_hash is None


def test_verification_is_pure(world):
    eq = world.sealed(world.quote(0))
    assert ias_verify(eq, world.ias_keys.private, world.reg) == world.ias.verify(eq)
    assert world.ias.verify(eq) == world.ias.verify(eq)


def test_verdict_invariant():
    with pytest.raises(ContractViolation):
        AttestationVerdict(True, 0)
    with pytest.raises(ContractViolation):
        AttestationVerdict(False, 0, model_hash=bytes(32), reason=Reason.STALE_SVN)


# collection -------------------------------------------------------------------------

def test_collect_honest_round():
    w = World(n=4)
    subs = {j: w.sealed(w.quote(j, round_=3), f"s{j}") for j in range(4)}
    out = collect_quotes(3, subs, w.ias, range(4))
    assert all(v.valid for v in out.values())
    assert len({v.model_hash for v in out.values()}) == 1


def test_collect_marks_absent_and_divergent():
    w = World(n=4)
    subs = {j: w.sealed(w.quote(j, round_=3), f"s{j}") for j in (0, 1)}
    subs[3] = w.sealed(w.quote(3, model=OTHER, round_=3), "s3")
    out = collect_quotes(3, subs, w.ias, range(4))
    assert out[2] is None
    assert out[3].valid and out[3].model_hash != out[0].model_hash
    assert sum(v is not None and v.valid for v in out.values()) == 3


def test_collect_rejects_replayed_round():
    w = World(n=2)
    subs = {0: w.sealed(w.quote(0, round_=2)), 1: w.sealed(w.quote(1, round_=3), "b")}
    out = collect_quotes(3, subs, w.ias, range(2))
    assert out[0].reason == Reason.WRONG_ROUND
    assert out[1].valid
