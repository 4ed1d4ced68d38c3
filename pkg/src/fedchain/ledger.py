"""Hash-chained storage of global models and hash-majority consensus.

Block record layout (all integers little-endian)::

    height u64 | round u64 | prev_hash 32 | logical_time u64 | model_hash 32
    | body_digest 32 | header_hash 32 | body_len u64 | body

    body = model_len u64 | canonical model bytes | quote_count u32
           | (quote_len u32 | quote bytes)*

Chain dump::

    b"FCTC" | version u32 | block_count u64 | (record_len u64 | record)*
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from fedchain.attestation import Quote
from fedchain.crypto import SUITE_VERSION
from fedchain.errors import (
    AppendRefused,
    ChainFormatError,
    ContractViolation,
    IntegrityError,
    ModelFormatError,
    NotFoundError,
)
from fedchain.params import ParameterVector, canonical_deserialize, canonical_serialize, digest

CHAIN_MAGIC = b"FCTC"
FORMAT_VERSION = 1
CHAIN_VERSION = (FORMAT_VERSION << 16) | SUITE_VERSION
ZERO_HASH = bytes(32)

_HEADER = struct.Struct("<QQ32sQ32s32s")
_DUMP_HEAD = struct.Struct("<4sIQ")

CAUSES = ("body", "model-hash", "header", "link")


def encode_body(model_bytes: bytes, quotes) -> bytes:
    parts = [struct.pack("<Q", len(model_bytes)), model_bytes, struct.pack("<I", len(quotes))]
    for q in quotes:
        parts += [struct.pack("<I", len(q)), q]
    return b"".join(parts)


def decode_body(body: bytes) -> tuple[bytes, list[bytes]]:
    try:
        (n,) = struct.unpack_from("<Q", body, 0)
        model = body[8:8 + n]
        if len(model) != n:
            raise ValueError("model truncated")
        pos = 8 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        quotes = []
        for _ in range(count):
            (qn,) = struct.unpack_from("<I", body, pos)
            q = body[pos + 4:pos + 4 + qn]
            if len(q) != qn:
                raise ValueError("quote truncated")
            quotes.append(q)
            pos += 4 + qn
        if pos != len(body):
            raise ValueError("trailing bytes in body")
    except (struct.error, ValueError) as exc:
        raise ContractViolation(f"malformed block body: {exc}") from None
    return model, quotes


@dataclass(frozen=True)
class Block:
    height: int
    round: int
    prev_hash: bytes
    logical_time: int
    model_hash: bytes
    body_digest: bytes
    body: bytes
    header_hash: bytes

    def header_bytes(self) -> bytes:
        return _HEADER.pack(self.height, self.round, self.prev_hash, self.logical_time,
                            self.model_hash, self.body_digest)

    def to_bytes(self) -> bytes:
        return (self.header_bytes() + self.header_hash
                + struct.pack("<Q", len(self.body)) + self.body)

    @classmethod
    def from_bytes(cls, data: bytes, index: int) -> "Block":
        try:
            fields = _HEADER.unpack_from(data, 0)
            pos = _HEADER.size
            header_hash = data[pos:pos + 32]
            (blen,) = struct.unpack_from("<Q", data, pos + 32)
        except struct.error:
            raise ChainFormatError(f"block {index}: truncated header", index) from None
        body = data[pos + 40:]
        if len(header_hash) != 32 or len(body) != blen:
            raise ChainFormatError(f"block {index}: body length mismatch", index)
        return cls(*fields, body=body, header_hash=header_hash)

    @property
    def model_bytes(self) -> bytes:
        return decode_body(self.body)[0]

    @property
    def quotes(self) -> list[bytes]:
        return decode_body(self.body)[1]


def build_block(height: int, round_: int, prev_hash: bytes, logical_time: int,
                model_bytes: bytes, quotes=()) -> Block:
    body = encode_body(model_bytes, list(quotes))
    proto = Block(height, round_, prev_hash, logical_time, digest(model_bytes),
                  digest(body), body, b"")
    return replace(proto, header_hash=digest(proto.header_bytes()))


class Chain:
    """Ordered blocks owned by one node. Only :func:`append_block` grows it."""

    def __init__(self, blocks=()):
        self.blocks: list[Block] = list(blocks)

    @classmethod
    def genesis(cls, model: ParameterVector) -> "Chain":
        return cls([build_block(0, 0, ZERO_HASH, 0, canonical_serialize(model))])

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def snapshot(self) -> tuple:
        return tuple(self.blocks)

    def to_bytes(self) -> bytes:
        parts = [_DUMP_HEAD.pack(CHAIN_MAGIC, CHAIN_VERSION, len(self.blocks))]
        for b in self.blocks:
            rec = b.to_bytes()
            parts += [struct.pack("<Q", len(rec)), rec]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        if len(data) < _DUMP_HEAD.size:
            raise ChainFormatError("chain dump shorter than its header")
        magic, version, count = _DUMP_HEAD.unpack_from(data)
        if magic != CHAIN_MAGIC:
            raise ChainFormatError(f"bad chain magic {magic!r}")
        if version != CHAIN_VERSION:
            raise ChainFormatError(f"unsupported chain version {version:#x}")
        pos, blocks = _DUMP_HEAD.size, []
        for i in range(count):
            if pos + 8 > len(data):
                raise ChainFormatError(f"block {i}: missing record", i)
            (n,) = struct.unpack_from("<Q", data, pos)
            rec = data[pos + 8:pos + 8 + n]
            if len(rec) != n:
                raise ChainFormatError(f"block {i}: record truncated", i)
            blocks.append(Block.from_bytes(rec, i))
            pos += 8 + n
        if pos != len(data):
            raise ChainFormatError("trailing bytes after last block", count)
        return cls(blocks)


def dump_chain(chain: Chain, path) -> None:
    Path(path).write_bytes(chain.to_bytes())


def load_chain(path) -> Chain:
    return Chain.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    height: int | None = None
    cause: str | None = None

    def __bool__(self):
        return self.ok


def verify_chain(chain: Chain) -> ChainCheck:
    """Recompute every digest and link; report the first violation."""
    prev = ZERO_HASH
    for i, b in enumerate(chain.blocks):
        if digest(b.body) != b.body_digest:
            return ChainCheck(False, i, "body")
        try:
            model_bytes, _ = decode_body(b.body)
            canonical_deserialize(model_bytes)
        except (ContractViolation, ModelFormatError):
            return ChainCheck(False, i, "body")
        if digest(model_bytes) != b.model_hash:
            return ChainCheck(False, i, "model-hash")
        if digest(b.header_bytes()) != b.header_hash:
            return ChainCheck(False, i, "header")
        if b.height != i or b.prev_hash != prev:
            return ChainCheck(False, i, "link")
        prev = b.header_hash
    return ChainCheck(True)


def get_latest_model(chain: Chain) -> tuple[ParameterVector, Block]:
    """Model from the tip, released only after the whole chain verifies."""
    if len(chain) < 2:
        raise NotFoundError("chain holds no committed global model")
    check = verify_chain(chain)
    if not check:
        raise IntegrityError(check.height, check.cause)
    tip = chain.tip
    model = canonical_deserialize(tip.model_bytes)
    return model, tip


# consensus --------------------------------------------------------------------

@dataclass(frozen=True)
class Decision:
    committed: bool
    hash: bytes | None = None
    reason: str | None = None


@dataclass
class ConsensusState:
    round: int
    verdicts: dict
    tally: dict = field(default_factory=dict)
    decision: Decision = field(default_factory=lambda: Decision(False, reason="pending"))
    exclusions: dict = field(default_factory=dict)
    model_bytes: bytes | None = None
    quotes: list = field(default_factory=list)

    def tally_hex(self) -> dict:
        return {h.hex(): c for h, c in sorted(self.tally.items())}


def consensus_round(verdicts: dict, proposals: dict, n: int, round_: int = 0) -> ConsensusState:
    """Strict hash-majority over attested proposals.

    Only valid verdicts whose proposal bytes (and accompanying quote) hash to
    the attested value are counted. The most frequent hash wins, ties going to
    the lexicographically smallest; it commits only if its count exceeds n/2.
    """
    if n < 1:
        raise ContractViolation("consensus needs n >= 1")
    state = ConsensusState(round_, dict(verdicts))
    counts = Counter()
    members: dict[bytes, list[int]] = {}
    for node in sorted(verdicts):
        v = verdicts[node]
        if v is None:
            state.exclusions[node] = "absent"
            continue
        if not v.valid:
            state.exclusions[node] = v.reason.value
            continue
        prop = proposals.get(node)
        if prop is None:
            state.exclusions[node] = "missing-proposal"
            continue
        model_bytes, quotes = prop
        if digest(model_bytes) != v.model_hash or not _quotes_bind(quotes, v.model_hash):
            state.exclusions[node] = "proposal-mismatch"
            continue
        counts[v.model_hash] += 1
        members.setdefault(v.model_hash, []).append(node)
    state.tally = dict(counts)
    if not counts:
        state.decision = Decision(False, reason="no-valid-proposals")
        return state
    best, count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if 2 * count <= n:
        state.decision = Decision(False, reason="no-majority")
        return state
    state.decision = Decision(True, hash=best)
    group = members[best]
    state.model_bytes = proposals[group[0]][0]
    state.quotes = [q for node in group for q in proposals[node][1]]
    return state


def _quotes_bind(quotes, mhash: bytes) -> bool:
    try:
        return all(Quote.from_bytes(q).report.model_hash == mhash for q in quotes)
    except ContractViolation:
        return False


def append_block(chain: Chain, round_: int, logical_time: int, model_bytes: bytes,
                 quotes, committed_hash: bytes) -> Block:
    if committed_hash is None:
        raise AppendRefused("round did not commit")
    if digest(model_bytes) != committed_hash:
        raise AppendRefused("model bytes do not hash to the committed value")
    try:
        canonical_deserialize(model_bytes)
    except ModelFormatError as exc:
        raise AppendRefused(f"committed bytes are not a model: {exc}") from None
    tip = chain.tip
    block = build_block(tip.height + 1, round_, tip.header_hash, logical_time,
                        model_bytes, quotes)
    chain.blocks.append(block)
    return block
