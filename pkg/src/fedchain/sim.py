"""Deterministic discrete-event simulation of the full training pipeline.

Actors exchange immutable messages over an :class:`EventBus` that delivers in
``(tick, ordinal)`` order. Every hop costs one tick. One FL round occupies a
fixed window of ticks starting at ``T``::

    T    edges train locally, encrypt per node, send      -> nodes   (T+1)
    T+2  nodes aggregate in their enclave, quote, broadcast -> nodes (T+3)
    T+4  nodes verify quotes with the IAS, run consensus, announce   (T+5)
    T+6  nodes commit on a strict majority of matching announcements,
         append the block (logical time T+6) and deliver to edges    (T+7)
    T+8  edges verify the delivered chain and adopt the new model

Key agreement between every (edge, enclave) pair happens once, before round 1.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import struct
import time
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from fedchain.attestation import (
    EncryptedQuote,
    IasService,
    Quote,
    Registries,
    collect_quotes,
    encrypt_quote,
    generate_quote,
)
from fedchain.config import FaultPlan, SimConfig
from fedchain.crypto import (
    Ciphertext,
    EphemeralSecret,
    Entropy,
    IasKeyPair,
    NonceRegistry,
    SigningKeyPair,
    SymmetricKey,
    Transcript,
    encrypt,
    establish_session_key,
    sign,
)
from fedchain.enclave import (
    MEASUREMENT,
    AggregationEntry,
    AggregationInput,
    Enclave,
    EnclaveIdentity,
    make_report,
    perturb,
)
from fedchain.errors import AggregationError, ConfigError, ContractViolation, FedChainError
from fedchain.ledger import (
    Chain,
    ConsensusState,
    append_block,
    consensus_round,
    get_latest_model,
)
from fedchain.metrics import RoundMetrics
from fedchain.params import (
    Dataset,
    HyperParams,
    ParameterVector,
    canonical_serialize,
    evaluate,
    gen_synthetic,
    init_model,
    load_idx,
    local_train,
    model_hash,
    pool,
    split_even,
)

ROUND_TICKS = 9
SETUP_TICKS = 3


def derive_seed(master: int, *labels) -> int:
    h = hashlib.sha256(struct.pack("<Q", master & 0xFFFFFFFFFFFFFFFF))
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def edge_name(i: int) -> str:
    return f"edge-{i}"


def node_name(j: int) -> str:
    return f"node-{j}"


def pair_key_id(cluster: int, node: int) -> int:
    return (cluster << 16) | node


# messages -----------------------------------------------------------------------

@dataclass(frozen=True)
class Timer:
    phase: str
    round: int = 0


@dataclass(frozen=True)
class KeyShare:
    cluster: int
    node: int
    public: bytes
    from_initiator: bool


@dataclass(frozen=True)
class EncryptedLocalModel:
    round: int
    cluster_id: int
    ciphertext: bytes
    size: int


@dataclass(frozen=True)
class EncryptedQuoteMessage:
    round: int
    origin: int
    sealed: EncryptedQuote
    model_bytes: bytes
    quotes: tuple


@dataclass(frozen=True)
class HashAnnouncement:
    round: int
    node: int
    hash: bytes | None


@dataclass(frozen=True)
class CommitAnnouncement:
    round: int
    node: int
    header_hash: bytes


@dataclass(frozen=True)
class GlobalModelDelivery:
    round: int
    node: int
    blocks: tuple


PROTOCOL_MESSAGES = (EncryptedLocalModel, EncryptedQuoteMessage, HashAnnouncement,
                     CommitAnnouncement, GlobalModelDelivery)


# event bus ----------------------------------------------------------------------

@dataclass(order=True)
class Event:
    tick: int
    ordinal: int
    dest: str = field(compare=False)
    payload: object = field(compare=False)


class EventBus:
    """Single-threaded priority queue of events keyed by (tick, ordinal)."""

    def __init__(self):
        self.now = 0
        self._queue: list[Event] = []
        self._ordinal = itertools.count()
        self.actors = {}
        self.enqueued: list[tuple[int, int, str, str]] = []
        self.processed: list[int] = []
        self.counts = Counter()

    def register(self, name: str, actor) -> None:
        self.actors[name] = actor

    def send(self, dest: str, payload, delay: int = 1, at: int | None = None) -> None:
        if dest not in self.actors:
            raise ContractViolation(f"no actor named {dest!r}")
        tick = self.now + delay if at is None else at
        ev = Event(tick, next(self._ordinal), dest, payload)
        kind = type(payload).__name__
        self.enqueued.append((ev.ordinal, tick, dest, kind))
        if not isinstance(payload, Timer):
            self.counts[kind] += 1
        heapq.heappush(self._queue, ev)

    def broadcast(self, dests, payload, delay: int = 1) -> int:
        dests = list(dests)
        for d in dests:
            self.send(d, payload, delay)
        return len(dests)

    def run(self) -> None:
        while self._queue:
            ev = heapq.heappop(self._queue)
            self.now = ev.tick
            self.processed.append(ev.ordinal)
            self.actors[ev.dest].handle(ev.payload, self)


# fault hooks --------------------------------------------------------------------

class FaultInjector:
    """Explicit wrappers around the honest code path, driven by a FaultPlan."""

    def __init__(self, plan: FaultPlan, entropy: Entropy):
        self.plan = plan
        self._entropy = entropy
        self._forged: dict[int, SigningKeyPair] = {}

    def local_model(self, r, cluster, model: ParameterVector) -> ParameterVector:
        for d in self.plan.matching("poison-local", r, cluster=cluster):
            model = ParameterVector(model.spec_digest, model.values + d.delta)
        return model

    def ciphertext(self, r, cluster, node, ct: bytes) -> bytes:
        if self.plan.has("tamper-ciphertext", r, cluster=cluster, node=node):
            buf = bytearray(ct)
            buf[24] ^= 0x01  # first body byte, after key_id|nonce|length
            return bytes(buf)
        return ct

    def aggregate(self, r, node, model: ParameterVector, report, enclave: Enclave):
        for d in self.plan.matching("corrupt-aggregator", r, node=node):
            model = perturb(model, 0, d.delta)
            report = enclave.resign(model, r)
        if self.plan.has("forge-report", r, node=node):
            if node not in self._forged:
                self._forged[node] = SigningKeyPair.generate(
                    f"forged-{node}", self._entropy.child(f"forged-{node}"))
            report = make_report(model, r, enclave.identity, self._forged[node])
        return model, report

    def bypass_quoting(self, r, node) -> bool:
        # a host that forged its report also skips its quoting enclave's check
        return self.plan.has("forge-report", r, node=node)

    def silent(self, r, node) -> bool:
        return self.plan.has("silent", r, node=node)

    def tamper_chains(self, chains: dict) -> None:
        for d in self.plan.matching("tamper-chain"):
            chain = chains[d.node]
            if not 0 <= d.height < len(chain):
                raise ConfigError(f"tamper-chain: node {d.node} has no block {d.height}")
            blk = chain.blocks[d.height]
            body = bytearray(blk.body)
            body[d.byte % len(body)] ^= 0x01
            chain.blocks[d.height] = replace(blk, body=bytes(body))


def inject_fault(plan: FaultPlan, entropy: Entropy | None = None) -> FaultInjector:
    return FaultInjector(plan, entropy or Entropy(0, "faults"))


# actors -------------------------------------------------------------------------

class EdgeServer:
    def __init__(self, sim: "Simulation", cluster: int, data: Dataset, model: ParameterVector):
        self.sim = sim
        self.cluster = cluster
        self.name = edge_name(cluster)
        self.data = data
        self.model = model
        self.keys: dict[int, SymmetricKey] = {}
        self._secrets: dict[int, EphemeralSecret] = {}
        self._deliveries: dict[int, GlobalModelDelivery] = {}
        self.last_local: tuple[float, float] | None = None
        self.adopted: dict[int, bytes] = {}

    def handle(self, msg, bus: EventBus):
        if isinstance(msg, Timer):
            getattr(self, f"_on_{msg.phase}")(msg.round, bus)
        elif isinstance(msg, KeyShare):
            own = self._secrets.pop(msg.node)
            tr = Transcript(self.name, node_name(msg.node), own.public, msg.public,
                            pair_key_id(self.cluster, msg.node))
            self.keys[msg.node] = establish_session_key(tr.initiator_id, tr.responder_id, tr, own)
        elif isinstance(msg, GlobalModelDelivery):
            self._deliveries[msg.node] = msg

    def _on_setup(self, r, bus):
        for j in range(self.sim.cfg.nodes):
            sec = EphemeralSecret(self.name, self.sim.entropy.child(f"{self.name}/dh/{j}"))
            self._secrets[j] = sec
            bus.send(node_name(j), KeyShare(self.cluster, j, sec.public, True))

    def _on_train(self, r, bus):
        sim = self.sim
        hp = HyperParams(sim.hp.learning_rate, sim.hp.batch_size, sim.hp.local_epochs,
                         derive_seed(sim.cfg.seed, "train", r, self.cluster))
        local = local_train(self.model, sim.spec, self.data, hp)
        local = sim.faults.local_model(r, self.cluster, local)
        self.last_local = evaluate(local, sim.spec, self.data)
        payload = canonical_serialize(local)
        for j in range(sim.cfg.nodes):
            ct = encrypt(payload, self.keys[j], sim.nonces).to_bytes()
            ct = sim.faults.ciphertext(r, self.cluster, j, ct)
            bus.send(node_name(j), EncryptedLocalModel(r, self.cluster, ct, len(self.data)))

    def _on_update(self, r, bus):
        deliveries, self._deliveries = self._deliveries, {}
        votes, candidates = Counter(), {}
        for node in sorted(deliveries):
            d = deliveries[node]
            if d.round != r:
                continue
            try:
                model, tip = get_latest_model(Chain(d.blocks))
            except FedChainError:
                continue
            if tip.round != r:
                continue
            votes[tip.header_hash] += 1
            candidates.setdefault(tip.header_hash, model)
        if not votes:
            return
        best, count = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
        if 2 * count > self.sim.cfg.nodes:
            self.model = candidates[best]
            self.adopted[r] = model_hash(self.model)


@dataclass
class NodeRound:
    local_models: dict = field(default_factory=dict)
    quotes: dict = field(default_factory=dict)
    announcements: dict = field(default_factory=dict)
    commits: dict = field(default_factory=dict)
    enclave_abort: int | None = None
    aggregation_seconds: float | None = None
    own_hash: bytes | None = None
    state: ConsensusState | None = None
    committed: bool = False


class BlockchainNode:
    def __init__(self, sim: "Simulation", node_id: int, enclave: Enclave,
                 quoting_key: SigningKeyPair, chain: Chain):
        self.sim = sim
        self.node_id = node_id
        self.name = node_name(node_id)
        self.enclave = enclave
        self.quoting_key = quoting_key
        self.chain = chain
        self.rounds: dict[int, NodeRound] = {}

    def _round(self, r) -> NodeRound:
        return self.rounds.setdefault(r, NodeRound())

    def handle(self, msg, bus: EventBus):
        if isinstance(msg, Timer):
            getattr(self, f"_on_{msg.phase}")(msg.round, bus)
        elif isinstance(msg, KeyShare):
            edge = edge_name(msg.cluster)
            own = EphemeralSecret(self.name, self.sim.entropy.child(f"{self.name}/dh/{msg.cluster}"))
            tr = Transcript(edge, self.name, msg.public, own.public,
                            pair_key_id(msg.cluster, self.node_id))
            self.enclave.install_key(msg.cluster, establish_session_key(edge, self.name, tr, own))
            bus.send(edge, KeyShare(msg.cluster, self.node_id, own.public, False))
        elif isinstance(msg, EncryptedLocalModel):
            self._round(msg.round).local_models[msg.cluster_id] = msg
        elif isinstance(msg, EncryptedQuoteMessage):
            self._round(msg.round).quotes[msg.origin] = msg
        elif isinstance(msg, HashAnnouncement):
            self._round(msg.round).announcements[msg.node] = msg.hash
        elif isinstance(msg, CommitAnnouncement):
            self._round(msg.round).commits[msg.node] = msg.header_hash

    def _on_aggregate(self, r, bus):
        sim, st = self.sim, self._round(r)
        if not st.local_models:
            return
        entries = [AggregationEntry(c, Ciphertext.from_bytes(m.ciphertext), m.size)
                   for c, m in sorted(st.local_models.items())]
        t0 = time.perf_counter()
        try:
            outcome = self.enclave.aggregate(AggregationInput(r, tuple(entries)))
        except AggregationError as exc:
            st.enclave_abort = exc.cluster_id
            return
        finally:
            st.aggregation_seconds = time.perf_counter() - t0
        model, report = sim.faults.aggregate(r, self.node_id, outcome.global_model,
                                             outcome.report, self.enclave)
        if sim.faults.bypass_quoting(r, self.node_id):
            quote = Quote(report, self.node_id, sign(report.to_bytes(), self.quoting_key))
        else:
            quote = generate_quote(report, self.quoting_key, self.node_id, sim.registries)
        st.own_hash = report.model_hash
        sealed = encrypt_quote(quote, sim.ias.public,
                               sim.entropy.child(f"{self.name}/quote/{r}"))
        if sim.faults.silent(r, self.node_id):
            return
        msg = EncryptedQuoteMessage(r, self.node_id, sealed, canonical_serialize(model),
                                    (quote.to_bytes(),))
        bus.broadcast(sim.node_names, msg)

    def _on_consensus(self, r, bus):
        sim, st = self.sim, self._round(r)
        verdicts = collect_quotes(r, {o: m.sealed for o, m in st.quotes.items()},
                                  sim.ias, range(sim.cfg.nodes))
        proposals = {o: (m.model_bytes, list(m.quotes)) for o, m in st.quotes.items()}
        st.state = consensus_round(verdicts, proposals, sim.cfg.nodes, r)
        if sim.faults.silent(r, self.node_id):
            return
        bus.broadcast(sim.node_names, HashAnnouncement(r, self.node_id, st.state.decision.hash))

    def _on_commit(self, r, bus):
        sim, st = self.sim, self._round(r)
        dec = st.state.decision if st.state else None
        if dec is None or not dec.committed:
            return
        agree = sum(1 for h in st.announcements.values() if h == dec.hash)
        if 2 * agree <= sim.cfg.nodes:
            return
        block = append_block(self.chain, r, bus.now, st.state.model_bytes,
                             st.state.quotes, dec.hash)
        st.committed = True
        if sim.faults.silent(r, self.node_id):
            return
        bus.broadcast(sim.node_names, CommitAnnouncement(r, self.node_id, block.header_hash))
        bus.broadcast(sim.edge_names, GlobalModelDelivery(r, self.node_id, self.chain.snapshot()))


# orchestration ------------------------------------------------------------------

@dataclass
class SimResult:
    config: SimConfig
    chains: dict
    metrics: list
    bus: EventBus
    final_model: ParameterVector
    edge_models: dict
    test: Dataset

    def chain_dumps(self) -> dict:
        return {j: c.to_bytes() for j, c in self.chains.items()}


def prepare_data(cfg: SimConfig) -> tuple[list[Dataset], Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        train = gen_synthetic(cfg.clusters, d.per_cluster, d.dim,
                              derive_seed(cfg.seed, "data", "train"), d.skew, d.std)
        test = gen_synthetic(1, d.test_size, d.dim, derive_seed(cfg.seed, "data", "test"),
                             0.0, d.std)[0]
        return train, test
    train_all = load_idx(d.train_images, d.train_labels)
    test = load_idx(d.test_images, d.test_labels, cluster_id=-1)
    if train_all.dim != cfg.model.input_dim:
        raise ConfigError(f"IDX images have {train_all.dim} pixels, model expects "
                          f"{cfg.model.input_dim}")
    if max(train_all.labels.max(), test.labels.max()) >= cfg.model.classes:
        raise ConfigError("IDX labels exceed the model's class count")
    return split_even(train_all, cfg.clusters), test


class Simulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.spec = cfg.model
        self.hp = cfg.hyperparams
        self.entropy = Entropy(cfg.seed, "sim")
        self.faults = inject_fault(cfg.faults, self.entropy.child("faults"))
        self.nonces = NonceRegistry()
        self.bus = EventBus()
        self.train, self.test = prepare_data(cfg)
        self.initial = init_model(self.spec, derive_seed(cfg.seed, "init"))

        self.registries = Registries(measurement=MEASUREMENT, min_svn=cfg.min_svn)
        self.ias = IasService(IasKeyPair.generate(self.entropy.child("ias")), self.registries)
        self.node_names = [node_name(j) for j in range(cfg.nodes)]
        self.edge_names = [edge_name(i) for i in range(cfg.clusters)]

        self.nodes: list[BlockchainNode] = []
        genesis = Chain.genesis(self.initial)
        for j in range(cfg.nodes):
            att = SigningKeyPair.generate(f"enclave-{j}", self.entropy.child(f"att/{j}"))
            qk = SigningKeyPair.generate(f"quoting-{j}", self.entropy.child(f"quote/{j}"))
            enclave = Enclave(EnclaveIdentity(MEASUREMENT, cfg.enclave_svn, j), att,
                              expected_spec=self.spec.digest)
            self.registries.register_node(j, att.public, qk.public)
            node = BlockchainNode(self, j, enclave, qk, Chain(genesis.blocks))
            self.nodes.append(node)
            self.bus.register(node.name, node)
        self.edges: list[EdgeServer] = []
        for i, data in enumerate(self.train):
            edge = EdgeServer(self, i, data, self.initial)
            self.edges.append(edge)
            self.bus.register(edge.name, edge)

    def setup(self):
        for e in self.edges:
            self.bus.send(e.name, Timer("setup"), at=0)
        self.bus.run()

    def run_round(self, r: int) -> RoundMetrics:
        bus = self.bus
        start = SETUP_TICKS + (r - 1) * ROUND_TICKS
        before_models = {e.cluster: e.model for e in self.edges}
        counts_before = Counter(bus.counts)
        for e in self.edges:
            bus.send(e.name, Timer("train", r), at=start)
        for n in self.nodes:
            bus.send(n.name, Timer("aggregate", r), at=start + 2)
            bus.send(n.name, Timer("consensus", r), at=start + 4)
            bus.send(n.name, Timer("commit", r), at=start + 6)
        for e in self.edges:
            bus.send(e.name, Timer("update", r), at=start + 8)
        bus.run()
        counts = {k: bus.counts[k] - counts_before[k] for k in
                  (c.__name__ for c in PROTOCOL_MESSAGES)}
        return self._round_metrics(r, counts, before_models)

    def _reference_node(self) -> BlockchainNode:
        bad = self.cfg.faults.corrupted_nodes
        honest = [n for n in self.nodes if n.node_id not in bad]
        return (honest or self.nodes)[0]

    def _round_metrics(self, r, counts, before_models) -> RoundMetrics:
        ref = self._reference_node()
        st = ref.rounds.get(r, NodeRound())
        state = st.state
        decision = state.decision if state else None
        committed = bool(decision and decision.committed and st.committed)
        durations = [n.rounds[r].aggregation_seconds for n in self.nodes
                     if r in n.rounds and n.rounds[r].aggregation_seconds is not None]
        _, test_acc = evaluate(self.edges[0].model, self.spec, self.test)
        return RoundMetrics(
            round=r,
            cluster_loss=[e.last_local[0] for e in self.edges],
            cluster_accuracy=[e.last_local[1] for e in self.edges],
            test_accuracy=test_acc,
            decision="committed" if committed else "aborted",
            committed_hash=decision.hash.hex() if committed else None,
            abort_reason=None if committed else (decision.reason if decision and decision.reason
                                                 else "no-commit-quorum"),
            tally=state.tally_hex() if state else {},
            exclusions={str(k): v for k, v in sorted(state.exclusions.items())} if state else {},
            node_decisions=[_decision_hex(n, r) for n in self.nodes],
            enclave_aborts={str(n.node_id): n.rounds[r].enclave_abort for n in self.nodes
                            if r in n.rounds and n.rounds[r].enclave_abort is not None},
            chain_heights=[len(n.chain) - 1 for n in self.nodes],
            models_updated=sum(1 for e in self.edges if e.model != before_models[e.cluster]),
            message_counts=counts,
            aggregation_seconds=float(np.mean(durations)) if durations else 0.0,
        )

    def run(self) -> SimResult:
        self.setup()
        metrics = [self.run_round(r) for r in range(1, self.cfg.rounds + 1)]
        chains = {n.node_id: n.chain for n in self.nodes}
        self.faults.tamper_chains(chains)
        return SimResult(self.cfg, chains, metrics, self.bus, self.edges[0].model,
                         {e.cluster: e.model for e in self.edges}, self.test)


def _decision_hex(node: BlockchainNode, r: int):
    st = node.rounds.get(r)
    if st is None or not st.committed:
        return None
    return st.state.decision.hash.hex()


def run_simulation(cfg: SimConfig) -> SimResult:
    return Simulation(cfg).run()


def centralized_baseline(cfg: SimConfig) -> tuple[ParameterVector, float]:
    """Train on the pooled data with the federated run's hyperparameters.

    Uses ``rounds * local_epochs`` epochs so both see the data equally often.
    Returns the model and its held-out accuracy.
    """
    train, test = prepare_data(cfg)
    hp = HyperParams(cfg.hyperparams.learning_rate, cfg.hyperparams.batch_size,
                     cfg.rounds * cfg.hyperparams.local_epochs,
                     derive_seed(cfg.seed, "central"))
    init = init_model(cfg.model, derive_seed(cfg.seed, "init"))
    model = local_train(init, cfg.model, pool(train), hp)
    return model, evaluate(model, cfg.model, test)[1]


# timing sweep -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    devices: int
    mean_seconds: float
    min_seconds: float
    repeats: int


def timing_sweep(device_counts, cfg: SimConfig, repeats: int = 20) -> list[SweepRow]:
    """Mean wall time of one enclave aggregation per edge-device count.

    Only :meth:`Enclave.aggregate` (decrypt, FedAvg, report) is inside the timer.
    """
    counts = list(device_counts)
    if not counts or any(c < 1 for c in counts) or counts != sorted(counts):
        raise ContractViolation("device counts must be positive and ascending")
    ent = Entropy(cfg.seed, "sweep")
    att = SigningKeyPair.generate("sweep-enclave", ent.child("att"))
    rows = []
    for count in counts:
        enclave = Enclave(EnclaveIdentity(MEASUREMENT, 1, 0), att, cfg.model.digest)
        entries = []
        for c in range(count):
            key = SymmetricKey(ent.child(f"{count}/{c}").take(32), pair_key_id(c, 0))
            enclave.install_key(c, key)
            m = init_model(cfg.model, derive_seed(cfg.seed, "sweep", count, c))
            entries.append(AggregationEntry(c, encrypt(canonical_serialize(m), key), 1 + c))
        inp = AggregationInput(1, tuple(entries))
        enclave.aggregate(inp)  # warm-up
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            enclave.aggregate(inp)
            samples.append(time.perf_counter() - t0)
        rows.append(SweepRow(count, float(np.mean(samples)), float(np.min(samples)), repeats))
    return rows


def count_inversions(values) -> int:
    return sum(1 for a, b in zip(values, values[1:]) if b < a)
