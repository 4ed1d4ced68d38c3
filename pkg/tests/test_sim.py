import io

import numpy as np
import pytest

from fedchain.config import FaultDirective, FaultPlan, SimConfig
from fedchain.errors import ConfigError, ContractViolation, DivergenceError
from fedchain.ledger import verify_chain
from fedchain.metrics import emit_metrics, read_metrics
from fedchain.params import HyperParams, ModelSpec, model_hash, write_idx
from fedchain.sim import (
    EventBus,
    Simulation,
    Timer,
    count_inversions,
    derive_seed,
    run_simulation,
    timing_sweep,
)
from fedchain.config import DataSource


def plan(*directives):
    return FaultPlan(tuple(directives))


def cfg(**kw):
    base = dict(clusters=4, nodes=5, rounds=3, seed=11)
    base.update(kw)
    return SimConfig(**base)


def stream(result, timings=False):
    buf = io.StringIO()
    emit_metrics(result.metrics, buf, timings)
    return buf.getvalue()


@pytest.fixture(scope="module")
def honest():
    return run_simulation(cfg())


# event bus ------------------------------------------------------------------------

class Recorder:
    def __init__(self):
        self.seen = []

    def handle(self, msg, bus):
        self.seen.append((bus.now, msg))


def test_bus_orders_by_tick_then_ordinal():
    bus, rec = EventBus(), Recorder()
    bus.register("a", rec)
    bus.send("a", "late", at=5)
    bus.send("a", "first", at=2)
    bus.send("a", "second", at=2)
    bus.run()
    assert rec.seen == [(2, "first"), (2, "second"), (5, "late")]
    assert sorted(bus.processed) == [0, 1, 2]


def test_bus_rejects_unknown_actor():
    with pytest.raises(ContractViolation):
        EventBus().send("nobody", Timer("x"))


def test_derive_seed_is_stable():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert 0 <= derive_seed(2**70, "x") < 2**63


# honest runs ------------------------------------------------------------------

def test_honest_run_is_unanimous(honest):
    for m in honest.metrics:
        assert m.committed
        assert list(m.tally.values()) == [5]
        assert m.node_decisions == [m.committed_hash] * 5
        assert m.models_updated == 4
    assert all(verify_chain(c) for c in honest.chains.values())
    assert len(set(honest.chain_dumps().values())) == 1
    assert [len(c) for c in honest.chains.values()] == [4] * 5


def test_edges_adopt_committed_model(honest):
    tip_hash = honest.chains[0].tip.model_hash
    for model in honest.edge_models.values():
        assert model_hash(model) == tip_hash


def test_message_conservation(honest):
    bus = honest.bus
    ordinals = [e[0] for e in bus.enqueued]
    assert sorted(bus.processed) == ordinals
    assert len(set(bus.processed)) == len(bus.processed)
    p, n = 4, 5
    expected = {"EncryptedLocalModel": p * n, "EncryptedQuoteMessage": n * n,
                "HashAnnouncement": n * n, "CommitAnnouncement": n * n,
                "GlobalModelDelivery": n * p}
    for m in honest.metrics:
        assert m.message_counts == expected
    assert bus.counts["KeyShare"] == 2 * p * n


def test_block_times_follow_round_window(honest):
    assert [b.logical_time for b in honest.chains[0].blocks] == [0, 9, 18, 27]


def test_no_nonce_reuse_across_run():
    sim = Simulation(cfg(rounds=2))
    sim.run()
    assert len(sim.nonces) == 2 * 4 * 5


def test_runs_are_deterministic(honest):
    again = run_simulation(cfg())
    assert again.chain_dumps() == honest.chain_dumps()
    assert stream(again) == stream(honest)
    assert run_simulation(cfg(seed=12)).chain_dumps() != honest.chain_dumps()


# faults -------------------------------------------------------------------------

def test_honest_majority_matches_fault_free_trajectory(honest):
    bad = run_simulation(cfg(faults=plan(FaultDirective("corrupt-aggregator", node=1),
                                         FaultDirective("corrupt-aggregator", node=3))))
    assert [m.committed_hash for m in bad.metrics] == [m.committed_hash for m in honest.metrics]
    assert bad.final_model == honest.final_model
    for m in bad.metrics:
        # both corrupt nodes apply the same perturbation, so they agree with each other
        assert sorted(m.tally.values()) == [2, 3]
    tips = {c.tip.model_hash for c in bad.chains.values()}
    assert tips == {honest.chains[0].tip.model_hash}


def test_tie_aborts_without_side_effects():
    sim = Simulation(cfg(nodes=4, faults=plan(FaultDirective("corrupt-aggregator", node=0),
                                              FaultDirective("corrupt-aggregator", node=1))))
    initial = {e.cluster: e.model for e in sim.edges}
    res = sim.run()
    for m in res.metrics:
        assert m.decision == "aborted" and m.abort_reason == "no-majority"
        assert m.models_updated == 0
        assert m.chain_heights == [0] * 4
        assert m.message_counts["GlobalModelDelivery"] == 0
        assert m.message_counts["CommitAnnouncement"] == 0
    for c, model in res.edge_models.items():
        assert model.values.tobytes() == initial[c].values.tobytes()


def test_forged_report_is_excluded():
    res = run_simulation(cfg(rounds=2, faults=plan(
        FaultDirective("forge-report", node=2, rounds=frozenset({1})))))
    assert res.metrics[0].exclusions == {"2": "bad-report-sig"}
    assert res.metrics[0].committed
    assert res.metrics[1].exclusions == {}


def test_tampered_ciphertext_aborts_only_that_enclave():
    res = run_simulation(cfg(rounds=1, faults=plan(
        FaultDirective("tamper-ciphertext", cluster=1, node=3))))
    m = res.metrics[0]
    assert m.enclave_aborts == {"3": 1}
    assert m.exclusions == {"3": "absent"}
    assert m.committed and list(m.tally.values()) == [4]
    assert m.chain_heights == [1] * 5


def test_silent_node_is_absent():
    res = run_simulation(cfg(rounds=1, faults=plan(FaultDirective("silent", node=4))))
    m = res.metrics[0]
    assert m.exclusions == {"4": "absent"}
    assert m.committed


def test_silent_majority_blocks_commit():
    res = run_simulation(cfg(rounds=1, faults=plan(*[FaultDirective("silent", node=j)
                                                     for j in (0, 1, 2)])))
    m = res.metrics[0]
    assert not m.committed
    assert m.models_updated == 0


def test_tamper_chain_is_detected_at_height():
    res = run_simulation(cfg(faults=plan(FaultDirective("tamper-chain", node=4, height=2, byte=5))))
    check = verify_chain(res.chains[4])
    assert (check.ok, check.height, check.cause) == (False, 2, "body")
    assert all(verify_chain(res.chains[j]) for j in range(4))


def test_tamper_chain_beyond_tip_is_config_error():
    with pytest.raises(ConfigError):
        run_simulation(cfg(rounds=1, faults=plan(
            FaultDirective("tamper-chain", node=0, height=5, byte=0))))


def test_poisoned_local_model_is_aggregated(honest):
    # every enclave sees the same poisoned input, so consensus cannot catch it
    res = run_simulation(cfg(faults=plan(FaultDirective("poison-local", cluster=0, delta=3.0))))
    assert all(m.committed for m in res.metrics)
    assert res.metrics[0].committed_hash != honest.metrics[0].committed_hash


def test_unknown_fault_targets_rejected():
    with pytest.raises(ConfigError):
        cfg(faults=plan(FaultDirective("silent", node=9)))
    with pytest.raises(ConfigError):
        cfg(faults=plan(FaultDirective("poison-local", cluster=4)))
    with pytest.raises(ConfigError):
        cfg(faults=plan(FaultDirective("melt-cpu", node=0)))


def test_divergence_propagates():
    with pytest.raises(DivergenceError):
        run_simulation(cfg(rounds=1, hyperparams=HyperParams(1e308, 1, 3)))


# metrics ----------------------------------------------------------------------

def test_metrics_stream(honest):
    records = read_metrics(io.StringIO(stream(honest)))
    assert len(records) == 3
    assert [r["round"] for r in records] == [1, 2, 3]
    assert all(r["schema_version"] == 1 for r in records)
    assert "aggregation_seconds" not in records[0]
    timed = read_metrics(io.StringIO(stream(honest, timings=True)))
    assert timed[0]["aggregation_seconds"] > 0


# other data and models -------------------------------------------------------

def test_mlp_with_skewed_clusters():
    res = run_simulation(cfg(model=ModelSpec("mlp", (2, 4, 2)),
                             data=DataSource(per_cluster=30, skew=0.5)))
    assert all(m.committed for m in res.metrics)
    assert res.metrics[-1].test_accuracy > 0.9


def test_idx_data_source(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 80).astype(np.uint8)
    images = np.where(labels[:, None, None] == 1, 200, 30).astype(np.uint8)
    images = np.broadcast_to(images, (80, 2, 2)).copy()
    paths = {}
    for split in ("train", "test"):
        paths[f"{split}_images"] = str(tmp_path / f"{split}-img.idx")
        paths[f"{split}_labels"] = str(tmp_path / f"{split}-lbl.idx")
        write_idx(paths[f"{split}_images"], images)
        write_idx(paths[f"{split}_labels"], labels)
    res = run_simulation(cfg(model=ModelSpec("logistic", (4, 2)),
                             data=DataSource(source="idx", **paths)))
    assert res.metrics[-1].test_accuracy == 1.0


# timing sweep -------------------------------------------------------------------

def test_timing_sweep_shape():
    rows = timing_sweep([1, 3], SimConfig(), repeats=2)
    assert [r.devices for r in rows] == [1, 3]
    assert all(r.mean_seconds >= r.min_seconds > 0 for r in rows)
    with pytest.raises(ContractViolation):
        timing_sweep([3, 1], SimConfig(), repeats=1)


def test_count_inversions():
    assert count_inversions([1, 2, 2, 3]) == 0
    assert count_inversions([1, 3, 2, 4, 1]) == 2
