"""Simulation configuration and fault plans.

Config files are YAML (JSON is accepted too, being a subset). Unknown keys are
rejected at every level::

    clusters: 4
    nodes: 5
    rounds: 20
    seed: 11
    model: {kind: logistic, layer_dims: [2, 2]}
    hyperparams: {learning_rate: 0.5, batch_size: 10, local_epochs: 1}
    data: {source: synthetic, per_cluster: 50, dim: 2, test_size: 400}
    faults:
      - {kind: corrupt-aggregator, node: 2}
      - {kind: tamper-ciphertext, cluster: 1, node: 3, rounds: [2]}
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from fedchain.errors import ConfigError, ContractViolation
from fedchain.params import HyperParams, ModelSpec

FAULT_KINDS = {
    "corrupt-aggregator": {"node"},
    "forge-report": {"node"},
    "tamper-ciphertext": {"cluster", "node"},
    "tamper-chain": {"node", "height", "byte"},
    "silent": {"node"},
    "poison-local": {"cluster"},
}
# directives that make a blockchain node misbehave during rounds
_NODE_FAULTS = {"corrupt-aggregator", "forge-report", "silent"}


@dataclass(frozen=True)
class FaultDirective:
    kind: str
    node: int | None = None
    cluster: int | None = None
    rounds: frozenset | None = None  # None means every round
    height: int | None = None
    byte: int | None = None
    delta: float = 1.0

    def active(self, round_: int) -> bool:
        return self.rounds is None or round_ in self.rounds


@dataclass(frozen=True)
class FaultPlan:
    directives: tuple = ()

    def __iter__(self):
        return iter(self.directives)

    def __len__(self):
        return len(self.directives)

    def matching(self, kind: str, round_: int | None = None, **targets):
        for d in self.directives:
            if d.kind != kind:
                continue
            if round_ is not None and not d.active(round_):
                continue
            if all(getattr(d, k) == v for k, v in targets.items()):
                yield d

    def has(self, kind: str, round_: int | None = None, **targets) -> bool:
        return next(self.matching(kind, round_, **targets), None) is not None

    @property
    def corrupted_nodes(self) -> frozenset:
        return frozenset(d.node for d in self.directives if d.kind in _NODE_FAULTS)

    @property
    def f(self) -> int:
        return len(self.corrupted_nodes)

    def validate(self, clusters: int, nodes: int) -> None:
        for d in self.directives:
            if d.kind not in FAULT_KINDS:
                raise ConfigError(f"unknown fault kind {d.kind!r}")
            for attr in FAULT_KINDS[d.kind]:
                if getattr(d, attr) is None:
                    raise ConfigError(f"{d.kind} needs {attr!r}")
            if d.node is not None and not 0 <= d.node < nodes:
                raise ConfigError(f"{d.kind}: no blockchain node {d.node}")
            if d.cluster is not None and not 0 <= d.cluster < clusters:
                raise ConfigError(f"{d.kind}: no cluster {d.cluster}")


@dataclass(frozen=True)
class DataSource:
    source: str = "synthetic"
    per_cluster: int = 50
    dim: int = 2
    skew: float = 0.0
    std: float = 0.2
    test_size: int = 400
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def validate(self):
        if self.source == "synthetic":
            if min(self.per_cluster, self.dim, self.test_size) < 1:
                raise ConfigError("synthetic per_cluster, dim and test_size must be >= 1")
        elif self.source == "idx":
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"idx data source missing {missing}")
        else:
            raise ConfigError(f"unknown data source {self.source!r}")


@dataclass(frozen=True)
class SimConfig:
    clusters: int = 4
    nodes: int = 5
    rounds: int = 3
    seed: int = 0
    model: ModelSpec = field(default_factory=lambda: ModelSpec("logistic", (2, 2)))
    hyperparams: HyperParams = field(default_factory=HyperParams)
    data: DataSource = field(default_factory=DataSource)
    faults: FaultPlan = field(default_factory=FaultPlan)
    min_svn: int = 1
    enclave_svn: int = 1

    def __post_init__(self):
        for name in ("clusters", "nodes", "rounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.enclave_svn < 1 or self.min_svn < 1:
            raise ConfigError("svn values start at 1")
        self.data.validate()
        if self.data.source == "synthetic" and self.model.input_dim != self.data.dim:
            raise ConfigError("model input dim does not match data dim")
        self.faults.validate(self.clusters, self.nodes)

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


def _strict(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return raw


def _fault(raw, i):
    if not isinstance(raw, dict):
        raise ConfigError(f"faults[{i}]: expected a mapping")
    raw = dict(raw)
    rounds = raw.pop("rounds", "all")
    _strict(FaultDirective, raw, f"faults[{i}]")
    if rounds in (None, "all"):
        rset = None
    elif isinstance(rounds, list) and all(isinstance(r, int) for r in rounds):
        rset = frozenset(rounds)
    else:
        raise ConfigError(f"faults[{i}].rounds must be 'all' or a list of ints")
    if "kind" not in raw:
        raise ConfigError(f"faults[{i}] needs a kind")
    return FaultDirective(rounds=rset, **raw)


def config_from_dict(raw: dict) -> SimConfig:
    raw = dict(_strict(SimConfig, raw, "config"))
    try:
        if "model" in raw:
            m = _strict(ModelSpec, raw["model"], "model")
            raw["model"] = ModelSpec(m.get("kind", "logistic"), tuple(m.get("layer_dims", ())),
                                     m.get("activation", "relu"))
        if "hyperparams" in raw:
            hp = dict(_strict(HyperParams, raw["hyperparams"], "hyperparams"))
            if "seed" in hp:
                raise ConfigError("hyperparams.seed is derived; set the top-level seed")
            raw["hyperparams"] = HyperParams(**hp)
        if "data" in raw:
            raw["data"] = DataSource(**_strict(DataSource, raw["data"], "data"))
        if "faults" in raw:
            raw["faults"] = FaultPlan(tuple(_fault(d, i) for i, d in enumerate(raw["faults"] or [])))
        return SimConfig(**raw)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw or {})
