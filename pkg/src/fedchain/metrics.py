"""Per-round metrics and their line-delimited JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

SCHEMA_VERSION = 1


@dataclass
class RoundMetrics:
    round: int
    cluster_loss: list
    cluster_accuracy: list
    test_accuracy: float
    decision: str
    committed_hash: str | None
    abort_reason: str | None
    tally: dict
    exclusions: dict
    node_decisions: list
    enclave_aborts: dict
    chain_heights: list
    models_updated: int
    message_counts: dict = field(default_factory=dict)
    # wall clock; kept out of the record unless asked for, so streams stay byte-stable
    aggregation_seconds: float = 0.0

    @property
    def committed(self) -> bool:
        return self.decision == "committed"

    def to_record(self, include_timings: bool = False) -> dict:
        rec = asdict(self)
        if not include_timings:
            del rec["aggregation_seconds"]
        rec["schema_version"] = SCHEMA_VERSION
        return rec


def format_record(m: RoundMetrics, include_timings: bool = False) -> str:
    return json.dumps(m.to_record(include_timings), sort_keys=True, separators=(",", ":"))


def emit_metrics(metrics, stream, include_timings: bool = False) -> int:
    """Write one JSON object per line; returns the number of records."""
    n = 0
    for m in metrics:
        stream.write(format_record(m, include_timings) + "\n")
        n += 1
    return n


def read_metrics(stream) -> list[dict]:
    out = []
    for line in stream:
        line = line.strip()
        if line:
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"unsupported metrics schema {rec.get('schema_version')}")
            out.append(rec)
    return out
