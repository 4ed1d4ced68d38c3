from pathlib import Path

import pytest

from fedchain.config import config_from_dict, load_config
from fedchain.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name", ["baseline", "byzantine", "mixed-faults"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    assert cfg.nodes == 5


def test_fault_rounds_parsed():
    cfg = load_config(CONFIGS / "mixed-faults.yaml")
    forge = next(cfg.faults.matching("forge-report"))
    assert forge.rounds == frozenset({1})
    assert cfg.faults.corrupted_nodes == {0, 1}


def test_defaults():
    cfg = config_from_dict({})
    assert (cfg.clusters, cfg.nodes, cfg.rounds) == (4, 5, 3)


@pytest.mark.parametrize("raw", [
    {"clusterz": 4},
    {"model": {"kind": "logistic", "layers": [2, 2]}},
    {"hyperparams": {"seed": 3}},
    {"hyperparams": {"learning_rate": -1.0}},
    {"data": {"source": "csv"}},
    {"data": {"source": "idx"}},
    {"faults": [{"kind": "silent"}]},
    {"faults": [{"node": 0}]},
    {"faults": [{"kind": "silent", "node": 0, "rounds": "some"}]},
    {"faults": [{"kind": "silent", "node": 0, "colour": "red"}]},
    {"nodes": 0},
    {"model": {"kind": "logistic", "layer_dims": [3, 2]}},
    {"model": "logistic"},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("nodes: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_json_is_accepted(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"nodes": 3, "rounds": 1}')
    assert load_config(p).nodes == 3
