"""Federated learning with enclave-secured aggregation and a hash-chained model ledger."""

from fedchain.config import FaultDirective, FaultPlan, SimConfig, load_config
from fedchain.params import HyperParams, ModelSpec, ParameterVector
from fedchain.sim import run_simulation, timing_sweep

__all__ = [
    "FaultDirective",
    "FaultPlan",
    "HyperParams",
    "ModelSpec",
    "ParameterVector",
    "SimConfig",
    "load_config",
    "run_simulation",
    "timing_sweep",
]

__version__ = "0.1.0"
