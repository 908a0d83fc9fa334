"""Remote estimation over a Markov packet-drop channel.

Threshold transmission policies for an AR(1) source, evaluated by
regenerative (renewal) simulation, tuned by simultaneous-perturbation
stochastic approximation, and cross-checked by grid value iteration. A
small exact belief-state solver covers finite Markov sources.
"""
from .model import (
    BLANK,
    ArSourceSpec,
    ChannelSpec,
    CostSpec,
    ModelSpec,
    NoiseSpec,
    ThresholdPolicy,
    gilbert_elliott_model,
    validate_model,
)
from .rmc import AdamParams, RmcConfig, optimize
from .sim import CycleEstimate, SimConfig, estimate_cost_direct, run_cycles

__all__ = [
    "BLANK",
    "AdamParams",
    "ArSourceSpec",
    "ChannelSpec",
    "CostSpec",
    "CycleEstimate",
    "ModelSpec",
    "NoiseSpec",
    "RmcConfig",
    "SimConfig",
    "ThresholdPolicy",
    "estimate_cost_direct",
    "gilbert_elliott_model",
    "optimize",
    "run_cycles",
    "validate_model",
]
__version__ = "0.1.0"
