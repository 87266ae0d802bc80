"""Impulse integrators for stiff mechanical systems with damping and additive noise.

Splitting integrators that advance the damped, noisy linear stiff part of
``M dq = p dt, dp = (F(q) - K q / eps - c p) dt + sigma dW`` exactly and the
slow force ``F`` by impulses, giving step sizes that need not resolve the
fast frequencies.
"""

from .errors import StiffSimError
from .fastflow import FastFlow, assemble_propagator, kick_covariance, modal_decompose
from .integrators import Method, NoiseMode, StepPlan, integrate
from .model import State, StiffSystem, validate_system
from .noise import NoiseFeed, make_path_streams

__all__ = [
    "FastFlow",
    "Method",
    "NoiseFeed",
    "NoiseMode",
    "State",
    "StepPlan",
    "StiffSimError",
    "StiffSystem",
    "assemble_propagator",
    "integrate",
    "kick_covariance",
    "make_path_streams",
    "modal_decompose",
    "validate_system",
]

__version__ = "0.1.0"
