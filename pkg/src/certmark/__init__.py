"""Certifiable backdoor watermarks via parameter-space randomized smoothing.

A small-deterministic-network toolkit: embed a trigger-set watermark with
noise-replay training, certify with Monte Carlo percentile smoothing that
the trigger accuracy cannot drop below a bound for any l2-bounded
parameter perturbation, and stress-test the certificate with a suite of
removal attacks.
"""

from .data import Dataset, TriggerSet
from .embed import EmbedConfig
from .nn import ModelSpec, OptimizerState
from .smoothing import SmoothingConfig

__version__ = "0.1.0"

__all__ = [
    "Dataset", "TriggerSet", "EmbedConfig", "ModelSpec", "OptimizerState",
    "SmoothingConfig", "__version__",
]
