"""Concept-guided bag construction, attention-MIL concept-bottleneck
training, and robustness evaluation over precomputed segment features."""

__version__ = "0.1.0"

from .bagio import Bag, DatasetManifest, Instance, read_bagpack, write_bagpack
from .bagbuild import BuildConfig, RawDetection
from .milmodel import ForwardTrace, ModelParams, forward, init_params
from .training import TrainConfig, train
from .metrics import corruption_eval, evaluate, seed_aggregate
from .synthbench import SynthSpec

__all__ = [
    "Bag",
    "BuildConfig",
    "DatasetManifest",
    "ForwardTrace",
    "Instance",
    "ModelParams",
    "RawDetection",
    "SynthSpec",
    "TrainConfig",
    "corruption_eval",
    "evaluate",
    "forward",
    "init_params",
    "read_bagpack",
    "seed_aggregate",
    "train",
    "write_bagpack",
    "__version__",
]
