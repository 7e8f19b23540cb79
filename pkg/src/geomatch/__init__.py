"""Learned soft matching for rigid point cloud registration."""

from .core import (
    CorrespondenceSet,
    DegenerateGeometryError,
    EvalConfig,
    PointCloud,
    RigidTransform,
    SynthParams,
    synth_pair,
)
from .estimator import Matcher
from .pipeline import ABLATIONS, AblationConfig, ModelWeights, forward, prepare_pair

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "AblationConfig",
    "CorrespondenceSet",
    "DegenerateGeometryError",
    "EvalConfig",
    "Matcher",
    "ModelWeights",
    "PointCloud",
    "RigidTransform",
    "SynthParams",
    "forward",
    "prepare_pair",
    "synth_pair",
]
