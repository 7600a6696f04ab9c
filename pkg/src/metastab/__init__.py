"""metastab: meta-learned test-time adaptation for video stabilization.

The package is organised bottom-up: ``core`` (rigid transforms and domain
types), ``flow``/``affine`` (global flow and the flow-to-affine estimator),
``losses``, ``stabilizer`` (models and sliding-window inference), ``meta``
(meta-training and vanilla adaptation), ``jerk`` (targeted adaptation),
``metrics``, ``data``, ``judge`` and the ``stab`` command line.
"""
from .affine import AffineEstimator, align_sequence, load_estimator, save_estimator
from .core import AdaptationConfig, RigidAffine, compose, invert
from .data import FrameStore, JitterSpec, PairedDataset, load_frames, save_frames, synth_shake, synthetic_suite
from .flow import KnownMotionFlowProvider, RigidFlowProvider, oracle_flow, warp
from .jerk import jerk_profile, select_peaks, targeted_adapt
from .losses import RandomFeatureExtractor, inner_total, outer_total
from .meta import MetaConfig, MetaStabilizer, meta_inference, meta_train
from .metrics import evaluate, stability_score
from .stabilizer import ToyStabilizer, load_model, save_model, sliding_stabilize

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "AffineEstimator", "FrameStore", "JitterSpec", "KnownMotionFlowProvider", "MetaConfig",
    "MetaStabilizer", "PairedDataset", "RandomFeatureExtractor", "RigidAffine", "RigidFlowProvider",
    "ToyStabilizer", "align_sequence", "compose", "evaluate", "inner_total", "invert", "jerk_profile",
    "load_estimator", "load_frames", "load_model", "meta_inference", "meta_train", "oracle_flow", "outer_total",
    "save_estimator", "save_frames", "save_model", "select_peaks", "sliding_stabilize", "stability_score",
    "synth_shake", "synthetic_suite", "targeted_adapt", "warp",
]
