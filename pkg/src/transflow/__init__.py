"""Transformer optical flow: spatial-temporal encoder, matching decoder and
attention-ranked masked pre-training, with synthetic data, flow IO and metrics."""

from .config import ConfigError, ModelConfig, desk_profile, load_config, paper_profile
from .metrics import EvalReport, aepe, f1_all
from .model import TransFlow, predict_flow
from .types import FlowField, FrameSequence, OcclusionMask, PatchGeometry, TokenGrid

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ModelConfig", "desk_profile", "load_config", "paper_profile",
    "EvalReport", "aepe", "f1_all", "TransFlow", "predict_flow",
    "FlowField", "FrameSequence", "OcclusionMask", "PatchGeometry", "TokenGrid",
]
