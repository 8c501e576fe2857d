"""Dual multi-level encoding for text-to-video retrieval."""

__version__ = "0.1.0"

from .autodiff import ParameterSet, Tensor, backward, finite_difference_check, no_grad, precision
from .data import CaptionItem, VideoItem, Vocabulary, bow_encode, tokenize
from .encoders import ModelConfig
from .model import DualEncoding
from .retrieval import VideoIndex, compute_metrics, evaluate_bidirectional

__all__ = [
    "CaptionItem",
    "DualEncoding",
    "ModelConfig",
    "ParameterSet",
    "Tensor",
    "VideoIndex",
    "VideoItem",
    "Vocabulary",
    "backward",
    "bow_encode",
    "compute_metrics",
    "evaluate_bidirectional",
    "finite_difference_check",
    "no_grad",
    "precision",
    "tokenize",
]
