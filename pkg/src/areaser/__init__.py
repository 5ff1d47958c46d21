"""Multiscale area attention for speech emotion recognition."""
from .area_attention import AreaAttention, AreaConfig, AreaIndex, area_attention_forward, area_attention_backward, enumerate_areas
from .audio import FeatureParams, log_mel, segment_utterance
from .augment import VtlpConfig, vtlp_spectrogram, warp_frequency
from .errors import (AreaSerError, ConfigurationError, ContractError, DimensionError, InputError,
                     NumericalError)
from .estimator import AreaAttentionClassifier
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .model import AreaAttentionNet, ModelConfig
from .store import FeatureStore

__version__ = "0.1.0"

__all__ = [
    "AreaAttention", "AreaConfig", "AreaIndex", "area_attention_forward", "area_attention_backward",
    "enumerate_areas", "FeatureParams", "log_mel", "segment_utterance", "VtlpConfig", "vtlp_spectrogram",
    "warp_frequency", "AreaSerError", "ConfigurationError", "ContractError", "DimensionError", "InputError",
    "NumericalError", "AreaAttentionClassifier", "MetricsReport", "compute_metrics", "confusion_matrix",
    "AreaAttentionNet", "ModelConfig", "FeatureStore",
]
