from .cnn import DEFAULT_BN_CHANNELS, CnnBackend, CnnConfig, CnnOutput, cnn_forward
from .oracle import OracleBackend, oracle_forward
from .prediction import AttentionStack, SegPrediction, attend, attention_scores
from .transformer import TransformerBackend, TransformerConfig, TransformerOutput, transformer_forward
from .weights import load_weights, save_weights

__all__ = [
    "AttentionStack",
    "CnnBackend",
    "CnnConfig",
    "CnnOutput",
    "DEFAULT_BN_CHANNELS",
    "OracleBackend",
    "SegPrediction",
    "TransformerBackend",
    "TransformerConfig",
    "TransformerOutput",
    "attend",
    "attention_scores",
    "cnn_forward",
    "load_weights",
    "oracle_forward",
    "save_weights",
    "transformer_forward",
]
