"""Multimodal contrastive embeddings with modal channel attention.

Implements MCA, Zorro and EAO fusion in one masked transformer, modal
sparsification of datasets, and the retrieval / probing evaluation stack.
"""

from .data import Dataset, ModalitySchema, ModalitySpec, Sample
from .masking import ChannelSet
from .model import EmbeddingSet, FusionModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ChannelSet",
    "Dataset",
    "EmbeddingSet",
    "FusionModel",
    "ModalitySchema",
    "ModalitySpec",
    "ModelConfig",
    "Sample",
]
