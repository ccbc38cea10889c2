"""Batch-agnostic contrastive learning for paired spatial transcriptomics and image features."""

__version__ = "0.1.0"
