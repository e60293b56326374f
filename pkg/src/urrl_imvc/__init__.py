"""Incomplete multi-view clustering with neighbor-imputed, augmentation-robust embeddings."""

__version__ = "0.1.0"
