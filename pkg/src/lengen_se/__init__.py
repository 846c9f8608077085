"""Transformer time-frequency speech enhancement with interchangeable
position embeddings, for train-short / test-long experiments."""

__version__ = "0.1.0"
