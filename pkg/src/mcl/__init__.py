"""Desk-scale multi-level contrastive pretraining on montage batches."""

__version__ = "0.1.0"
