"""Multimodal MS severity prediction: synthetic cohorts, modality encoders, fusion decoder."""

__version__ = "0.1.0"
