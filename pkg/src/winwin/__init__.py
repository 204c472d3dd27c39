"""Multi-window token masking for training dense-prediction transformers."""

__version__ = "0.1.0"
