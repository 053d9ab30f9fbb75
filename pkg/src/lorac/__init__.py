"""Layer-wise low-rank adaptation (LoRA-C) for convolutional networks."""

__version__ = "0.1.0"
