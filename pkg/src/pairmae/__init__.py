"""Desk-scale twin-frame masked autoencoder pre-training with adaptive
spatial-attention dropout."""

__version__ = "0.1.0"
