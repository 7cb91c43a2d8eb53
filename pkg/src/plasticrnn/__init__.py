"""Plastic RNNs: recurrent networks that rewrite their own weights within a
trial under meta-trained Hebbian or self-generated gradient-based rules."""

__version__ = "0.1.0"
