"""Continuous-output decoding against random or structured target embeddings."""

__version__ = "0.1.0"
