"""Autoregressive novel view synthesis with relative-pose attention and KV-cache spatial memory."""

__version__ = "0.1.0"
