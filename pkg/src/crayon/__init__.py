"""Customized on-device language models from a pool of blendable low-rank adapters."""

__version__ = "0.1.0"
