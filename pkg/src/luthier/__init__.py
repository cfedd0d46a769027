"""Checkpoint merging and French SFT data-curation toolkit."""

__version__ = "0.1.0"
