"""Decentralized multi-agent SoC balancing for distributed energy storage."""

__version__ = "0.1.0"
