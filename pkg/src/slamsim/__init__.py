"""Decentralized multi-robot pose-graph SLAM and mission simulator."""

__version__ = "0.1.0"
