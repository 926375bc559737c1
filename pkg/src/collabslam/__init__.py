"""Collaborative visual SLAM: bounded-memory clients, an edge server, and a simulator."""

__version__ = "0.1.0"
