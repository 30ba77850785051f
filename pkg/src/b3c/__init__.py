"""Offline multi-agent actor-critic with behavior cloning and critic clipping."""

__version__ = "0.1.0"
