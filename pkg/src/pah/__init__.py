"""Prototype-augmented hypernetworks for task-incremental continual learning."""

__version__ = "0.1.0"
