"""Skewed normal mixture models and swarm distribution planning around obstacles."""

__version__ = "0.1.0"
