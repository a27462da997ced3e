"""Discrete-event laboratory for asynchronous SGD with heterogeneous workers and data."""

__version__ = "0.1.0"
