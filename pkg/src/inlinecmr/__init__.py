"""Streaming inference server for cardiac-MR imaging chains."""

__version__ = "0.1.0"
