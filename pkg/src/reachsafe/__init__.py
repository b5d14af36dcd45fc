"""Learned HOCBF contender models inside HJ reachability safety concepts."""

__version__ = "0.1.0"
