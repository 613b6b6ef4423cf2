"""Cooperative multi-agent BEV perception with deformable V2X attention and query-based tracking."""

__version__ = "0.1.0"
