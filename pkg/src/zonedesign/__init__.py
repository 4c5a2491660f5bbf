"""Patrol zone districting engine: spatial multi-server queueing per zone,
arrival-rate estimation, a linear workload surrogate, and beat-assignment
search under contiguity and compactness constraints."""

__version__ = "0.1.0"
