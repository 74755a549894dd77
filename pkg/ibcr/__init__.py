"""Transparent checkpoint-restart over a simulated RDMA verbs fabric."""

__version__ = "0.1.0"
