"""Task-oriented grasp evaluation with knowledge-graph-conditioned GCNs."""

__version__ = "0.1.0"
