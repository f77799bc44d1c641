"""Decision-tree posterior sampling with a GFlowNet policy."""

__version__ = "0.1.0"
