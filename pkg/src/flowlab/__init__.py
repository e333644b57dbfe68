"""flowlab: a desk-scale post-training lab for toy flow-matching generators."""

__version__ = "0.1.0"
