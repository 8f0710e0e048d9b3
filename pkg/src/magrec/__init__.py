"""Multi-domain graph-based sequential CTR recommender."""

__version__ = "0.1.0"
