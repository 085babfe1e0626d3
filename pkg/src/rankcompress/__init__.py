"""Low-rank compression of dense classifiers via beam-searched ranks and modified stable rank training."""

__version__ = "0.1.0"
