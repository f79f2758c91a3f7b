"""One-shot video object segmentation with a differentiable ridge-regression head."""

__version__ = "0.1.0"
