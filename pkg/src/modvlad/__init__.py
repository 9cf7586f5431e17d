"""Segment-level video topic localization with NeXtVLAD pooling and mixtures of models
trained by online knowledge distillation."""

__version__ = "0.1.0"
