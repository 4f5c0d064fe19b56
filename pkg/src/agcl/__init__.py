"""Attention-guided contrastive learning for multi-object segmentation,
desk scale: synthetic phantoms, a minimal autodiff core, verified losses,
two-stage training and label-fusion inference."""

__version__ = "0.1.0"
