"""Desk-scale lab for uncertainty-guided diffusion augmentation.

Trains a toy conditional denoiser and a toy per-pixel classifier on
procedurally generated scenes, steers backward diffusion with
acquisition-style losses (entropy, cross-entropy, MC-dropout disagreement),
and measures whether the steered synthetic data improves downstream
segmentation.
"""

__version__ = "0.1.0"
