"""Continuous level-of-detail 3D Gaussian head avatars.

A multi-level learnable UV feature field is resampled at any resolution
between its smallest and largest level; a five-head neural decoder turns the
per-texel latents into Gaussian attributes; a differentiable CPU splatting
renderer draws them. Training is end-to-end with hand-written gradients.
"""

__version__ = "0.1.0"
