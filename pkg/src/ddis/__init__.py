"""Desk-scale data-free image synthesis engine.

Samples from a small conditional diffusion model while steering every
denoising step toward a frozen classifier's batch-norm running statistics,
and optimizes a single learnable conditioning-token embedding per class by
cross-entropy against that classifier.
"""

__version__ = "0.1.0"
