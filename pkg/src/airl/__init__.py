"""Desk-scale laboratory for augmentation-invariant self-supervised learning.

Implements four siamese SSL frameworks (MoCo v2, MoCo v2+, S-MoCo v2+, BYOL)
with hand-derived gradients on a small MLP encoder, the matching augmentation
pipeline, SGD and LARS optimizers, checkpoint surgery (weight-norm rescaling)
and representation diagnostics (linear CKA, weight norms, collapse metrics).
Everything is float64, seed-deterministic, and sized to run in minutes on
synthetic data.
"""

__version__ = "0.1.0"
