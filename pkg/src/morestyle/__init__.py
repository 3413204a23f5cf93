"""Fourier-relaxed adversarial style augmentation for single-source domain generalization.

A toy-scale lab: spectral primitives, the FSD and UIU losses, MC-dropout
uncertainty, the adversarial training loop, FDA/FACT baselines and a
synthetic nested-ellipse benchmark.
"""
__version__ = "0.1.0"
