"""Reconstruction of low-frequency respiratory volume (RV) and heart rate (HR)
time courses from multi-ROI fMRI time series.

Subpackages cover the full pipeline: physiological/ROI signal conditioning
(``signal_prep``), dataset formats and cross-validation splits
(``dataset_io``), a minimal reverse-mode autodiff engine (``autodiff``), the
two windowed transformer architectures (``models``), correlation-loss training
with the four transfer strategies (``training``), per-scan evaluation and
report roll-ups (``evaluation``), a synthetic dataset generator with known
latent signals (``synth``), and the ``physio-recon`` CLI (``cli``).
"""

__version__ = "0.1.0"
