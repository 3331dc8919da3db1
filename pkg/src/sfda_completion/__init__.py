"""Source-free domain adaptation for coarse-to-fine point cloud completion.

The package bundles the geometry kernels, a minimal reverse-mode autodiff
tape, the completion backbone, masking augmentations, the adaptation losses
with EMA teacher correction, a synthetic domain-shift benchmark, and the
training/evaluation harness behind the ``sfda-completion`` CLI.

Convention used throughout: all point-to-point distances are squared
Euclidean (no square roots inside Chamfer terms).
"""

__version__ = "0.1.0"
