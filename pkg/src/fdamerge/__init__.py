"""Functional dual anchors: input-space model merging workbench.

Two-stage pipeline: construct synthetic per-block anchors whose induced
parameter gradients align with task vectors, then adapt a model on those
anchors to merge task-specific knowledge. Includes an exact linear-model
verification bench, spectral/subspace analyses, and an experiment harness.
"""

__version__ = "0.1.0"
