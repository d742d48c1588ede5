"""Desk-scale 3D volumetric segmentation toolkit.

Builds on a self-contained reverse-mode autodiff core: dual-patch
gated U-nets, a two-stage guidance cascade, sliding-window fusion,
class-imbalance losses, and an analytic training-memory ledger.
"""

__version__ = "0.1.0"
