"""Geometry-prior text-to-3D pipeline at desk scale.

Stages: posed source views, a variance cost volume, neural fields decoded
from that volume, score-distillation refinement, tetrahedral mesh
extraction and fine-tuning, and an evaluation harness.
"""

__version__ = "0.1.0"
