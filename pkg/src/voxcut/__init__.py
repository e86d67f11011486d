"""Risk-aware slab-cutting planner driven by a conditional voxel diffusion model."""

from .voxel import AttributedVoxelGrid, Axis, CutAction, Side, apply_cut, extract_slice

__version__ = "0.1.0"

__all__ = ["AttributedVoxelGrid", "Axis", "CutAction", "Side", "apply_cut", "extract_slice", "__version__"]
