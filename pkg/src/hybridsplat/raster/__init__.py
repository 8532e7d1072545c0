"""Tile-based hybrid rasterizer (forward, grouped sort, analytic backward)."""
from .projection import FAMILY_FREE, FAMILY_INLIER, FAMILY_SKY, Splats, project
from .render import (GradientBuffer, RenderOutput, backward, composite, hit_counts, render,
                     sort_comparisons, sort_grouped, sort_unified)

__all__ = [
    "FAMILY_FREE", "FAMILY_INLIER", "FAMILY_SKY", "Splats", "project",
    "GradientBuffer", "RenderOutput", "backward", "composite", "hit_counts", "render",
    "sort_comparisons", "sort_grouped", "sort_unified",
]
