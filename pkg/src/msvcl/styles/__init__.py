"""Vendor styles: parametric engine, blending and per-image style pools."""

from .parametric import (DOMAINS, IDENTITY, SEEN, StyleDomainId, StyleParams, apply_style, blend,
                         invert_style, style_table, transfer)
from .pool import ALPHA_GRID, INTERIOR_ALPHAS, BlendSpec, StylePool, pool_size, sample_variant

__all__ = [
    "ALPHA_GRID", "DOMAINS", "IDENTITY", "INTERIOR_ALPHAS", "SEEN", "BlendSpec",
    "StyleDomainId", "StyleParams", "StylePool", "apply_style", "blend", "invert_style",
    "pool_size", "sample_variant", "style_table", "transfer",
]
