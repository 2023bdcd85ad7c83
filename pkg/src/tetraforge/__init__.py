"""Mesh-guided editing of neural implicit fields.

Extract a differentiable mesh from a density field with marching
tetrahedra, bake vertex colours by volume rendering, and push edits made to
that mesh back into the field.
"""
from .fields import ImplicitField, load_field, save_field, sdf_primitive
from .tetra import Mesh, extract_mesh, march

__version__ = "0.1.0"

__all__ = ["ImplicitField", "Mesh", "extract_mesh", "load_field", "march", "save_field", "sdf_primitive"]
