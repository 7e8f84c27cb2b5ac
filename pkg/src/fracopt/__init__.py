"""Adaptive FEM for bilinear optimal control constrained by the integral
fractional Laplacian."""

from .mesh import (Mesh, AuxiliaryShell, initial_mesh, refine, uniform_refine,
                   element_patch, skeleton_distance, local_mesh_width,
                   shape_regularity, auxiliary_shell, save_mesh, load_mesh)

__all__ = [
    "Mesh", "AuxiliaryShell", "initial_mesh", "refine", "uniform_refine",
    "element_patch", "skeleton_distance", "local_mesh_width",
    "shape_regularity", "auxiliary_shell", "save_mesh", "load_mesh",
]

__version__ = "0.1.0"
