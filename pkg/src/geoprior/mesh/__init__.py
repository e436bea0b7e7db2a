"""Tetrahedral extraction, mesh rasterization, mesh I/O and fine-tuning."""

from .finetune import MeshFinetuneConfig, MeshFinetuneResult, NormalMapScene, TextureScene, mesh_finetune
from .io import read_mesh, read_obj, read_ply, write_obj, write_ply
from .raster import Rasterization, color_image, normal_map_image, rasterize, render_normal_map
from .tets import (
    MeshError,
    TetGrid,
    TriMesh,
    canonical_face_order,
    init_tetgrid,
    lattice_vertex_count,
    marching_tetrahedra,
    sample_surface_points,
    signed_volumes,
)

__all__ = [
    "MeshError",
    "MeshFinetuneConfig",
    "MeshFinetuneResult",
    "NormalMapScene",
    "Rasterization",
    "TetGrid",
    "TextureScene",
    "TriMesh",
    "canonical_face_order",
    "color_image",
    "init_tetgrid",
    "lattice_vertex_count",
    "marching_tetrahedra",
    "mesh_finetune",
    "normal_map_image",
    "rasterize",
    "read_mesh",
    "read_obj",
    "read_ply",
    "render_normal_map",
    "sample_surface_points",
    "signed_volumes",
    "write_obj",
    "write_ply",
]
