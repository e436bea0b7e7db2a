"""Synthetic inputs: a colored sphere seen from posed cameras.

``python -m geoprior.synthetic OUT_DIR [RESOLUTION]`` writes a 4-view set
(``view_NNN.png`` + ``cameras.json``) usable by ``geoprior build-volume``.
"""

from __future__ import annotations

import sys

import numpy as np
import torch

from .camera import Intrinsics, SamplingMode, SamplingStrategy, sample_source_poses
from .features import write_view_set
from .mesh.raster import color_image
from .mesh.tets import TriMesh, init_tetgrid, marching_tetrahedra


def sphere_mesh(radius: float = 0.6, resolution: int = 24, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Sphere mesh colored by position, rgb = (p / radius + 1) / 2."""
    grid = init_tetgrid(resolution, (-1.0, 1.0))
    c = np.asarray(center, dtype=np.float64)
    grid.sdf = np.linalg.norm(grid.vertices - c, axis=1) - radius
    mesh = marching_tetrahedra(grid)
    colors = np.clip(((mesh.vertices - c) / radius + 1.0) * 0.5, 0.0, 1.0)
    return TriMesh(mesh.vertices, mesh.faces, colors)


def sphere_views(resolution: int = 32, count: int = 4, seed: int = 0, radius: float = 2.5):
    """Images and poses of :func:`sphere_mesh` from MVDREAM_FOUR viewpoints."""
    strategy = SamplingStrategy(
        SamplingMode.MVDREAM_FOUR,
        count=count,
        rng_seed=seed,
        radius=radius,
        intrinsics=Intrinsics(1.25 * resolution, resolution, resolution),
    )
    views = sample_source_poses(strategy)
    mesh = sphere_mesh()
    with torch.no_grad():
        images = [color_image(mesh, v.camera).numpy() for v in views]
    return images, views


def write_sphere_view_set(directory, resolution: int = 32, count: int = 4, seed: int = 0) -> None:
    images, views = sphere_views(resolution, count, seed)
    write_view_set(directory, images, views)


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if not args:
        print("usage: python -m geoprior.synthetic OUT_DIR [RESOLUTION]", file=sys.stderr)
        return 2
    write_sphere_view_set(args[0], int(args[1]) if len(args) > 1 else 32)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
