"""Mesh fine-tuning: normal-map geometry phase, then color texture phase.

Both phases reuse the distillation loop of :mod:`geoprior.refine`; only the
scene (what is rendered and which parameter blocks it exposes) changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..camera import Camera, PoseDistribution
from ..fields import DTYPE, FieldSet
from ..refine.loop import LRSchedule, TraceRow, lr_schedule, run_vsd
from ..refine.providers import ScoreProvider
from ..refine.schedule import DiffusionSchedule
from .raster import color_image, normal_map_image, rasterize
from .tets import TetGrid, TriMesh, clamp_deformation, edge_crossings, marching_tetrahedra, surface_topology

RESOLUTION_PRESETS = (512, 1024)


def _resize(camera: Camera, resolution: int | None) -> Camera:
    if resolution is None or resolution == camera.width:
        return camera
    return camera.resized(resolution, round(resolution * camera.height / camera.width))


class NormalMapScene:
    """Normal maps of the mesh extracted from a tet grid.

    Blocks are ``sdf`` and ``deformation``.  Topology is recomputed from
    the current signs at every render; vertex positions are the edge zero
    crossings, differentiable in both blocks.
    """

    def __init__(self, grid: TetGrid, resolution: int | None = None):
        self.rest = torch.as_tensor(grid.vertices, dtype=DTYPE)
        self.tets = grid.tets
        self.max_offset = grid.max_offset.copy()
        self.sdf = torch.nn.Parameter(torch.as_tensor(grid.sdf, dtype=DTYPE).clone())
        self.deformation = torch.nn.Parameter(torch.as_tensor(grid.deformation, dtype=DTYPE).clone())
        self.resolution = resolution

    def blocks(self):
        return {"sdf": [self.sdf], "deformation": [self.deformation]}

    def mesh_tensors(self) -> tuple[torch.Tensor, np.ndarray]:
        pos = self.rest + self.deformation
        topo = surface_topology(pos.detach().numpy(), self.sdf.detach().numpy(), self.tets)
        edges = torch.as_tensor(topo.edges)
        return edge_crossings(pos, self.sdf, edges), topo.faces

    def render(self, camera: Camera) -> torch.Tensor:
        camera = _resize(camera, self.resolution)
        verts, faces = self.mesh_tensors()
        raster = rasterize(verts.detach().numpy(), faces, camera)
        return normal_map_image(verts, faces, raster, camera)

    def clamp(self) -> None:
        with torch.no_grad():
            self.deformation.copy_(clamp_deformation(self.deformation, self.max_offset))

    def to_grid(self) -> TetGrid:
        return TetGrid(
            self.rest.numpy().copy(),
            self.tets.copy(),
            self.sdf.detach().numpy().copy(),
            self.deformation.detach().numpy().copy(),
            self.max_offset.copy(),
        )


class TextureScene:
    """Color renders of a fixed mesh shaded by the field's texture decoder.

    Blocks are ``hash`` and ``texture``; the geometry is frozen.
    """

    def __init__(self, mesh: TriMesh, fieldset: FieldSet, resolution: int | None = None, background=(1.0, 1.0, 1.0)):
        self.mesh = mesh
        self.fieldset = fieldset
        self.resolution = resolution
        self.background = background

    def blocks(self):
        b = self.fieldset.parameter_blocks()
        return {"hash": b["hash"], "texture": b["texture"]}

    def render(self, camera: Camera) -> torch.Tensor:
        camera = _resize(camera, self.resolution)
        return color_image(self.mesh, camera, self.fieldset.color, self.background)


@dataclass
class MeshFinetuneConfig:
    geometry_iterations: int = 500
    texture_iterations: int = 500
    resolution: int | None = 512
    lr_sdf: float = 1e-3
    lr_deformation: float = 1e-3
    lr: LRSchedule = field(default_factory=LRSchedule)
    lr_texture_mlp: float = 1e-3
    lr_lora: float = 1e-3
    seed: int = 0
    condition: int = 0
    batch: int = 1
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.geometry_iterations < 0 or self.texture_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.resolution is not None and self.resolution < 1:
            raise ValueError("resolution must be positive")
        if min(self.lr_sdf, self.lr_deformation, self.lr_texture_mlp, self.lr_lora) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class MeshFinetuneResult:
    grid: TetGrid
    mesh: TriMesh
    fieldset: FieldSet | None
    geometry_trace: list[TraceRow]
    texture_trace: list[TraceRow]


def mesh_finetune(
    grid: TetGrid,
    fieldset: FieldSet | None,
    pretrained: ScoreProvider,
    lora: ScoreProvider,
    poses: PoseDistribution,
    schedule: DiffusionSchedule,
    config: MeshFinetuneConfig,
    geometry_scene=None,
    texture_scene=None,
) -> MeshFinetuneResult:
    """Phase A optimizes the grid through normal maps; phase B optimizes the
    texture through color renders of the phase-A mesh.

    ``geometry_scene`` and ``texture_scene`` override the default scenes
    (used by test harnesses).  Phase B is skipped without a field set.
    """
    geo = geometry_scene or NormalMapScene(grid, config.resolution)
    common = dict(
        condition=config.condition,
        batch=config.batch,
        grad_clip=config.grad_clip,
    )
    rates_a = {"sdf": config.lr_sdf, "deformation": config.lr_deformation}
    trace_a = run_vsd(
        geo,
        pretrained,
        lora,
        poses,
        schedule,
        config.geometry_iterations,
        lambda step: rates_a,
        config.lr_lora,
        seed=config.seed,
        after_step=getattr(geo, "clamp", None),
        **common,
    )
    out_grid = geo.to_grid() if hasattr(geo, "to_grid") else grid.copy()
    mesh = marching_tetrahedra(out_grid)

    trace_b: list[TraceRow] = []
    if fieldset is not None or texture_scene is not None:
        tex = texture_scene or TextureScene(mesh, fieldset, config.resolution)
        total = max(config.texture_iterations, 1)

        def rates_b(step):
            _, eta2 = lr_schedule(step, total, config.lr)
            return {"hash": eta2, "texture": config.lr_texture_mlp}

        trace_b = run_vsd(
            tex,
            pretrained,
            lora,
            poses,
            schedule,
            config.texture_iterations,
            rates_b,
            config.lr_lora,
            seed=config.seed + 1,
            **common,
        )
    return MeshFinetuneResult(out_grid, mesh, fieldset, trace_a, trace_b)
