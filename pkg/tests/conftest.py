import numpy as np
import pytest
import torch

from geoprior.camera import Intrinsics, SphericalPose, look_at_pose
from geoprior.costvolume import GridSpec, VoxelGrid
from geoprior.fields import MLP, FieldSet, HashEncoding, PositionalEncoding


def analytic_sphere_fieldset(dims=48, half_extent=3.0, radius=1.0, pe_levels=2):
    """Field set whose SDF is the sphere distance stored in a 1-channel volume.

    The geometry decoder is a single linear layer passing the volume channel
    straight through.  An even voxel count keeps the optical axis off voxel
    planes, so the trilinear gradient is symmetric there.
    """
    spec = GridSpec.from_bounds(-half_extent, half_extent, (dims, dims, dims))
    c = spec.centers()
    data = (np.linalg.norm(c, axis=1) - radius).reshape(spec.dims + (1,))
    vg = VoxelGrid(spec, data, np.ones(spec.dims))
    enc = PositionalEncoding(pe_levels, True)
    geo = MLP([enc.dim + 1, 1], "softplus")
    with torch.no_grad():
        geo.layers[0].weight.zero_()
        geo.layers[0].weight[0, -1] = 1.0
        geo.layers[0].bias.zero_()
    h = HashEncoding(2, 2**8, 2, 4, generator=torch.Generator().manual_seed(0))
    tex = MLP([h.out_dim + 3, 8, 3], "relu", "sigmoid")
    return FieldSet(vg, geo, h, tex, enc)


def small_random_fieldset(seed=0, dims=6, channels=2, half_extent=1.0):
    """Small field set with random volume, hash tables and decoders."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    spec = GridSpec.from_bounds(-half_extent, half_extent, (dims, dims, dims))
    vg = VoxelGrid(spec, rng.normal(0.0, 0.3, spec.dims + (channels,)), np.ones(spec.dims))
    enc = PositionalEncoding(1, True)
    geo = MLP([enc.dim + channels, 8, 1], "softplus", softplus_beta=10.0)
    h = HashEncoding(2, 2**6, 2, 2, growth_factor=2.0, init_scale=0.5, generator=gen)
    tex = MLP([h.out_dim + 3, 6, 3], "relu", "sigmoid")
    with torch.no_grad():
        for mlp in (geo, tex):
            for layer in mlp.layers:
                layer.weight.normal_(0.0, 0.5, generator=gen)
                layer.bias.normal_(0.0, 0.1, generator=gen)
        # push the field's zero level set into view: a sphere-ish offset
        geo.layers[-1].bias.fill_(-0.2)
    return FieldSet(vg, geo, h, tex, enc)


def front_camera(size=64, focal=80.0, radius=3.0, azimuth=0.0, elevation=0.0):
    return look_at_pose(SphericalPose(azimuth, elevation, radius), intrinsics=Intrinsics(focal, size, size))


@pytest.fixture(scope="session")
def sphere_fieldset():
    return analytic_sphere_fieldset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_pipeline_config(seed=0):
    """Desk-scale pipeline settings: every stage runs in a few seconds."""
    from geoprior.config import PipelineConfig

    cfg = PipelineConfig(seed=seed)
    cfg.volume.dims = (12, 12, 12)
    cfg.fields.pe_levels = 2
    cfg.fields.geometry_hidden = (16,)
    cfg.fields.texture_hidden = 8
    cfg.fields.hash_levels = 2
    cfg.fields.hash_table_size = 2**8
    cfg.fields.hash_base_resolution = 4
    cfg.render.samples_per_ray = 12
    cfg.render.width = cfg.render.height = 12
    cfg.render.focal = 15.0
    cfg.refine.iterations = 3
    cfg.refine.resolution = 8
    cfg.refine.focal = 10.0
    cfg.providers.net_side = 4
    cfg.providers.net_hidden = 8
    cfg.mesh.resolution = 8
    cfg.mesh.geometry_iterations = 2
    cfg.mesh.texture_iterations = 2
    cfg.mesh.render_resolution = 0
    cfg.metrics.count = 6
    cfg.metrics.resolution = 8
    cfg.metrics.captions = ("a sphere", "a cube")
    cfg.metrics.embedding_dim = 8
    return cfg
