import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from geoprior.camera import Camera, Intrinsics, PoseDistribution, SphericalPose, look_at_pose
from geoprior.fields import DTYPE
from geoprior.mesh import (
    MeshError,
    MeshFinetuneConfig,
    NormalMapScene,
    TetGrid,
    TriMesh,
    init_tetgrid,
    lattice_vertex_count,
    marching_tetrahedra,
    mesh_finetune,
    read_obj,
    read_ply,
    render_normal_map,
    sample_surface_points,
    signed_volumes,
    write_obj,
    write_ply,
)
from geoprior.mesh.raster import NORMAL_BACKGROUND, normal_map_image, rasterize
from geoprior.refine import AnalyticGaussianScore, DiffusionSchedule, IdentityScene, ScoreProvider, analytic_gaussian_score

SCHED = DiffusionSchedule.scaled_linear()


def _sphere_grid(res, radius=0.8):
    grid = init_tetgrid(res)
    grid.sdf = np.linalg.norm(grid.vertices, axis=1) - radius
    return grid


def _cyclic(face):
    k = int(np.argmin(face))
    return tuple(np.roll(face, -k))


class TestTetGrid:
    def test_resolution_two(self):
        g = init_tetgrid(2)
        assert len(g.tets) == 12 * 8
        assert np.all(signed_volumes(g.vertices, g.tets) > 0)

    @pytest.mark.parametrize("r", [2, 3, 5])
    def test_vertex_count(self, r):
        g = init_tetgrid(r)
        assert len(g.vertices) == (r + 1) ** 3 + r**3 == lattice_vertex_count(r)
        assert np.all(signed_volumes(g.vertices, g.tets) > 0)

    def test_resolution_one_rejected(self):
        with pytest.raises(MeshError):
            init_tetgrid(1)

    def test_volume_fills_bounds(self):
        g = init_tetgrid(3, (-0.5, 1.5))
        assert signed_volumes(g.vertices, g.tets).sum() == pytest.approx(8.0)

    def test_conforming(self):
        # every interior triangle is shared by exactly two tets
        g = init_tetgrid(3)
        tris = np.sort(np.concatenate([g.tets[:, [1, 2, 3]], g.tets[:, [0, 2, 3]], g.tets[:, [0, 1, 3]], g.tets[:, [0, 1, 2]]]), axis=1)
        _, counts = np.unique(tris, axis=0, return_counts=True)
        assert set(counts) <= {1, 2}
        boundary = 6 * 3 * 3 * 2
        assert np.count_nonzero(counts == 1) == boundary

    def test_deformation_clamped_on_construction(self):
        g = init_tetgrid(2)
        g2 = TetGrid(g.vertices, g.tets, g.sdf, np.full_like(g.vertices, 5.0))
        assert np.all(np.linalg.norm(g2.deformation, axis=1) <= g2.max_offset + 1e-15)


class TestMarchingTets:
    def _single(self, sdf):
        verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        return marching_tetrahedra(TetGrid(verts, np.array([[0, 1, 2, 3]]), np.array(sdf, dtype=float), np.zeros((4, 3))))

    def test_single_tet_midpoints(self):
        mesh = self._single([-1.0, 1.0, 1.0, 1.0])
        assert mesh.faces.shape == (1, 3)
        want = {(0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)}
        assert {tuple(v) for v in mesh.vertices} == want
        # the normal points away from the inside vertex at the origin
        assert np.all(mesh.face_normals()[0] > 0)

    def test_two_inside_gives_quad(self):
        mesh = self._single([-1.0, -1.0, 1.0, 1.0])
        assert mesh.faces.shape == (2, 3) and len(mesh.vertices) == 4

    def test_all_positive_empty(self):
        assert self._single([1.0, 2.0, 3.0, 4.0]).is_empty
        assert marching_tetrahedra(_sphere_grid(3, radius=5.0)).is_empty
        g = init_tetgrid(3)
        g.sdf = np.ones(len(g.vertices))
        assert marching_tetrahedra(g).is_empty

    def test_sphere_vertices_near_surface(self):
        res = 24
        mesh = marching_tetrahedra(_sphere_grid(res, 1.0 - 1e-3))
        # the grid spans [-1, 1]; keep the sphere just inside it
        diag = np.sqrt(3) * 2.0 / res
        assert np.all(np.abs(np.linalg.norm(mesh.vertices, axis=1) - (1.0 - 1e-3)) < diag)
        assert mesh.is_watertight()

    def test_plane_exact(self, rng):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        g = init_tetgrid(6)
        g.sdf = g.vertices @ n - 0.1
        mesh = marching_tetrahedra(g)
        assert not mesh.is_empty
        assert np.max(np.abs(mesh.vertices @ n - 0.1)) < 1e-9

    def test_no_duplicate_vertices(self):
        g = init_tetgrid(8)
        g.sdf = np.round(np.linalg.norm(g.vertices, axis=1) - 0.5, 1)  # many exact zeros
        mesh = marching_tetrahedra(g)
        assert len(cKDTree(mesh.vertices).query_pairs(1e-12)) == 0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.booleans())
    def test_sign_flip_reverses_orientation(self, seed, with_zeros):
        g = init_tetgrid(3)
        r = np.random.default_rng(seed)
        g.sdf = r.normal(size=len(g.vertices))
        if with_zeros:
            g.sdf[r.random(len(g.vertices)) < 0.2] = 0.0
        a = marching_tetrahedra(g)
        g.sdf = -g.sdf
        b = marching_tetrahedra(g)
        assert np.array_equal(a.vertices, b.vertices)
        assert sorted(_cyclic(f) for f in a.faces) == sorted(_cyclic(f[[0, 2, 1]]) for f in b.faces)


class TestSampling:
    def test_points_inside_triangle(self):
        tri = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        pts, normals, fid = sample_surface_points(TriMesh(tri, [[0, 1, 2]]), 1000, seed=3)
        assert np.all(fid == 0)
        # barycentric coordinates from the 2D layout
        b1, b2 = pts[:, 0] / 2.0, pts[:, 1]
        b0 = 1.0 - b1 - b2
        assert np.all(np.stack([b0, b1, b2]) >= -1e-12)
        np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (1000, 1)))

    def test_area_ratio(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 1, 0]], dtype=float)
        mesh = TriMesh(verts, [[0, 1, 2], [3, 4, 5]])
        _, _, fid = sample_surface_points(mesh)
        assert len(fid) == 10_000
        k = np.count_nonzero(fid == 0)
        half = 2.576 * np.sqrt(10_000 * 0.25 * 0.75)
        assert abs(k - 2500) <= half

    def test_deterministic(self):
        mesh = marching_tetrahedra(_sphere_grid(4))
        a = sample_surface_points(mesh, 100, seed=5)
        b = sample_surface_points(mesh, 100, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_empty(self):
        with pytest.raises(MeshError):
            sample_surface_points(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))))


class TestNormalMap:
    def test_camera_facing_triangle(self):
        cam = look_at_pose(SphericalPose(0.0, 0.0, 3.0), intrinsics=Intrinsics(20.0, 16, 16))
        tri = TriMesh([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
        img = render_normal_map(tri, cam)
        hit = np.any(img != NORMAL_BACKGROUND, axis=-1)
        assert hit.sum() > 20
        np.testing.assert_allclose(img[hit], np.tile([0.5, 0.5, 1.0], (hit.sum(), 1)), atol=1e-12)

    def test_sphere_center(self):
        mesh = marching_tetrahedra(_sphere_grid(48))
        cam = look_at_pose(SphericalPose(0.0, 0.0, 3.0), intrinsics=Intrinsics(40.0, 32, 32))
        n = render_normal_map(mesh, cam)[16, 16] * 2.0 - 1.0
        assert np.linalg.norm(n - np.array([0.0, 0.0, 1.0])) < 0.05

    def test_view_frame_axes(self):
        # a side camera sees the sphere's +x side: view normal still faces it
        mesh = marching_tetrahedra(_sphere_grid(24))
        cam = look_at_pose(SphericalPose(90.0, 0.0, 3.0), intrinsics=Intrinsics(40.0, 32, 32))
        img = render_normal_map(mesh, cam) * 2.0 - 1.0
        assert img[16, 16, 2] > 0.9
        assert img[16, 24, 0] > 0.3  # right half tilts right
        assert img[8, 16, 1] > 0.3  # top half tilts up

    def test_empty_mesh(self):
        cam = look_at_pose(SphericalPose(0.0, 0.0, 3.0), intrinsics=Intrinsics(20.0, 8, 8))
        img = render_normal_map(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), cam)
        assert np.all(img == NORMAL_BACKGROUND)

    def test_nearest_surface_wins(self):
        cam = Camera(np.eye(3), np.zeros(3), 10.0, (4.0, 4.0), 8, 8)
        near = [[-5, -5, 2], [5, -5, 2], [0, 5, 2]]
        far = [[-5, -5, 4], [0, 5, 4.5], [5, -5, 4]]
        mesh = TriMesh(np.array(far + near, dtype=float), [[0, 1, 2], [3, 4, 5]])
        r = rasterize(mesh.vertices, mesh.faces, cam)
        assert np.all(r.face_id[r.face_id >= 0] == 1)
        np.testing.assert_allclose(r.depth[4, 4], 2.0)

    def test_resolution_preset(self):
        mesh = marching_tetrahedra(_sphere_grid(6))
        cam = look_at_pose(SphericalPose(0.0, 0.0, 3.0), intrinsics=Intrinsics(20.0, 16, 16))
        assert render_normal_map(mesh, cam, resolution=32).shape == (32, 32, 3)

    def test_vertex_gradient_matches_finite_differences(self, rng):
        mesh = marching_tetrahedra(_sphere_grid(6))
        cam = look_at_pose(SphericalPose(20.0, 10.0, 3.0), intrinsics=Intrinsics(30.0, 24, 24))
        verts = torch.tensor(mesh.vertices, dtype=DTYPE, requires_grad=True)
        weights = torch.as_tensor(rng.normal(size=(24, 24, 3)))
        base = rasterize(mesh.vertices, mesh.faces, cam)
        h = 1e-6
        checked = 0
        for vi in rng.choice(len(mesh.vertices), 12, replace=False):
            for axis in range(3):
                plus, minus = mesh.vertices.copy(), mesh.vertices.copy()
                plus[vi, axis] += h
                minus[vi, axis] -= h
                rp, rm = rasterize(plus, mesh.faces, cam), rasterize(minus, mesh.faces, cam)
                # interior pixels: visibility identical under both perturbations
                keep = torch.as_tensor((rp.face_id == base.face_id) & (rm.face_id == base.face_id))[..., None]
                img = normal_map_image(verts, mesh.faces, base, cam)
                (g,) = torch.autograd.grad((img * weights * keep).sum(), verts)
                with torch.no_grad():
                    fp = (normal_map_image(torch.as_tensor(plus), mesh.faces, base, cam) * weights * keep).sum()
                    fm = (normal_map_image(torch.as_tensor(minus), mesh.faces, base, cam) * weights * keep).sum()
                fd = float(fp - fm) / (2 * h)
                an = float(g[vi, axis])
                if abs(an) > 1e-6:
                    assert fd == pytest.approx(an, rel=1e-3)
                    checked += 1
        assert checked >= 6


class PixelScene(IdentityScene):
    """Harness: the normal-map pixels are themselves the ``sdf`` block."""

    def blocks(self):
        return {"sdf": [self.pixels]}


class TestFinetune:
    poses = PoseDistribution(intrinsics=Intrinsics(20.0, 8, 8))

    def test_zero_iterations(self):
        grid = _sphere_grid(3)
        cfg = MeshFinetuneConfig(geometry_iterations=0, texture_iterations=0, resolution=None)
        res = mesh_finetune(grid, None, AnalyticGaussianScore(0.5, 0.0, SCHED), AnalyticGaussianScore(0.4, 0.0, SCHED), self.poses, SCHED, cfg)
        assert np.array_equal(res.grid.sdf, grid.sdf)
        assert np.array_equal(res.grid.deformation, grid.deformation)
        assert res.geometry_trace == [] and res.texture_trace == []

    def test_identity_harness_converges(self):
        rng = np.random.default_rng(0)
        mu, x0 = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        scene = PixelScene(x0)

        class ExactNoise(ScoreProvider):
            def predict(self, x_t, t, condition=0, pose=None):
                return analytic_gaussian_score(x_t, t, scene.pixels.detach(), 0.0, SCHED)

        cfg = MeshFinetuneConfig(geometry_iterations=2000, texture_iterations=0, resolution=None, lr_sdf=0.05)
        mesh_finetune(_sphere_grid(2), None, AnalyticGaussianScore(mu, 0.0, SCHED), ExactNoise(), self.poses, SCHED, cfg, geometry_scene=scene)
        assert np.linalg.norm(scene.pixels.detach().numpy() - mu) < 0.05 * np.linalg.norm(x0 - mu)

    def test_deformation_clamped_after_run(self):
        grid = _sphere_grid(4, 0.7)
        cfg = MeshFinetuneConfig(geometry_iterations=3, texture_iterations=0, resolution=None, lr_deformation=50.0, lr_sdf=1e-3, grad_clip=0.0)
        res = mesh_finetune(grid, None, AnalyticGaussianScore(0.9, 0.0, SCHED), AnalyticGaussianScore(0.1, 0.0, SCHED), self.poses, SCHED, cfg)
        n = np.linalg.norm(res.grid.deformation, axis=1)
        assert n.max() > 0
        assert np.all(n <= res.grid.max_offset + 1e-12)

    def test_scene_gradients_reach_sdf(self):
        scene = NormalMapScene(_sphere_grid(4, 0.7))
        cam = look_at_pose(SphericalPose(30.0, 10.0, 3.0), intrinsics=Intrinsics(20.0, 16, 16))
        scene.render(cam).sum().backward()
        assert scene.sdf.grad.abs().sum() > 0 and scene.deformation.grad.abs().sum() > 0


class TestIO:
    def _mesh(self, colors=True):
        mesh = marching_tetrahedra(_sphere_grid(4))
        c = (mesh.vertices + 1.0) / 2.0 if colors else None
        return TriMesh(mesh.vertices, mesh.faces, c)

    def test_obj_round_trip(self, tmp_path):
        m = self._mesh(False)
        write_obj(tmp_path / "m.obj", m)
        back = read_obj(tmp_path / "m.obj")
        assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)

    def test_ply_round_trip(self, tmp_path):
        m = self._mesh()
        write_ply(tmp_path / "m.ply", m)
        back = read_ply(tmp_path / "m.ply")
        np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
        assert np.array_equal(back.faces, m.faces)
        np.testing.assert_allclose(back.colors, m.colors, atol=0.5 / 255 + 1e-12)

    def test_obj_quads_and_negative_indices(self, tmp_path):
        (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
        m = read_obj(tmp_path / "q.obj")
        assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_obj_bad_index(self, tmp_path):
        (tmp_path / "b.obj").write_text("v 0 0 0\nf 1 2 3\n")
        with pytest.raises(MeshError):
            read_obj(tmp_path / "b.obj")
