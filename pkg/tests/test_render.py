import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_sphere_fieldset, front_camera, small_random_fieldset
from geoprior.camera import Camera, Intrinsics, SphericalPose, look_at_pose
from geoprior.fields import DTYPE
from geoprior.render import (
    RenderConfig,
    composite,
    generate_rays,
    neus_weights,
    read_pfm,
    render_image,
    rgb_loss,
    sample_points,
    write_pfm,
)


class TestRays:
    def test_principal_pixel_is_forward(self):
        cam = look_at_pose(SphericalPose(40.0, 20.0, 3.0), intrinsics=Intrinsics(50.0, 64, 48))
        _, dirs = generate_rays(cam)
        d = dirs[24 * 64 + 32]
        np.testing.assert_allclose(d, cam.forward, atol=1e-12)

    def test_corner_matches_hand_unprojection(self):
        cam = Camera(np.eye(3), np.array([0.0, 0.0, 0.0]), 10.0, (4.0, 3.0), 8, 6)
        origins, dirs = generate_rays(cam)
        want = np.array([(0 - 4.0) / 10.0, (0 - 3.0) / 10.0, 1.0])
        np.testing.assert_allclose(dirs[0], want / np.linalg.norm(want), atol=1e-15)
        want = np.array([(7 - 4.0) / 10.0, (5 - 3.0) / 10.0, 1.0])
        np.testing.assert_allclose(dirs[-1], want / np.linalg.norm(want), atol=1e-15)
        assert np.all(origins == 0.0)

    def test_unit_length(self):
        _, dirs = generate_rays(front_camera(16))
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-14)


class TestSamplePoints:
    def test_two_samples(self):
        t, _ = sample_points(0.5, 4.5, 2)
        assert list(t) == [0.5, 4.5]

    def test_five_samples(self):
        t, d = sample_points(1.0, 3.0, 5)
        assert list(t) == [1.0, 1.5, 2.0, 2.5, 3.0]
        assert list(d) == [0.5] * 4

    def test_stratified(self):
        t, _ = sample_points(1.0, 3.0, 8, stratified=True, rng=3, batch=100)
        edges = np.linspace(1.0, 3.0, 9)
        assert np.all((t >= edges[:-1]) & (t < edges[1:]))
        assert np.all(np.diff(t, axis=-1) > 0)
        t2, _ = sample_points(1.0, 3.0, 8, stratified=True, rng=3, batch=100)
        assert np.array_equal(t, t2)

    def test_too_few(self):
        with pytest.raises(ValueError):
            sample_points(0.0, 1.0, 1)


class TestWeights:
    def test_constant_positive(self):
        w = neus_weights(torch.full((10,), 0.5), 50.0)
        assert torch.all(w == 0.0)

    def test_sharp_crossing(self):
        w = neus_weights(torch.tensor([1.0, -1.0], dtype=DTYPE), 100.0)
        assert w.shape == (1,)
        assert float(w[0]) == pytest.approx(1.0, abs=1e-12)

    def test_receding_surface(self):
        w = neus_weights(torch.linspace(-1.0, 1.0, 9, dtype=DTYPE), 20.0)
        assert torch.all(w == 0.0)

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=40),
        st.floats(0.1, 1000.0),
    )
    def test_conservation(self, sdf, k):
        w = neus_weights(torch.tensor(sdf, dtype=DTYPE), k)
        assert torch.all(w >= 0.0)
        assert float(w.sum()) <= 1.0 + 1e-12

    def test_differentiable(self):
        s = torch.tensor([0.3, 0.05, -0.2], dtype=DTYPE, requires_grad=True)
        neus_weights(s, 10.0).sum().backward()
        assert torch.isfinite(s.grad).all() and s.grad.abs().sum() > 0


class TestComposite:
    def test_single_full_weight(self):
        out = composite([1.0], [[0.2, 0.4, 0.6]], [2.0])
        np.testing.assert_allclose(out["color"].numpy(), [0.2, 0.4, 0.6])
        assert float(out["opacity"]) == 1.0

    def test_zero_weights(self):
        out = composite([0.0, 0.0], [[1, 0, 0], [0, 1, 0]], [1.0, 2.0], background=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(out["color"].numpy(), [0.1, 0.2, 0.3])
        assert float(out["opacity"]) == 0.0

    def test_two_weights(self):
        out = composite([0.3, 0.5], [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [1.0, 2.0])
        np.testing.assert_allclose(out["color"].numpy(), [0.3 + 0.2, 0.2, 0.5 + 0.2], atol=1e-15)
        assert float(out["depth"]) == pytest.approx((0.3 * 1.0 + 0.5 * 2.0) / 0.8)

    def test_normal_normalized(self):
        out = composite([0.5, 0.5], np.zeros((2, 3)), [1.0, 2.0], gradients=[[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]])
        np.testing.assert_allclose(out["normal"].numpy(), [0.0, 0.0, 1.0])


class TestRenderImage:
    def test_sphere_depth_and_normal(self, sphere_fieldset):
        cfg = RenderConfig(samples_per_ray=128)
        cam = front_camera(64, 80.0)
        with torch.no_grad():
            out = render_image(sphere_fieldset, cam, cfg).numpy()
        tol = 2 * (cfg.far - cfg.near) / cfg.samples_per_ray
        assert abs(out["depth"][32, 32] - 2.0) <= tol
        n = out["normal"][32, 32]
        # the world normal at the front pole is +z, pointing at the camera
        assert np.linalg.norm(n - np.array([0.0, 0.0, 1.0])) < 0.02
        assert out["opacity"][32, 32] > 0.99
        assert out["opacity"][0, 0] < 1e-6

    def test_empty_scene(self):
        fs = analytic_sphere_fieldset(dims=8)
        with torch.no_grad():
            fs.volume.fill_(1.0)
            out = render_image(fs, front_camera(8, 10.0), RenderConfig(samples_per_ray=16, background=(0.2, 0.3, 0.4))).numpy()
        assert np.all(out["opacity"] == 0.0)
        np.testing.assert_allclose(out["color"], np.broadcast_to([0.2, 0.3, 0.4], (8, 8, 3)), atol=1e-15)

    def test_resolution_invariance(self, sphere_fieldset):
        cfg = RenderConfig(samples_per_ray=64)
        with torch.no_grad():
            lo = render_image(sphere_fieldset, front_camera(64, 80.0), cfg, with_normals=False).numpy()["depth"]
            hi = render_image(sphere_fieldset, front_camera(128, 160.0), cfg, with_normals=False).numpy()["depth"]
        tol = 2 * (cfg.far - cfg.near) / cfg.samples_per_ray
        # pixel (i, j) at 64 covers the same direction as (2i, 2j) at 128
        for i, j in [(32, 32), (20, 30), (40, 36)]:
            assert abs(lo[i, j] - hi[2 * i, 2 * j]) <= tol

    def test_resolution_override(self, sphere_fieldset):
        with torch.no_grad():
            out = render_image(sphere_fieldset, front_camera(64, 80.0), RenderConfig(samples_per_ray=8, resolution=16), with_normals=False)
        assert out.color.shape == (16, 16, 3)

    def test_deterministic(self):
        fs = small_random_fieldset(0)
        cfg = RenderConfig(samples_per_ray=16, stratified=True, seed=4, near=1.5, far=4.5)
        cam = front_camera(12, 12.0)
        with torch.no_grad():
            a = render_image(fs, cam, cfg).numpy()
            b = render_image(fs, cam, cfg).numpy()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_thread_count_tolerance(self):
        fs = small_random_fieldset(0)
        cfg = RenderConfig(samples_per_ray=16, near=1.5, far=4.5)
        cam = front_camera(12, 12.0)
        before = torch.get_num_threads()
        try:
            torch.set_num_threads(1)
            with torch.no_grad():
                a = render_image(fs, cam, cfg).numpy()
            torch.set_num_threads(2)
            with torch.no_grad():
                b = render_image(fs, cam, cfg).numpy()
        finally:
            torch.set_num_threads(before)
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-10, atol=1e-12)

    def test_pixel_gradients_match_finite_differences(self, rng):
        fs = small_random_fieldset(6, dims=5)
        cfg = RenderConfig(samples_per_ray=12, near=1.8, far=4.2, sharpness=8.0)
        cam = front_camera(4, 3.0)
        out = render_image(fs, cam, cfg)
        pixel = out.color[1, 2].sum() + out.depth[2, 1]
        params = [fs.volume, fs.hash.tables, fs.texture.layers[0].weight]
        grads = torch.autograd.grad(pixel, params)

        def value():
            with torch.no_grad():
                o = render_image(fs, cam, cfg)
            return float(o.color[1, 2].sum() + o.depth[2, 1])

        h = 1e-6
        for p, g in zip(params, grads):
            flat = g.reshape(-1)
            for idx in torch.topk(flat.abs(), 3).indices.tolist():
                with torch.no_grad():
                    base = p.view(-1)[idx].item()
                    p.view(-1)[idx] = base + h
                    plus = value()
                    p.view(-1)[idx] = base - h
                    minus = value()
                    p.view(-1)[idx] = base
                assert (plus - minus) / (2 * h) == pytest.approx(flat[idx].item(), rel=1e-4, abs=1e-9)


class TestLoss:
    def test_identical(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        assert float(rgb_loss(img, img)) == 0.0

    def test_four_unit_differences(self):
        a = np.zeros((2, 2, 3))
        b = a.copy()
        b[0, 0, 0] = b[0, 1, 1] = b[1, 0, 2] = b[1, 1, 0] = 1.0
        assert float(rgb_loss(a, b)) == 2.0

    def test_gradient(self, rng):
        target = rng.random((3, 3, 3))
        pred = torch.tensor(rng.random((3, 3, 3)), requires_grad=True)
        loss = rgb_loss(target, pred)
        loss.backward()
        want = (pred.detach().numpy() - target) / loss.item()
        np.testing.assert_allclose(pred.grad.numpy(), want, atol=1e-12)
        h = 1e-6
        p = pred.detach().numpy().copy()
        p[1, 2, 0] += h
        up = float(rgb_loss(target, p))
        p[1, 2, 0] -= 2 * h
        down = float(rgb_loss(target, p))
        assert (up - down) / (2 * h) == pytest.approx(want[1, 2, 0], rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rgb_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_pfm_round_trip(tmp_path, rng):
    d = rng.random((5, 7)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)
