"""Reflection algebra, template instancing, dynamic appearance, and the
foreground training loop."""
import numpy as np
import pytest
import torch

from splatsim.errors import InvalidParameterError
from splatsim.foreground import (DynamicAppearanceModel, ForegroundObject,
                                 ForegroundTrainConfig, ObjectTrack,
                                 dynamic_sh, instantiate_template,
                                 make_car_template, quat_multiply,
                                 reflect_gaussians, reflection_matrix,
                                 train_foreground, transform_cloud)
from splatsim.gaussians import (CameraView, build_covariance, eval_sh_color,
                                normalize_quat, quat_to_matrix)
from splatsim.rasterizer import render

from conftest import make_cloud, make_view


class TestReflectionMatrix:
    def test_diagonal_axis_oracle(self):
        M = reflection_matrix(np.array([1.0, 1.0, 0.0]) / np.sqrt(2))
        expected = np.array([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.abs(M - expected).max() < 1e-12

    def test_involution_and_orthogonality(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=3)
            M = reflection_matrix(a)
            assert np.abs(M @ M - np.eye(3)).max() < 1e-9
            assert np.abs(M @ M.T - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(M) + 1.0) < 1e-9

    def test_scale_invariant(self):
        a = np.array([0.3, -0.2, 0.9])
        assert np.abs(reflection_matrix(a) - reflection_matrix(7.5 * a)).max() < 1e-12

    def test_zero_axis_rejected(self):
        with pytest.raises(InvalidParameterError):
            reflection_matrix(np.zeros(3))


class TestReflectGaussians:
    def test_involution(self, rng):
        cloud = make_cloud(24, rng, sh_degree=3)
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])):
            back = reflect_gaussians(reflect_gaussians(cloud, axis), axis)
            for a, b in [(back.mu, cloud.mu), (back.rot, cloud.rot),
                         (back.sh, cloud.sh), (back.log_scale, cloud.log_scale)]:
                assert float((a - b).abs().max()) < 1e-6

    def test_covariance_conjugation(self, rng):
        cloud = make_cloud(16, rng)
        axis = np.array([0.0, 1.0, 0.0])
        M = torch.tensor(reflection_matrix(axis))
        ref = reflect_gaussians(cloud, axis)
        cov = build_covariance(normalize_quat(cloud.rot), torch.exp(cloud.log_scale))
        cov_ref = build_covariance(normalize_quat(ref.rot), torch.exp(ref.log_scale))
        expected = M @ cov @ M.T
        assert float((cov_ref - expected).abs().max()) < 1e-9

    def test_means_mirrored(self, rng):
        cloud = make_cloud(8, rng)
        ref = reflect_gaussians(cloud, np.array([0.0, 1.0, 0.0]))
        flipped = cloud.mu * torch.tensor([1.0, -1.0, 1.0])
        assert float((ref.mu - flipped).abs().max()) < 1e-12

    def test_sh_color_oracle_sweep(self, rng):
        """Reflected coefficients evaluated along d must match the original
        evaluated along M d, for a dense direction sweep."""
        cloud = make_cloud(6, rng, sh_degree=3)
        for k, axis in enumerate(np.eye(3)):
            M = torch.tensor(reflection_matrix(axis))
            ref = reflect_gaussians(cloud, axis)
            dirs = torch.tensor(rng.normal(size=(100, 3)))
            dirs = dirs / dirs.norm(dim=-1, keepdim=True)
            for i in range(cloud.count):
                c_ref = eval_sh_color(ref.sh[i].expand(100, -1, -1), dirs, 3)
                c_orig = eval_sh_color(cloud.sh[i].expand(100, -1, -1), dirs @ M.T, 3)
                assert float((c_ref - c_orig).abs().max()) < 1e-9

    def test_differentiable(self, rng):
        cloud = make_cloud(4, rng)
        cloud.mu.requires_grad_(True)
        cloud.rot.requires_grad_(True)
        ref = reflect_gaussians(cloud, np.array([0.0, 1.0, 0.0]))
        (ref.mu.sum() + ref.rot.sum()).backward()
        assert cloud.mu.grad is not None and cloud.rot.grad is not None

    def test_non_axis_plane_rejected(self, rng):
        cloud = make_cloud(4, rng)
        with pytest.raises(InvalidParameterError):
            reflect_gaussians(cloud, np.array([1.0, 1.0, 0.0]))


def _mirror_view(view: CameraView, axis=np.array([0.0, 1.0, 0.0])) -> CameraView:
    M4 = np.eye(4)
    M4[:3, :3] = reflection_matrix(axis)
    F = np.diag([-1.0, 1.0, 1.0, 1.0])
    return CameraView(K=view.K, cam_to_world=M4 @ view.cam_to_world @ F,
                      width=view.width, height=view.height)


class TestMirrorRender:
    def test_reflected_scene_matches_horizontal_flip(self, rng):
        """Rendering the mirrored cloud through the mirrored camera is the
        horizontal flip of the original render."""
        cloud = make_cloud(30, rng, sh_degree=2)
        view = make_view()
        axis = np.array([0.0, 1.0, 0.0])
        base = render(cloud, view).image
        mirrored = render(reflect_gaussians(cloud, axis), _mirror_view(view, axis)).image
        flip = torch.flip(base, dims=[1])
        assert float((mirrored - flip).abs().max()) < 1e-4

    def test_double_mirror_identity(self, rng):
        cloud = make_cloud(12, rng)
        view = make_view()
        axis = np.array([0.0, 1.0, 0.0])
        twice = render(
            reflect_gaussians(reflect_gaussians(cloud, axis), axis),
            _mirror_view(_mirror_view(view, axis), axis)).image
        base = render(cloud, view).image
        assert float((twice - base).abs().max()) < 1e-6


class TestTemplate:
    def test_symmetric_point_set(self):
        tmpl = make_car_template(n_points=400, seed=2)
        mirrored = tmpl.points * np.array([1.0, -1.0, 1.0])
        # Every mirrored point must already be in the set.
        d = np.linalg.norm(mirrored[:, None, :] - tmpl.points[None, :, :], axis=-1)
        assert d.min(axis=1).max() < 1e-9

    def test_points_on_body_surface(self):
        from splatsim.synthetic import car_planes
        dims = (4.2, 1.9, 1.6)
        tmpl = make_car_template(n_points=300, dims=dims, seed=1)
        planes = car_planes(dims)
        sd = np.max([tmpl.points @ n - d for n, d in planes], axis=0)
        assert np.abs(sd).max() < 1e-9

    def test_instantiate_scales_to_bbox(self):
        tmpl = make_car_template(n_points=500, seed=4)
        track = ObjectTrack(object_id=3, poses={0: np.eye(4)},
                            bbox_dims=np.array([5.0, 2.2, 1.4]))
        cloud = instantiate_template(tmpl, track)
        ext = (cloud.mu.max(dim=0).values - cloud.mu.min(dim=0).values).numpy()
        assert np.abs(ext - track.bbox_dims).max() < 1e-5
        assert int(cloud.object_id.unique()) == 3

    def test_roundtrip(self, tmp_path):
        from splatsim.foreground import load_template, save_template
        tmpl = make_car_template(n_points=64, seed=0, colors=True)
        save_template(tmp_path / "t.bin", tmpl)
        back = load_template(tmp_path / "t.bin")
        assert np.abs(back.points - tmpl.points).max() < 1e-6
        assert np.abs(back.colors - tmpl.colors).max() < 1e-6


class TestTransformCloud:
    def test_inverse_recovers(self, rng):
        cloud = make_cloud(10, rng)
        pose = np.eye(4)
        th = 0.7
        pose[:3, :3] = np.array([[np.cos(th), -np.sin(th), 0],
                                 [np.sin(th), np.cos(th), 0], [0, 0, 1]])
        pose[:3, 3] = [1.0, -2.0, 0.5]
        back = transform_cloud(transform_cloud(cloud, pose), np.linalg.inv(pose))
        assert float((back.mu - cloud.mu).abs().max()) < 1e-9
        Ra = quat_to_matrix(normalize_quat(back.rot))
        Rb = quat_to_matrix(normalize_quat(cloud.rot))
        assert float((Ra - Rb).abs().max()) < 1e-9

    def test_rotation_composes(self, rng):
        cloud = make_cloud(6, rng)
        pose = np.eye(4)
        th = 1.1
        pose[:3, :3] = np.array([[1, 0, 0],
                                 [0, np.cos(th), -np.sin(th)],
                                 [0, np.sin(th), np.cos(th)]])
        moved = transform_cloud(cloud, pose)
        R_pose = torch.tensor(pose[:3, :3])
        expected = R_pose @ quat_to_matrix(normalize_quat(cloud.rot))
        got = quat_to_matrix(normalize_quat(moved.rot))
        assert float((got - expected).abs().max()) < 1e-9

    def test_quat_multiply_identity(self, rng):
        q = normalize_quat(torch.tensor(rng.normal(size=(5, 4))))
        ident = torch.tensor([1.0, 0, 0, 0], dtype=torch.float64).expand(5, 4)
        assert float((quat_multiply(ident, q) - q).abs().max()) < 1e-12


class TestDynamicAppearance:
    def test_zero_init_residual(self, rng):
        cloud = make_cloud(8, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=5, sh_degree=1, seed=3)
        delta, sh = dynamic_sh(model, 2, cloud)
        assert float(delta.abs().max()) == 0.0
        assert torch.equal(sh, cloud.sh)

    def test_out_of_range_clamps_at_inference(self, rng):
        cloud = make_cloud(4, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=3, sh_degree=1)
        model.w3 += 0.01
        d_clamped, _ = dynamic_sh(model, 99, cloud)
        d_last, _ = dynamic_sh(model, 2, cloud)
        assert model.clamped_query
        assert torch.equal(d_clamped, d_last)

    def test_out_of_range_errors_in_training(self, rng):
        cloud = make_cloud(4, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=3, sh_degree=1)
        with pytest.raises(InvalidParameterError):
            dynamic_sh(model, 3, cloud, training=True)

    def test_depends_on_frame_and_position(self, rng):
        cloud = make_cloud(6, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=4, sh_degree=1, seed=1,
                                       dtype=torch.float64)
        with torch.no_grad():
            model.w3 += 0.05 * torch.randn(
                *model.w3.shape, generator=torch.Generator().manual_seed(9),
                dtype=torch.float64)
        d0 = model.residual(0, cloud.mu, cloud.sh)
        d1 = model.residual(1, cloud.mu, cloud.sh)
        assert float((d0 - d1).abs().max()) > 1e-6
        d_shift = model.residual(0, cloud.mu + 0.5, cloud.sh)
        assert float((d0 - d_shift).abs().max()) > 1e-6

    def test_gradients_reach_all_parameters(self, rng):
        cloud = make_cloud(5, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=3, sh_degree=1,
                                       dtype=torch.float64)
        for _, p in model.named_tensors():
            p.requires_grad_(True)
        delta = model.residual(1, cloud.mu, cloud.sh)
        # Push through a nonlinearity so second-layer grads are nonzero.
        (delta ** 2).sum().backward()
        grads = {name: p.grad for name, p in model.named_tensors()}
        assert grads["w3"] is not None and grads["b3"] is not None
        assert grads["embeddings"] is not None

    def test_residual_fd_gradient(self, rng):
        from conftest import fd_check
        cloud = make_cloud(4, rng, sh_degree=1)
        model = DynamicAppearanceModel(n_frames=2, sh_degree=1, seed=2,
                                       dtype=torch.float64)
        with torch.no_grad():
            for _, p in model.named_tensors():
                p += 0.05 * torch.randn(*p.shape,
                                        generator=torch.Generator().manual_seed(11),
                                        dtype=torch.float64)
        w = torch.randn(*cloud.sh.shape, generator=torch.Generator().manual_seed(4),
                        dtype=torch.float64)

        def loss_fn():
            return (model.residual(0, cloud.mu, cloud.sh) * w).sum()

        model.w2.requires_grad_(True)
        analytic = torch.autograd.grad(loss_fn(), model.w2)[0]
        model.w2.requires_grad_(False)
        checked, passed, ok = fd_check(loss_fn, model.w2, analytic,
                                       max_coords=60, rng=rng)
        assert ok, f"{passed}/{checked} FD coords matched"


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    from splatsim.synthetic import SceneConfig, VehicleSpec, generate_synthetic_scene
    cfg = SceneConfig(seed=11, width=64, height=64, n_frames=3,
                      vehicles=[VehicleSpec(object_id=1, start_xy=(8.0, -1.5),
                                            velocity_xy=(0.0, 0.0), yaw=0.0)])
    return generate_synthetic_scene(cfg, tmp_path_factory.mktemp("fgscene"))


class TestTraining:
    def test_trains_and_improves(self, scene):
        from splatsim.losses import masked_l1
        cfg = ForegroundTrainConfig(iters=60, seed=0, densify=None)
        template = make_car_template(n_points=600, seed=0)
        objs = train_foreground(scene, cfg, template=template)
        assert list(objs) == [1]
        obj = objs[1]
        f = scene.train_frames()[0]
        _, inst = scene.load_masks(f)
        mask = torch.tensor(inst == 1)
        gt = scene.load_image(f)
        with torch.no_grad():
            world = transform_cloud(obj.appearance.apply(obj.cloud, f.index),
                                    obj.track.poses[f.index])
            err_trained = float(masked_l1(gt, render(world, scene.view(f)).image, mask))
            fresh = transform_cloud(instantiate_template(template, obj.track, 1),
                                    obj.track.poses[f.index])
            err_init = float(masked_l1(gt, render(fresh, scene.view(f)).image, mask))
        assert err_trained < err_init

    def test_invisible_object_skipped(self, scene):
        far = np.eye(4)
        far[:3, 3] = [0.0, 0.0, -500.0]
        track = ObjectTrack(object_id=77, poses={0: far},
                            bbox_dims=np.array([4.0, 2.0, 1.5]))
        scene.tracks[77] = track
        try:
            cfg = ForegroundTrainConfig(iters=5, seed=0, densify=None)
            objs = train_foreground(scene, cfg,
                                    template=make_car_template(n_points=100))
            assert 77 not in objs and 1 in objs
        finally:
            del scene.tracks[77]
