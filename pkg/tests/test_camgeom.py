import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from cuedepth.camgeom import (
    DepthMap,
    Intrinsics,
    PoseSE3,
    SampleGrid,
    axisangle_to_matrix,
    bilinear_sample,
    matrix_to_axisangle,
    pose_compose,
    pose_invert,
    reproject,
    warp,
)
from cuedepth.synthdata import brute_force_reproject

SMALL = Intrinsics(7.2, 7.2, 3.5, 3.5, 8, 8)


def random_pose(rng, rotation_scale=0.1, translation_scale=0.2, batch=None) -> PoseSE3:
    shape = (3,) if batch is None else (batch, 3)
    return PoseSE3(
        torch.from_numpy(rng.normal(0, rotation_scale, shape)),
        torch.from_numpy(rng.normal(0, translation_scale, shape)),
    )


class TestRotations:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(0, 1.0, (50, 3))
        expected = Rotation.from_rotvec(vectors).as_matrix()
        result = axisangle_to_matrix(torch.from_numpy(vectors)).numpy()
        np.testing.assert_allclose(result, expected, atol=1e-12)

    def test_tiny_angle_uses_series(self):
        vector = np.array([3e-10, -4e-10, 0.0])
        result = axisangle_to_matrix(torch.from_numpy(vector)).numpy()
        np.testing.assert_allclose(result, Rotation.from_rotvec(vector).as_matrix(), atol=1e-15)

    def test_zero_rotation_has_finite_gradient(self):
        vector = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        axisangle_to_matrix(vector).sum().backward()
        assert torch.isfinite(vector.grad).all()

    def test_orthonormal(self):
        rng = np.random.default_rng(1)
        R = axisangle_to_matrix(torch.from_numpy(rng.normal(0, 1.5, (20, 3))))
        eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
        torch.testing.assert_close(R.transpose(-1, -2) @ R, eye, atol=1e-6, rtol=0)
        torch.testing.assert_close(torch.linalg.det(R), torch.ones(20, dtype=torch.float64))

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(2)
        directions = rng.normal(size=(30, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        vectors = torch.from_numpy(directions * rng.uniform(0.0, 3.0, (30, 1)))
        torch.testing.assert_close(matrix_to_axisangle(axisangle_to_matrix(vectors)), vectors)


class TestPoseSE3:
    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pose = random_pose(rng, 0.5, 1.0)
            result = pose_compose(pose, pose_invert(pose))
            torch.testing.assert_close(result.as_vector(), torch.zeros(6, dtype=torch.float64), atol=1e-6, rtol=0)

    def test_chain_matches_matrix_products(self):
        rng = np.random.default_rng(4)
        poses = [random_pose(rng, 0.3, 1.0) for _ in range(4)]
        chained = poses[0]
        product = poses[0].matrix()
        for pose in poses[1:]:
            chained = chained.compose(pose)
            product = product @ pose.matrix()
        torch.testing.assert_close(chained.matrix(), product, atol=1e-9, rtol=0)

    def test_vector_layout(self):
        vector = torch.arange(6, dtype=torch.float64)
        pose = PoseSE3.from_vector(vector)
        torch.testing.assert_close(pose.rotation, vector[:3])
        torch.testing.assert_close(pose.translation, vector[3:])
        torch.testing.assert_close(pose.as_vector(), vector)

    def test_from_matrix(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng, 0.4, 1.0, batch=3)
        rebuilt = PoseSE3.from_matrix(pose.matrix())
        torch.testing.assert_close(rebuilt.as_vector(), pose.as_vector())

    def test_identity(self):
        pose = PoseSE3.identity(batch=2, dtype=torch.float64)
        assert pose.rotation.shape == (2, 3)
        torch.testing.assert_close(pose.matrix(), torch.eye(4, dtype=torch.float64).expand(2, 4, 4))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            PoseSE3(torch.zeros(3), torch.zeros(2, 3))
        with pytest.raises(ValueError):
            PoseSE3.from_vector(torch.zeros(5))


class TestIntrinsics:
    def test_principal_point_inside_image(self):
        with pytest.raises(ValueError):
            Intrinsics(10.0, 10.0, 8.0, 3.0, 8, 8)

    def test_scaled_levels(self):
        camera = Intrinsics(57.6, 57.6, 31.5, 31.5, 64, 64).scaled(2)
        assert (camera.width, camera.height) == (16, 16)
        assert camera.fx == pytest.approx(14.4)
        assert camera.cx == pytest.approx(7.875)

    def test_scaled_requires_exact_level(self):
        with pytest.raises(ValueError):
            Intrinsics(10.0, 10.0, 4.0, 4.0, 10, 10).scaled(2)

    def test_resized(self):
        camera = Intrinsics(721.5, 721.5, 609.6, 172.9, 1242, 375).resized(192, 640)
        assert camera.fx == pytest.approx(721.5 * 640 / 1242)
        assert camera.fy == pytest.approx(721.5 * 192 / 375)
        assert (camera.width, camera.height) == (640, 192)

    def test_pyramid(self):
        stack = Intrinsics(57.6, 57.6, 31.5, 31.5, 64, 64).pyramid(4, torch.float64)
        assert stack.shape == (4, 3, 3)
        torch.testing.assert_close(stack[3, 0, 0], torch.tensor(7.2, dtype=torch.float64))


class TestDepthMap:
    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            DepthMap(np.array([[1.0, 0.0]]))

    def test_invalid_pixels_are_not_checked(self):
        depth = DepthMap(np.array([[1.0, 0.0]]), np.array([[True, False]]))
        assert depth.valid.sum() == 1

    def test_accepts_tensors(self):
        assert DepthMap(torch.ones(4, 4)).valid.all()


class TestReproject:
    def test_identity_pose_gives_pixel_grid(self):
        depth = torch.rand(2, 1, 8, 8, dtype=torch.float64) + 0.5
        grid = reproject(depth, SMALL, PoseSE3.identity(dtype=torch.float64))
        ys, xs = torch.meshgrid(torch.arange(8.0), torch.arange(8.0), indexing="ij")
        expected = torch.stack([xs, ys], -1).double().expand(2, 8, 8, 2)
        torch.testing.assert_close(grid.coords, expected, atol=1e-12, rtol=0)
        assert grid.in_bounds.all()

    def test_identity_warp_reproduces_source(self):
        source = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        depth = torch.full((1, 1, 8, 8), 3.0, dtype=torch.float64)
        warped, valid = warp(source, depth, SMALL, PoseSE3.identity(dtype=torch.float64))
        torch.testing.assert_close(warped, source, atol=1e-12, rtol=0)
        assert valid.shape == (1, 1, 8, 8) and valid.all()

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            depth = rng.uniform(1.0, 5.0, (8, 8))
            pose = random_pose(rng)
            grid = reproject(torch.from_numpy(depth)[None, None], SMALL, pose)
            coords = grid.coords[0].numpy()
            vector = pose.as_vector().numpy()
            for i in range(8):
                for j in range(8):
                    x, y, front = brute_force_reproject((j, i), depth[i, j], SMALL, vector)
                    assert front
                    np.testing.assert_allclose(coords[i, j], (x, y), rtol=0, atol=1e-12)

    def test_forward_motion_doubles_offsets(self):
        camera = Intrinsics(30.0, 30.0, 16.0, 16.0, 33, 33)
        depth = torch.full((1, 1, 33, 33), 2.0, dtype=torch.float64)
        pose = PoseSE3(torch.zeros(3, dtype=torch.float64), torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64))
        coords = reproject(depth, camera, pose).coords[0]
        ys, xs = torch.meshgrid(torch.arange(33.0), torch.arange(33.0), indexing="ij")
        expected = torch.stack([16 + 2 * (xs - 16), 16 + 2 * (ys - 16)], -1).double()
        torch.testing.assert_close(coords, expected, atol=1e-12, rtol=0)
        torch.testing.assert_close(coords[16, 16], torch.tensor([16.0, 16.0], dtype=torch.float64))

    def test_points_behind_camera_are_invalid(self):
        depth = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        pose = PoseSE3(torch.zeros(3, dtype=torch.float64), torch.tensor([0.0, 0.0, -5.0], dtype=torch.float64))
        grid = reproject(depth, SMALL, pose)
        assert not grid.in_bounds.any()
        assert torch.isfinite(grid.coords).all()

    def test_pyramid_equivariance(self):
        rng = np.random.default_rng(7)
        camera = Intrinsics(28.8, 28.8, 15.5, 15.5, 32, 32)
        depth = torch.from_numpy(rng.uniform(2.0, 6.0, (1, 1, 32, 32)))
        pose = random_pose(rng, 0.05, 0.1)
        full = reproject(depth, camera, pose).coords
        for level in (1, 2, 3):
            step = 2**level
            coarse = reproject(depth[..., ::step, ::step], camera.scaled(level), pose).coords
            torch.testing.assert_close(coarse, full[:, ::step, ::step] / step, atol=1e-9, rtol=0)

    def test_accepts_non_contiguous_depth(self):
        rng = np.random.default_rng(9)
        depth = torch.from_numpy(rng.uniform(1.0, 3.0, (1, 1, 8, 8)))
        transposed = depth.transpose(2, 3)
        assert not transposed.is_contiguous()
        pose = random_pose(rng)
        grid = reproject(transposed, SMALL, pose)
        expected = reproject(transposed.contiguous(), SMALL, pose)
        torch.testing.assert_close(grid.coords, expected.coords, atol=0, rtol=0)
        assert torch.equal(grid.in_bounds, expected.in_bounds)

    def test_accepts_matrix_intrinsics(self):
        rng = np.random.default_rng(8)
        depth = torch.from_numpy(rng.uniform(1.0, 3.0, (2, 1, 8, 8)))
        pose = random_pose(rng, batch=2)
        a = reproject(depth, SMALL, pose).coords
        b = reproject(depth, SMALL.matrix()[None].expand(2, 3, 3), pose).coords
        torch.testing.assert_close(a, b)

    def test_rejects_non_positive_depth(self):
        depth = torch.ones(1, 1, 8, 8)
        depth[0, 0, 3, 3] = 0.0
        with pytest.raises(ValueError):
            reproject(depth, SMALL, PoseSE3.identity())

    def test_rejects_mismatched_intrinsics(self):
        with pytest.raises(ValueError):
            reproject(torch.ones(1, 1, 16, 16), SMALL, PoseSE3.identity())


class TestBilinearSample:
    def test_interpolates_between_pixels(self):
        image = torch.arange(16, dtype=torch.float64).view(1, 1, 4, 4)
        coords = torch.tensor([[[[1.5, 2.25]]]], dtype=torch.float64)
        grid = SampleGrid(coords, torch.ones(1, 1, 1, dtype=torch.bool))
        sampled, valid = bilinear_sample(image, grid)
        torch.testing.assert_close(sampled[0, 0, 0, 0], torch.tensor(2.25 * 4 + 1.5, dtype=torch.float64))
        assert valid.shape == (1, 1, 1, 1)

    def test_border_padding(self):
        image = torch.arange(4, dtype=torch.float64).view(1, 1, 2, 2)
        coords = torch.tensor([[[[-3.0, 0.0]]]], dtype=torch.float64)
        grid = SampleGrid(coords, torch.zeros(1, 1, 1, dtype=torch.bool))
        sampled, valid = bilinear_sample(image, grid)
        assert sampled.item() == 0.0
        assert not valid.any()

    def test_rejects_tiny_images(self):
        grid = SampleGrid(torch.zeros(1, 1, 1, 2), torch.ones(1, 1, 1, dtype=torch.bool))
        with pytest.raises(ValueError):
            bilinear_sample(torch.zeros(1, 1, 1, 4), grid)
