import numpy as np
import pytest
import torch

from cuedepth.camgeom import Intrinsics, PoseSE3, warp
from cuedepth.config import LossConfig
from cuedepth.kittidata import FrameSample
from cuedepth.photoloss import (
    LossBreakdown,
    auto_mask,
    min_reprojection,
    photometric_error,
    smoothness_loss,
    ssim_loss,
    total_loss,
)
from cuedepth.synthdata import Plane, Scenario, SceneSpec, render_pair, scenario_spec


def depth_to_disparity(depth, min_depth=0.1, max_depth=100.0):
    b = 1 / max_depth
    a = 1 / min_depth - b
    return (1 / depth - b) / a


def random_disparities(generator, size=16, batch=1):
    return [
        0.2 + 0.6 * torch.rand(batch, 1, size >> s, size >> s, generator=generator, dtype=torch.float64)
        for s in range(4)
    ]


def float64_sample(size=16, roles=("prev", "next"), seed=0, batch=1) -> FrameSample:
    generator = torch.Generator().manual_seed(seed)
    camera = Intrinsics(0.9 * size, 0.9 * size, (size - 1) / 2, (size - 1) / 2, size, size)
    return FrameSample(
        target=torch.rand(batch, 3, size, size, generator=generator, dtype=torch.float64),
        sources={r: torch.rand(batch, 3, size, size, generator=generator, dtype=torch.float64) for r in roles},
        intrinsics=camera.pyramid(4, torch.float64)[None].expand(batch, -1, -1, -1),
    )


class TestSSIM:
    def test_identical_images(self):
        a = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(ssim_loss(a, a), torch.zeros(2, 1, 8, 8, dtype=torch.float64), atol=1e-12, rtol=0)

    def test_constant_images_closed_form(self):
        cfg = LossConfig()
        a = torch.zeros(1, 3, 6, 6, dtype=torch.float64)
        b = torch.ones(1, 3, 6, 6, dtype=torch.float64)
        ssim = cfg.ssim_c1 / (1 + cfg.ssim_c1)
        expected = torch.full((1, 1, 6, 6), (1 - ssim) / 2, dtype=torch.float64)
        torch.testing.assert_close(ssim_loss(a, b, cfg), expected, atol=1e-12, rtol=0)

    def test_range_and_symmetry(self):
        a = torch.rand(1, 3, 10, 10, dtype=torch.float64)
        b = torch.rand(1, 3, 10, 10, dtype=torch.float64)
        value = ssim_loss(a, b)
        assert value.min() >= 0 and value.max() <= 1
        torch.testing.assert_close(value, ssim_loss(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestPhotometricError:
    def test_alpha_zero_is_l1(self):
        a = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        b = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        expected = (a - b).abs().mean(1, keepdim=True)
        assert torch.equal(photometric_error(a, b, LossConfig(alpha=0.0)), expected)

    def test_alpha_one_is_ssim(self):
        a = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        b = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        cfg = LossConfig(alpha=1.0)
        torch.testing.assert_close(photometric_error(a, b, cfg), ssim_loss(a, b, cfg))

    def test_min_reprojection(self):
        first = torch.tensor([[[[0.1, 0.5]]]])
        second = torch.tensor([[[[0.3, 0.2]]]])
        torch.testing.assert_close(min_reprojection([first, second]), torch.tensor([[[[0.1, 0.2]]]]))
        with pytest.raises(ValueError):
            min_reprojection([])


class TestAutoMask:
    def test_identical_source_masks_everything(self):
        target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        mask = auto_mask(target, [target.clone()], [torch.rand_like(target)])
        assert not mask.any()

    def test_ties_count_as_static(self):
        target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        source = torch.rand_like(target)
        mask = auto_mask(target, [source], [source.clone()])
        assert not mask.any()

    def test_good_warp_is_kept(self):
        target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        mask = auto_mask(target, [1 - target], [target.clone()])
        assert mask.all()

    def test_needs_sources(self):
        with pytest.raises(ValueError):
            auto_mask(torch.zeros(1, 3, 4, 4), [], [])

    def test_co_moving_object_is_masked(self):
        pair = render_pair(scenario_spec(Scenario.MOVING_OBJECT, seed=1))
        sample = pair.to_sample(dtype=torch.float64)
        target, source = sample.target[None], sample.sources["prev"][None]
        depth = torch.from_numpy(pair.depth.values)[None, None]
        warped, _ = warp(source, depth, pair.intrinsics, pair.pose)
        mask = auto_mask(target, [source], [warped])[0, 0].numpy()
        assert pair.motion_mask.any()
        assert 1 - mask[pair.motion_mask].mean() >= 0.9


class TestSmoothness:
    def test_constant_disparity(self):
        disp = torch.full((1, 1, 8, 8), 0.3, dtype=torch.float64)
        image = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        assert smoothness_loss(disp, image).item() == 0.0

    def test_scale_invariance(self):
        generator = torch.Generator().manual_seed(0)
        disp = torch.rand(2, 1, 12, 12, generator=generator, dtype=torch.float64) + 0.1
        image = torch.rand(2, 3, 12, 12, generator=generator, dtype=torch.float64)
        reference = smoothness_loss(disp, image)
        for factor in (1e-3, 0.37, 5.0, 1e4):
            torch.testing.assert_close(smoothness_loss(factor * disp, image), reference, atol=1e-9, rtol=0)

    def test_edges_reduce_penalty(self):
        disp = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        disp[..., 2:] = 1.0
        flat = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
        edge = flat.clone()
        edge[..., 2:] = 1.0
        assert smoothness_loss(disp, edge) < smoothness_loss(disp, flat)

    def test_single_pixel_map(self):
        disp = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        assert smoothness_loss(disp, torch.rand(1, 3, 1, 1, dtype=torch.float64)).item() == 0.0

    def test_rejects_zero_mean(self):
        with pytest.raises(ValueError):
            smoothness_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 4, 4))


class TestTotalLoss:
    def poses(self, generator, roles):
        return {
            r: PoseSE3(
                0.01 * torch.randn(1, 3, generator=generator, dtype=torch.float64),
                0.05 * torch.randn(1, 3, generator=generator, dtype=torch.float64),
            )
            for r in roles
        }

    def test_recomposes_from_parts(self):
        generator = torch.Generator().manual_seed(1)
        sample = float64_sample()
        result = total_loss(random_disparities(generator), sample, self.poses(generator, ("prev", "next")))
        assert isinstance(result, LossBreakdown)
        assert len(result.photometric) == len(result.smoothness) == 4
        torch.testing.assert_close(result.recomposed(), result.total, atol=1e-9, rtol=0)

    def test_smoothness_terms_match_standalone(self):
        generator = torch.Generator().manual_seed(2)
        sample = float64_sample()
        disparities = random_disparities(generator)
        result = total_loss(disparities, sample, self.poses(generator, ("prev",)))
        expected = smoothness_loss(disparities[2], torch.nn.functional.avg_pool2d(sample.target, 4))
        torch.testing.assert_close(result.smoothness[2], expected, atol=1e-9, rtol=0)

    def test_scales_share_the_smoothness_weight(self):
        generator = torch.Generator().manual_seed(6)
        sample = float64_sample()
        disparities = random_disparities(generator)
        cfg = LossConfig(gamma=0.1)
        result = total_loss(disparities, sample, self.poses(generator, ("prev",)), cfg)
        terms = []
        for s, disp in enumerate(disparities):
            color = torch.nn.functional.avg_pool2d(sample.target, 2**s) if s else sample.target
            terms.append(result.photometric[s] + 0.1 * smoothness_loss(disp, color))
        torch.testing.assert_close(result.total, torch.stack(terms).mean(), atol=1e-12, rtol=0)

    def test_role_order_does_not_matter(self):
        generator = torch.Generator().manual_seed(3)
        sample = float64_sample()
        disparities = random_disparities(generator)
        poses = self.poses(generator, ("prev", "next"))
        forward = total_loss(disparities, sample, poses)
        backward = total_loss(disparities, sample, dict(reversed(list(poses.items()))))
        assert torch.equal(forward.total, backward.total)

    def test_identical_frames_give_zero_photometric(self):
        generator = torch.Generator().manual_seed(4)
        sample = float64_sample(roles=("prev",))
        sample = FrameSample(target=sample.target, sources={"prev": sample.target.clone()}, intrinsics=sample.intrinsics)
        result = total_loss(
            random_disparities(generator), sample, {"prev": PoseSE3.identity(batch=1, dtype=torch.float64)}
        )
        assert all(p.item() == 0.0 for p in result.photometric)
        assert all(f == 0.0 for f in result.mask_fraction)

    def test_without_automask(self):
        generator = torch.Generator().manual_seed(5)
        sample = float64_sample()
        disparities = random_disparities(generator)
        poses = self.poses(generator, ("prev", "next"))
        masked = total_loss(disparities, sample, poses, LossConfig(automask=True))
        unmasked = total_loss(disparities, sample, poses, LossConfig(automask=False))
        assert all(f == 1.0 for f in unmasked.mask_fraction)
        assert all(u >= m for u, m in zip(unmasked.photometric, masked.photometric))

    def test_true_geometry_fits_static_scene(self):
        scene = SceneSpec((Plane(10.0, texture="ramp"),), camera_motion=(0.0, 0.0, 0.0, 0.2, 0.1, -0.3))
        pair = render_pair(scene)
        sample = FrameSample.collate([pair.to_sample(dtype=torch.float64)])
        disp = depth_to_disparity(torch.from_numpy(pair.depth.values))[None, None]
        disparities = [torch.nn.functional.avg_pool2d(disp, 2**s) if s else disp for s in range(4)]
        pose = PoseSE3(pair.pose.rotation[None], pair.pose.translation[None])
        result = total_loss(disparities, sample, {"prev": pose})
        assert result.photometric[0].item() < 1e-3

    def test_gradients_reach_disparities_and_poses(self):
        generator = torch.Generator().manual_seed(6)
        sample = float64_sample()
        disparities = [d.requires_grad_() for d in random_disparities(generator)]
        poses = self.poses(generator, ("prev", "next"))
        for pose in poses.values():
            pose.rotation.requires_grad_()
            pose.translation.requires_grad_()
        total_loss(disparities, sample, poses, LossConfig(automask=False)).total.backward()
        assert all(d.grad is not None and d.grad.abs().sum() > 0 for d in disparities)
        assert all(p.translation.grad.abs().sum() > 0 for p in poses.values())

    def test_rejects_wrong_scale_count(self):
        generator = torch.Generator().manual_seed(7)
        with pytest.raises(ValueError, match="scales"):
            total_loss(random_disparities(generator)[:3], float64_sample(), self.poses(generator, ("prev",)))

    def test_rejects_missing_source(self):
        generator = torch.Generator().manual_seed(8)
        sample = float64_sample(roles=("prev",))
        with pytest.raises(ValueError, match="stereo"):
            total_loss(random_disparities(generator), sample, self.poses(generator, ("prev", "stereo")))


def test_breakdown_record_is_plain():
    breakdown = LossBreakdown(torch.tensor(1.5), [torch.tensor(1.0)], [torch.tensor(500.0)], [0.75], gamma=1e-3)
    record = breakdown.to_record()
    assert record == {"loss": 1.5, "photometric": [1.0], "smoothness": [500.0], "mask_fraction": [0.75]}
    assert np.isclose(float(breakdown.recomposed()), 1.5)
