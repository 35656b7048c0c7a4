import zipfile

import numpy as np
import pytest
import torch
import torchvision

from cuedepth.config import NetConfig
from cuedepth.kittidata import FrameSample
from cuedepth.networks import (
    IDCE,
    Bottleneck,
    DepthDecoder,
    JointDepthNet,
    PoseDecoder,
    ResnetEncoder,
    disparity_to_depth,
    fuse,
    load_checkpoint,
    save_checkpoint,
)


def zero_convolutions(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.weight.zero_()


class TestDisparityToDepth:
    def test_midpoint(self):
        assert disparity_to_depth(torch.tensor(0.5)).item() == pytest.approx(1 / 5.005, rel=1e-6)
        assert disparity_to_depth(np.float64(0.5)) == pytest.approx(0.1998, abs=1e-4)

    def test_range_ends(self):
        depth = disparity_to_depth(torch.tensor([0.0, 1.0], dtype=torch.float64))
        torch.testing.assert_close(depth, torch.tensor([100.0, 0.1], dtype=torch.float64))

    def test_saturated_sigmoid(self):
        disp = torch.sigmoid(torch.tensor([-200.0, 30.0]))
        assert disp.tolist() == [0.0, 1.0]
        torch.testing.assert_close(disparity_to_depth(disp), torch.tensor([100.0, 0.1]))

    def test_numpy_in_numpy_out(self):
        depth = disparity_to_depth(np.linspace(0, 1, 5), 1.0, 10.0)
        assert isinstance(depth, np.ndarray)
        assert np.all(np.diff(depth) < 0)

    @pytest.mark.parametrize("value", [-0.1, 1.1, float("nan")])
    def test_rejects_out_of_range(self, value):
        with pytest.raises(ValueError):
            disparity_to_depth(torch.tensor([value]))

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            disparity_to_depth(torch.tensor([0.5]), 10.0, 1.0)


class TestEncoder:
    def test_stage_shapes(self):
        encoder = ResnetEncoder((8, 16, 32, 64, 128))
        features = encoder(torch.rand(2, 3, 64, 96))
        assert [f.shape[1] for f in features] == [8, 16, 32, 64, 128]
        assert [f.shape[-1] for f in features] == [48, 24, 12, 6, 3]

    def test_unit_stream_matches_depth_encoder_shapes(self):
        widths = (8, 16, 32, 64, 128)
        single = ResnetEncoder(widths, 1)(torch.rand(1, 3, 64, 64))
        stacked = ResnetEncoder(widths, 2)(torch.rand(1, 6, 64, 64))
        assert [f.shape for f in single] == [f.shape for f in stacked]

    def test_checks_channels_and_resolution(self):
        encoder = ResnetEncoder((8, 16, 32, 64, 128), 2, input_resolution=(64, 64))
        with pytest.raises(ValueError):
            encoder(torch.rand(1, 3, 64, 64))
        with pytest.raises(ValueError):
            encoder(torch.rand(1, 6, 32, 64))

    def test_load_pretrained_tiles_first_layer(self):
        reference = torchvision.models.resnet18(weights=None).state_dict()
        encoder = ResnetEncoder((64, 64, 128, 256, 512), num_input_images=2)
        encoder.load_pretrained(reference)
        expected = torch.cat([reference["conv1.weight"]] * 2, 1) / 2
        torch.testing.assert_close(encoder.conv1.weight, expected)
        torch.testing.assert_close(encoder.layer4[1].conv2.weight, reference["layer4.1.conv2.weight"])

    def test_load_pretrained_can_skip_first_layer(self):
        reference = torchvision.models.resnet18(weights=None).state_dict()
        encoder = ResnetEncoder((64, 64, 128, 256, 512), num_input_images=2)
        own = encoder.conv1.weight.detach().clone()
        encoder.load_pretrained(reference, skip_first_layer=True)
        assert torch.equal(encoder.conv1.weight, own)
        torch.testing.assert_close(encoder.layer1[0].conv1.weight, reference["layer1.0.conv1.weight"])

    def test_load_pretrained_rejects_other_widths(self):
        reference = torchvision.models.resnet18(weights=None).state_dict()
        with pytest.raises(ValueError, match="shape"):
            ResnetEncoder((8, 16, 32, 64, 128)).load_pretrained(reference)


class TestBottleneck:
    def test_zero_weights_give_identity(self):
        block = Bottleneck(16).eval()
        zero_convolutions(block)
        x = torch.randn(2, 16, 4, 4)
        with torch.no_grad():
            assert torch.equal(block(x), x)

    def test_residual_decomposition(self):
        block = Bottleneck(16).double().eval()
        x = torch.randn(1, 16, 5, 5, dtype=torch.float64)
        with torch.no_grad():
            torch.testing.assert_close(block(x) - x, block.branch(x), atol=1e-9, rtol=0)

    def test_channels_divisible_by_four(self):
        with pytest.raises(ValueError):
            Bottleneck(10)

    def test_idce_is_four_bottlenecks(self):
        idce = IDCE(16).double().eval()
        assert len(idce.blocks) == 4
        x = torch.randn(1, 16, 2, 2, dtype=torch.float64)
        manual = x
        for block in idce.blocks:
            manual = block(manual)
        with torch.no_grad():
            torch.testing.assert_close(idce(x), manual.detach())

    def test_fuse(self):
        a, b = torch.rand(1, 4, 2, 2), torch.rand(1, 4, 2, 2)
        assert torch.equal(fuse(a, b), a + b)
        with pytest.raises(ValueError):
            fuse(a, torch.rand(1, 4, 2, 3))


class TestDecoders:
    def test_depth_decoder_scales(self):
        widths = (8, 16, 32, 64, 128)
        features = ResnetEncoder(widths)(torch.rand(1, 3, 64, 64))
        outputs = DepthDecoder(widths, (8, 8, 16, 32, 64))(features)
        assert [d.shape[-1] for d in outputs] == [64, 32, 16, 8]
        assert all(((d > 0) & (d < 1)).all() for d in outputs)

    def test_zero_head_gives_identity_pose(self):
        decoder = PoseDecoder(16, 8)
        with torch.no_grad():
            decoder.head.weight.zero_()
            decoder.head.bias.zero_()
        pose = decoder(torch.rand(3, 16, 2, 2))
        assert torch.equal(pose.as_vector(), torch.zeros(3, 6))

    def test_pose_outputs_are_small(self):
        pose = PoseDecoder(16, 8)(torch.rand(2, 16, 2, 2))
        assert pose.rotation.shape == pose.translation.shape == (2, 3)
        assert pose.as_vector().abs().max() < 0.1


class TestJointDepthNet:
    def test_output_shapes(self, make_sample):
        cfg = NetConfig.toy()
        output = JointDepthNet(cfg).eval()(make_sample(batch=2))
        assert [tuple(d.shape) for d in output.disparities] == [(2, 1, 64 >> s, 64 >> s) for s in range(4)]
        assert sorted(output.poses) == ["next", "prev"]
        assert output.poses["prev"].translation.shape == (2, 3)

    def test_ablation_variants_share_weights(self):
        torch.manual_seed(0)
        full = JointDepthNet(NetConfig.toy())
        torch.manual_seed(0)
        base = JointDepthNet(NetConfig.toy(use_idce=False, use_ham=False))
        assert base.idce is None and base.ham is None
        full_state = full.state_dict()
        for key, value in base.state_dict().items():
            assert torch.equal(full_state[key], value), key

    def test_inactive_cues_match_baseline(self, make_sample):
        torch.manual_seed(0)
        full = JointDepthNet(NetConfig.toy()).eval()
        torch.manual_seed(0)
        base = JointDepthNet(NetConfig.toy(use_idce=False, use_ham=False)).eval()
        full.idce_active = False
        with torch.no_grad():
            for seed in range(10):
                sample = make_sample(seed=seed)
                a, b = full(sample), base(sample)
                for x, y in zip(a.disparities, b.disparities):
                    assert torch.equal(x, y)
                for role in ("prev", "next"):
                    assert torch.equal(a.poses[role].as_vector(), b.poses[role].as_vector())

    def test_zeroed_cues_fuse_the_raw_unit_stream(self, make_sample):
        torch.manual_seed(0)
        full = JointDepthNet(NetConfig.toy()).eval()
        torch.manual_seed(0)
        base = JointDepthNet(NetConfig.toy(use_idce=False, use_ham=False)).eval()
        zero_convolutions(full.idce)
        full.idce_active = True
        with torch.no_grad():
            for seed in range(10):
                sample = make_sample(seed=seed)
                target, prev = sample.target_aug, sample.sources_aug["prev"]
                stream = base.unit_stream_encoder(torch.cat([prev, target], 1))
                assert torch.equal(full.idce(stream[-1]), stream[-1])

                features = base.depth_encoder(target)
                expected = base.depth_decoder(features[:-1] + [features[-1] + stream[-1]])
                a, b = full(sample), base(sample)
                for x, y in zip(a.disparities, expected):
                    assert torch.equal(x, y)
                for role in ("prev", "next"):
                    assert torch.equal(a.poses[role].as_vector(), b.poses[role].as_vector())

    def test_active_cues_change_depth(self, make_sample):
        model = JointDepthNet(NetConfig.toy()).eval()
        sample = make_sample()
        with torch.no_grad():
            model.idce_active = False
            without = model(sample).disparities[0]
            model.idce_active = True
            with_cues = model(sample).disparities[0]
        assert not torch.equal(without, with_cues)

    def test_gradients_reach_every_parameter(self, make_sample):
        model = JointDepthNet(NetConfig.toy()).train()
        model.idce_active = True
        output = model(make_sample(batch=2))
        loss = sum(d.mean() for d in output.disparities)
        loss = loss + sum(p.as_vector().sum() for p in output.poses.values())
        loss.backward()
        for name, parameter in model.named_parameters():
            if name.startswith("ham.") and name != "ham.beta":
                continue
            assert parameter.grad is not None, name
            assert parameter.grad.abs().sum() > 0, name

    def test_stereo_pose_comes_from_rig(self, make_sample):
        model = JointDepthNet(NetConfig.toy()).eval()
        sample = make_sample(roles=("prev", "stereo"))
        sample.stereo_pose = torch.tensor([[0.0, 0.0, 0.0, -0.54, 0.0, 0.0]])
        with torch.no_grad():
            output = model(sample)
        torch.testing.assert_close(output.poses["stereo"].as_vector(), sample.stereo_pose)

    def test_stereo_without_rig_fails(self, make_sample):
        model = JointDepthNet(NetConfig.toy()).eval()
        with pytest.raises(ValueError, match="stereo"):
            with torch.no_grad():
                model(make_sample(roles=("prev", "stereo")))

    def test_predict_disparity_without_previous_frame(self):
        model = JointDepthNet(NetConfig.toy()).eval()
        with torch.no_grad():
            disparities = model.predict_disparity(torch.rand(1, 3, 64, 64))
        assert disparities[0].shape == (1, 1, 64, 64)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = JointDepthNet(NetConfig.toy())
        optimizer = torch.optim.Adam(model.parameters())
        path = save_checkpoint(tmp_path / "ckpt" / "m.ckpt", model, {"phase": "baseline_ham", "step": 3}, {"optimizer": optimizer.state_dict()})
        manifest, states = load_checkpoint(path)
        assert manifest["phase"] == "baseline_ham" and manifest["step"] == 3 and manifest["format"] == 1
        assert set(states) == {"model", "optimizer"}
        restored = JointDepthNet(NetConfig.toy())
        restored.load_state_dict(states["model"])
        for key, value in model.state_dict().items():
            assert torch.equal(restored.state_dict()[key], value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_archive_without_manifest(self, tmp_path):
        path = tmp_path / "broken.ckpt"
        with zipfile.ZipFile(path, "w") as archive:
            archive.writestr("model.pt", b"")
        with pytest.raises(ValueError, match="manifest"):
            load_checkpoint(path)
