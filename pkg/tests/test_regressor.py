import numpy as np
import pytest

from padnet.errors import DimensionError, UsageError
from padnet.network import GROUP_PREFIXES, PADNet
from padnet.pipeline import TrainConfig, pretrain_regressor_2d
from padnet.regressor import Fusion, Regressor, fuse, regress_quality, score_loss, stack_inputs
from padnet.rivalry import RivalryBundle
from padnet.tensor_core import Tensor, no_grad, precision

from conftest import GRAD_TOL, gradient_error, overfit_images


def random_bundle(r, n=1, h=8, w=8):
    maps = [Tensor(r.uniform(size=(n, 1, h, w))) for _ in range(8)]
    return RivalryBundle(*maps)


@pytest.fixture(scope="module")
def regressor():
    return Regressor(np.random.default_rng(0)).eval()


class TestFusion:
    def test_shape(self, rng):
        out = fuse(rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8)), random_bundle(rng, 2),
                   Fusion(rng))
        assert out.shape == (2, 3, 8, 8)

    def test_channel_order(self, rng):
        b = random_bundle(rng)
        il, ir = Tensor(rng.uniform(size=(1, 3, 8, 8))), Tensor(rng.uniform(size=(1, 3, 8, 8)))
        s = stack_inputs(il, ir, b).data
        assert s.shape[1] == 10
        np.testing.assert_array_equal(s[:, 0:1], b.P_nl.data)
        np.testing.assert_array_equal(s[:, 1:2], b.L_nl.data)
        np.testing.assert_array_equal(s[:, 2:5], il.data)
        np.testing.assert_array_equal(s[:, 5:6], b.P_nr.data)
        np.testing.assert_array_equal(s[:, 6:7], b.L_nr.data)
        np.testing.assert_array_equal(s[:, 7:10], ir.data)

    def test_zero_conv_gives_zero(self, rng):
        f = Fusion(rng)
        f.conv9.weight.data[...] = 0.0
        f.conv9.bias.data[...] = 0.0
        out = fuse(rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8)), random_bundle(rng), f)
        assert np.all(out.data == 0.0)

    def test_identity_gdn_is_pixel_mix(self, rng):
        with precision("float64"):
            f = Fusion(rng)
            f.gdn9.gamma.data[...] = 0.0
            il, ir = rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8))
            b = random_bundle(rng)
            got = fuse(il, ir, b, f).data
            stacked = np.concatenate([b.P_nl.data, b.L_nl.data, il, b.P_nr.data, b.L_nr.data, ir], axis=1)
        w, bias = f.conv9.weight.data[:, :, 0, 0], f.conv9.bias.data
        expect = np.einsum("oc,nchw->nohw", w, stacked) + bias[None, :, None, None]
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_spatial_mismatch(self, rng):
        with pytest.raises(DimensionError):
            stack_inputs(rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8)), random_bundle(rng, h=4))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        r = np.random.default_rng(seed)
        with precision("float64"):
            f = Fusion(r)
        assert gradient_error(f, [r.uniform(size=(1, 10, 3, 3))], seed) < GRAD_TOL


class TestRegressor:
    def test_pre_pool_shape_64(self, regressor, rng):
        with no_grad():
            assert regressor.features(Tensor(rng.uniform(size=(1, 3, 64, 64)))).shape == (1, 512, 2, 2)

    def test_pre_pool_shape_law(self, regressor, rng):
        with no_grad():
            assert regressor.features(Tensor(rng.uniform(size=(1, 3, 96, 32)))).shape == (1, 512, 3, 1)

    def test_scalar_output(self, regressor, rng):
        with no_grad():
            assert regress_quality(rng.uniform(size=(3, 64, 64)), regressor).shape == ()
            assert regressor(rng.uniform(size=(2, 3, 64, 64))).shape == (2,)

    def test_zero_head_returns_bias(self, rng):
        reg = Regressor(rng).eval()
        reg.fc.weight.data[...] = 0.0
        reg.fc.bias.data[...] = 42.5
        with no_grad():
            np.testing.assert_array_equal(reg(rng.uniform(size=(3, 3, 32, 32))).data, np.float32(42.5))

    def test_eval_is_bitwise_deterministic(self, regressor, rng):
        x = rng.uniform(size=(1, 3, 64, 64))
        with no_grad():
            assert np.array_equal(regressor(x).data, regressor(x.copy()).data)

    @pytest.mark.parametrize("size", [(48, 64), (64, 40)])
    def test_indivisible_rejected(self, regressor, size):
        with pytest.raises(DimensionError):
            regressor(np.zeros((1, 3) + size))

    def test_layout(self, regressor):
        names = [n for n, _ in regressor.named_parameters()]
        assert sum(n.endswith("conv1.weight") for n in names if n.startswith("layer")) == 8
        assert dict(regressor.named_parameters())["fc.weight"].shape == (1, 512)

    def test_unknown_backbone(self):
        with pytest.raises(UsageError):
            Regressor(backbone="vgg")

    def test_resnet34_variant(self, rng):
        reg = Regressor(rng, backbone="resnet34").eval()
        names = [n for n, _ in reg.named_parameters()]
        assert sum(n.endswith("conv1.weight") for n in names if n.startswith("layer")) == 16

    def test_score_loss(self):
        assert score_loss(Tensor(np.array([1.0, 2.0])), [1.0, 2.0]).item() == 0.0
        assert score_loss(Tensor(np.array([1.0, 2.0])), [2.0, 4.0]).item() == pytest.approx(2.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_score_loss_gradient(self, seed):
        r = np.random.default_rng(seed)
        target = r.uniform(20, 100, 5)
        assert gradient_error(lambda p: score_loss(p, target), [r.standard_normal(5)], seed) < GRAD_TOL


class TestNetwork:
    def test_groups_partition_parameters(self):
        model = PADNet(np.random.default_rng(0))
        names = [n for n, _ in model.named_parameters()]
        counted = sum(len(model.group(g)) for g in GROUP_PREFIXES)
        assert counted == len(names)
        assert {n.split(".")[0] for n in names} == {"enc", "dec", "pri", "fus", "reg"}

    def test_forward_shapes(self, rng):
        model = PADNet(np.random.default_rng(0)).eval()
        with no_grad():
            scores, bundle = model(rng.uniform(size=(2, 3, 64, 64)), rng.uniform(size=(2, 3, 64, 64)))
        assert scores.shape == (2,)
        assert all(m.shape == (2, 1, 64, 64) for m in bundle.maps().values())

    def test_view_swap_with_symmetric_fusion(self, rng):
        with precision("float64"):
            model = PADNet(np.random.default_rng(3)).eval()
        w = model.fus.conv9.weight.data
        w[:, 5:10] = w[:, 0:5]
        left, right = rng.uniform(size=(1, 3, 64, 64)), rng.uniform(size=(1, 3, 64, 64))
        with no_grad(), precision("float64"):
            a, _ = model(left, right)
            b, _ = model(right, left)
        assert a.item() == pytest.approx(b.item(), rel=1e-10)

    def test_general_weights_need_not_be_symmetric(self, rng):
        with precision("float64"):
            model = PADNet(np.random.default_rng(3)).eval()
        left, right = rng.uniform(size=(1, 3, 64, 64)), rng.uniform(size=(1, 3, 64, 64)) * 0.2
        with no_grad(), precision("float64"):
            assert model(left, right)[0].item() != model(right, left)[0].item()


@pytest.mark.slow
class TestStageTwoOverfit:
    def test_loss_drops(self):
        data = [(img, 100.0 - 20.0 * (i % 5)) for i, img in enumerate(overfit_images(seed=21, count=8))]
        config = TrainConfig(stage=2, profile=64, epochs=200, batch_size=8, seed=0, schedule_scale=0.25,
                             hflip=False, vflip=False)
        result = pretrain_regressor_2d(data, config)
        losses = result.trace.losses
        assert len(losses) == 200
        assert losses[-1] <= 0.2 * losses[0]

    def test_constant_labels(self):
        data = [(img, 55.0) for img in overfit_images(seed=22, count=4)]
        config = TrainConfig(stage=2, profile=64, epochs=200, batch_size=4, seed=0, schedule_scale=0.25)
        result = pretrain_regressor_2d(data, config)
        losses = result.trace.losses
        assert losses[-1] < 0.01 * losses[0]
        # Eval mode swaps batch statistics for running averages, so the held
        # predictions approach the label without reaching the training-mode fit.
        batch = np.stack([img for img, _ in data])
        with no_grad():
            before = Regressor(np.random.default_rng(config.seed)).eval()(batch).data
            after = result.model(batch).data
        assert np.abs(after - 55.0).max() < 0.1 * np.abs(before - 55.0).min()
