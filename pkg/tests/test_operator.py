import numpy as np
import pytest

from scno.autodiff import DimensionError, Variable, grad_check, mse, no_grad
from scno.fields import GridField
from scno.multigrid import VCycleBackbone
from scno.operator import ConvBlockBackbone, LatentState, SelfComposingOp, build_model, conv_block_backbone


def conv_op(channels=4, depth=1, zero_init=False, out_channels=1, seed=0):
    return SelfComposingOp(ConvBlockBackbone(channels=channels, seed=seed, zero_init=zero_init),
                           out_channels=out_channels, depth=depth, seed=seed, zero_init=zero_init)


def randomize(model, rng, scale=0.1):
    for p in model.parameters():
        p.value += rng.normal(0, scale, size=p.shape)


class TestLifting:
    def test_zero_inputs_zero_state(self):
        op = conv_op()
        st = op.apply_lifting(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))
        for v in (st.u_latent, st.k_feat, st.f_feat):
            np.testing.assert_array_equal(v.value, 0.0)

    def test_u0_is_zero(self, rng):
        op = conv_op()
        randomize(op, rng)
        st = op.apply_lifting(rng.normal(size=(1, 8, 8)), rng.normal(size=(1, 8, 8)))
        np.testing.assert_array_equal(st.u_latent.value, 0.0)
        assert st.k_feat.shape == (4, 8, 8)

    def test_linear_in_k(self, rng):
        op = conv_op()
        k1, k2, f = rng.normal(size=(3, 1, 8, 8))
        a, b = 1.7, -0.4
        lhs = op.apply_lifting(a * k1 + b * k2, f).k_feat.value
        rhs = a * op.apply_lifting(k1, f).k_feat.value + b * op.apply_lifting(k2, f).k_feat.value
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_missing_f_lifts_zero(self, rng):
        op = conv_op()
        k = rng.normal(size=(1, 8, 8))
        np.testing.assert_array_equal(op.apply_lifting(k).f_feat.value, 0.0)

    def test_grid_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv_op().apply_lifting(np.zeros((1, 8, 8)), np.zeros((1, 9, 9)))

    def test_latent_shapes_checked(self):
        with pytest.raises(DimensionError):
            LatentState(Variable(np.zeros((2, 4, 4))), Variable(np.zeros((2, 4, 4))), Variable(np.zeros((3, 4, 4))))


class TestCompose:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.op = conv_op(depth=3)
        randomize(self.op, rng)
        self.k, self.f = rng.normal(size=(2, 1, 8, 8))

    def test_semigroup(self):
        st = self.op.apply_lifting(self.k, self.f)
        a = self.op.compose(st, 5).u_latent.value
        b = self.op.compose(self.op.compose(st, 2), 3).u_latent.value
        assert a.tobytes() == b.tobytes()

    def test_manual_loop(self):
        st = self.op.apply_lifting(self.k, self.f)
        manual = st
        for _ in range(3):
            manual = self.op.backbone.apply(manual)
        out = self.op.project(manual).value
        assert out.tobytes() == self.op.forward(self.k, self.f).value.tobytes()

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            self.op.compose(self.op.apply_lifting(self.k, self.f), 0)

    def test_depth_must_be_positive(self):
        with pytest.raises(ValueError):
            conv_op(depth=0)


class TestForward:
    def test_zero_parameters_give_bias_field(self):
        op = conv_op(zero_init=True, out_channels=2)
        op.proj_bias.value[:] = [0.5, -2.0]
        out = op.forward(np.ones((1, 8, 8)), np.ones((1, 8, 8))).value
        np.testing.assert_array_equal(out[0], 0.5)
        np.testing.assert_array_equal(out[1], -2.0)

    def test_output_shapes(self, rng):
        k = rng.normal(size=(1, 16, 16))
        assert conv_op().forward(k, k).shape == (1, 16, 16)
        assert conv_op(out_channels=2).forward(k, k).shape == (2, 16, 16)
        assert conv_op().forward(k[None], k[None]).shape == (1, 1, 16, 16)

    def test_forward_fields(self, rng):
        op = conv_op(out_channels=2)
        out = op.forward_fields(GridField.real(rng.normal(size=(8, 8))))
        assert out.kind == "complex" and out.spacing == pytest.approx(1 / 7)

    def test_predict_batches(self, rng):
        op = conv_op()
        randomize(op, rng)
        k, f = rng.normal(size=(2, 5, 1, 8, 8))
        full = op.predict(k, f, batch_size=5)
        np.testing.assert_allclose(op.predict(k, f, batch_size=2), full, atol=1e-13)

    def test_normalization_is_affine_wrapper(self, rng):
        op = conv_op()
        randomize(op, rng)
        k, f = rng.normal(size=(2, 1, 8, 8))
        ref = op.forward(k, f).value
        op.normalization = {"k_shift": 1.0, "k_scale": 2.0, "f_shift": -3.0, "f_scale": 0.5, "u_scale": 4.0}
        np.testing.assert_allclose(op.forward(2 * k + 1, 0.5 * f - 3).value, 4 * ref, atol=1e-12)

    def test_fit_normalization_constant_source(self, rng):
        op = conv_op()
        k = rng.choice([3.0, 12.0], size=(10, 1, 8, 8))
        op.fit_normalization(k, np.ones_like(k), 0.01 * np.ones_like(k))
        nz = op.normalization
        assert nz["f_shift"] == 0.0 and nz["f_scale"] == 1.0
        assert nz["k_scale"] == pytest.approx(k.std())
        assert nz["u_scale"] == pytest.approx(0.01)

    def test_gradient_audit_depth3(self, rng):
        op = SelfComposingOp(ConvBlockBackbone(channels=2, seed=1), depth=3, seed=1)
        randomize(op, rng)
        k, f, t = rng.normal(size=(3, 1, 16, 16))
        rep = grad_check(lambda: mse(op.forward(k, f), Variable(t)), op.parameters())
        assert rep.passed, rep.max_rel_error


class TestParameters:
    def test_count_independent_of_depth(self):
        assert conv_op(depth=1).param_count() == conv_op(depth=5).param_count()
        a = SelfComposingOp(VCycleBackbone(channels=4, levels=3), depth=1)
        b = SelfComposingOp(VCycleBackbone(channels=4, levels=3), depth=5)
        assert a.param_count() == b.param_count()
        assert set(a.named_parameters()) == set(b.named_parameters())

    @pytest.mark.parametrize("out", [1, 2])
    def test_conv_closed_form(self, out):
        c = 8
        lifting = 2 * (1 * c * 1 * 1) + 2 * c
        backbone = 2 * (c * c * 3 * 3) + 2 * c
        projection = c * out + out
        op = SelfComposingOp(ConvBlockBackbone(channels=c, layers=2), out_channels=out)
        assert op.param_count() == lifting + backbone + projection
        assert op.param_count() == (1209 if out == 1 else 1218)

    def test_names_unique(self):
        op = SelfComposingOp(VCycleBackbone(channels=4, levels=3))
        names = [p.name for p in op.parameters()]
        assert len(names) == len(set(names))

    def test_config_round_trip(self, rng):
        op = SelfComposingOp(VCycleBackbone(channels=4, levels=2, seed=5), depth=4, seed=5)
        clone = build_model(op.get_config())
        assert clone.get_config() == op.get_config()
        for name, p in op.named_parameters().items():
            assert p.value.tobytes() == clone.named_parameters()[name].value.tobytes()


class TestConvBlock:
    def test_zero_block_is_identity(self, rng):
        bb = ConvBlockBackbone(channels=3, zero_init=True)
        u, k, f = (Variable(rng.normal(size=(3, 6, 6))) for _ in range(3))
        out = bb.apply(LatentState(u, k, f))
        np.testing.assert_array_equal(out.u_latent.value, u.value)

    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError):
            conv_block_backbone({"kind": "conv", "channels": 4, "layers": 0})

    def test_depends_on_k(self, rng):
        op = conv_op(depth=2)
        randomize(op, rng)
        k, f = rng.normal(size=(2, 1, 8, 8))
        base = op.forward(k, f).value
        k2 = k.copy()
        k2[0, 4, 4] += 1e-4
        sensitivity = np.abs(op.forward(k2, f).value - base).max() / 1e-4
        assert sensitivity > 1e-6


class TestDeterminism:
    def test_forward_repeatable(self, rng):
        op = SelfComposingOp(VCycleBackbone(channels=4, levels=2), depth=2)
        k, f = rng.normal(size=(2, 1, 16, 16))
        with no_grad():
            assert op.forward(k, f).value.tobytes() == op.forward(k, f).value.tobytes()
