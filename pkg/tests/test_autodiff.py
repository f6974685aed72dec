import numpy as np
import pytest

from voxforge import autodiff as ad
from voxforge.autodiff import Adam, LstmState, Tensor

from gradcheck import max_rel_error

rng = np.random.default_rng(2024)


def tensor(shape, scale=1.0, grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad)


def lstm_params(inp, hidden, scale=0.4):
    p = {f"W_{g}": tensor((hidden, inp + hidden), scale) for g in "ifos"}
    p |= {f"b_{g}": tensor((hidden,), scale) for g in "ifos"}
    return p


class TestConv3d:
    def test_identity_kernel(self):
        x = tensor((2, 1, 4, 4, 4))
        k = Tensor(np.ones((1, 1, 1, 1, 1)), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        y = ad.conv3d(x, k, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_all_ones_counting(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2)))
        k = Tensor(np.ones((1, 1, 2, 2, 2)))
        b = Tensor(np.zeros(1))
        y = ad.conv3d(x, k, b)
        assert y.data.reshape(()) == 8.0

    def test_output_shape_formula(self):
        x = tensor((1, 2, 9, 9, 9))
        k = tensor((3, 2, 4, 4, 4), 0.2)
        b = tensor((3,), 0.1)
        y = ad.conv3d(x, k, b, stride=2, padding=1)
        assert y.data.shape == (1, 3, 4, 4, 4)  # floor((9 + 2 - 4)/2) + 1

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ad.conv3d(tensor((1, 2, 4, 4, 4)), tensor((1, 3, 2, 2, 2)), tensor((1,)))

    def test_gradcheck(self):
        x = tensor((2, 2, 5, 5, 5))
        k = tensor((3, 2, 3, 3, 3), 0.3)
        b = tensor((3,), 0.1)
        err = max_rel_error(lambda: ad.conv3d(x, k, b, stride=2, padding=1), [x, k, b], rng)
        assert err < 1e-4


class TestConv3dTranspose:
    def test_adjoint_identity(self):
        x = rng.standard_normal((2, 3, 6, 6, 6))
        k = rng.standard_normal((4, 3, 4, 4, 4))
        y = ad._conv3d_raw(x, k, 2, 1)
        u = rng.standard_normal(y.shape)
        z = ad._conv3d_adjoint(u, k, 2, 1, (6, 6, 6))
        lhs = float((y * u).sum())
        rhs = float((x * z).sum())
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)

    def test_doubles_spatial_size(self):
        x = tensor((1, 2, 4, 4, 4))
        k = tensor((2, 3, 4, 4, 4), 0.2)
        b = tensor((3,), 0.1)
        y = ad.conv3d_transpose(x, k, b, stride=2, padding=1)
        assert y.data.shape == (1, 3, 8, 8, 8)

    def test_gradcheck(self):
        x = tensor((2, 2, 3, 3, 3))
        k = tensor((2, 3, 4, 4, 4), 0.3)
        b = tensor((3,), 0.1)
        err = max_rel_error(lambda: ad.conv3d_transpose(x, k, b, stride=2, padding=1), [x, k, b], rng)
        assert err < 1e-4


class TestLinear:
    def test_identity_weight(self):
        x = tensor((4, 3))
        w = Tensor(np.eye(3), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        np.testing.assert_allclose(ad.linear(x, w, b).data, x.data)

    def test_zero_weight_gives_bias_rows(self):
        x = tensor((4, 3))
        w = Tensor(np.zeros((2, 3)))
        b = Tensor(np.array([1.5, -2.0]))
        y = ad.linear(x, w, b)
        np.testing.assert_array_equal(y.data, np.tile([1.5, -2.0], (4, 1)))

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError):
            ad.linear(tensor((4, 3)), tensor((2, 5)), tensor((2,)))

    def test_gradcheck(self):
        x, w, b = tensor((5, 4)), tensor((3, 4)), tensor((3,))
        assert max_rel_error(lambda: ad.linear(x, w, b), [x, w, b], rng) < 1e-4


class TestLstmCell:
    def test_zero_everything(self):
        p = {f"W_{g}": Tensor(np.zeros((4, 7)), requires_grad=True) for g in "ifos"}
        p |= {f"b_{g}": Tensor(np.zeros(4), requires_grad=True) for g in "ifos"}
        state = LstmState(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
        nxt = ad.lstm_cell(tensor((2, 3)), state, p)
        np.testing.assert_array_equal(nxt.h.data, 0.0)
        np.testing.assert_array_equal(nxt.s.data, 0.0)

    def test_saturated_forget_gate_keeps_cell(self):
        # zero weights, b_f = 20: sigmoid saturates to ~1 and the input term
        # vanishes, so the cell state carries over
        p = {f"W_{g}": Tensor(np.zeros((4, 7))) for g in "ifos"}
        p |= {f"b_{g}": Tensor(np.zeros(4)) for g in "ifos"}
        p["b_f"] = Tensor(np.full(4, 20.0))
        c = rng.standard_normal((2, 4))
        state = LstmState(Tensor(np.zeros((2, 4))), Tensor(c))
        nxt = ad.lstm_cell(tensor((2, 3)), state, p)
        np.testing.assert_allclose(nxt.s.data, c, atol=1e-7)

    def test_gradcheck_through_cell(self):
        x = tensor((2, 3))
        h0, s0 = tensor((2, 4)), tensor((2, 4))
        p = lstm_params(3, 4)
        leaves = [x, h0, s0] + list(p.values())

        def fn():
            out = ad.lstm_cell(x, LstmState(h0, s0), p)
            return ad.concat([out.h, out.s], axis=1)

        assert max_rel_error(fn, leaves, rng, n_probe=6) < 1e-4


class TestActivationsAndLoss:
    def test_relu_values(self):
        y = ad.relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 2.0])

    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_tanh_matches_numpy(self):
        x = rng.standard_normal(7)
        np.testing.assert_allclose(ad.tanh(Tensor(x)).data, np.tanh(x))

    @pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.tanh, ad.exp, ad.tabs])
    def test_elementwise_gradchecks(self, op):
        # keep relu/abs probes away from the kink
        x = Tensor(rng.standard_normal((4, 5)) + np.sign(rng.standard_normal((4, 5))) * 0.3,
                   requires_grad=True)
        assert max_rel_error(lambda: op(x), [x], rng) < 1e-4

    def test_bce_pred_half_is_ln2(self):
        pred = Tensor(np.full((3, 3), 0.5))
        target = Tensor((rng.random((3, 3)) < 0.5).astype(float))
        assert ad.bce_loss(pred, target).data == pytest.approx(np.log(2.0), rel=1e-12)

    def test_bce_perfect_prediction_clamp_bound(self):
        target = Tensor(np.array([0.0, 1.0, 1.0, 0.0]))
        loss = ad.bce_loss(Tensor(target.data.copy()), target)
        assert loss.data <= -np.log1p(-ad.BCE_EPS) + 1e-12

    def test_bce_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.bce_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))

    def test_bce_gradcheck(self):
        pred = Tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
        target = Tensor((rng.random((4, 4)) < 0.5).astype(float))
        assert max_rel_error(lambda: ad.bce_loss(pred, target), [pred], rng) < 1e-4

    def test_weighted_bce_gradcheck(self):
        pred = Tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
        target = Tensor((rng.random((4, 4)) < 0.5).astype(float))
        assert max_rel_error(lambda: ad.bce_loss(pred, target, pos_weight=7.0), [pred], rng) < 1e-4


class TestBackward:
    def test_product_rule(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = Tensor(np.array(4.0), requires_grad=True)
        ad.backward(ad.mul(x, y))
        assert x.grad == 4.0 and y.grad == 3.0

    def test_grad_of_sum_is_ones(self):
        x = tensor((3, 4, 5))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 5)))

    def test_detached_tensor_rejected(self):
        with pytest.raises(ValueError, match="detached"):
            ad.backward(Tensor(np.array(1.0)))

    def test_non_scalar_rejected(self):
        x = tensor((3,))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.mul(x, 2.0))

    def test_sum_of_losses_linearity(self):
        x = tensor((6,))
        ad.backward(ad.add(ad.tsum(ad.square(x)), ad.tsum(ad.mul(x, 3.0))))
        combined = x.grad.copy()
        x.grad = None
        ad.clear_tape()
        ad.backward(ad.tsum(ad.square(x)))
        ad.backward(ad.tsum(ad.mul(x, 3.0)))
        np.testing.assert_allclose(x.grad, combined, rtol=1e-12)

    def test_interleaved_independent_graphs(self):
        x = tensor((4,))
        y = tensor((4,))
        lx = ad.tsum(ad.square(x))
        ly = ad.tsum(ad.mul(y, y))
        ad.backward(lx)  # interleaved recording, separate backward passes
        ad.backward(ly)
        np.testing.assert_allclose(x.grad, 2 * x.data)
        np.testing.assert_allclose(y.grad, 2 * y.data)

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        loss = ad.mul(x, 5.0)
        ad.backward(loss)
        ad.backward(loss)
        assert x.grad == 10.0


class TestOptimizer:
    def test_adam_first_step_hand_evaluated(self):
        # f(w) = w^2 at w=1: g=2; bias-corrected m=g, v=g^2, so the update is
        # lr * g/(|g| + eps) ~= lr
        w = Tensor(np.array(1.0), requires_grad=True)
        opt = Adam([w], lr=0.1)
        ad.backward(ad.square(w))
        opt.step()
        assert w.data == pytest.approx(0.9, abs=1e-6)
        assert w.data < 1.0

    def test_adam_converges_on_quadratic(self):
        w = Tensor(np.array(3.0), requires_grad=True)
        opt = Adam([w], lr=0.2)
        for _ in range(200):
            ad.clear_tape()
            opt.zero_grad()
            ad.backward(ad.square(w))
            opt.step()
        assert abs(w.data) < 1e-2

    def test_zero_grad(self):
        w = tensor((3,))
        ad.backward(ad.tsum(w))
        Adam([w]).zero_grad()
        assert w.grad is None


class TestOpsMisc:
    def test_broadcast_add_unbroadcasts_grad(self):
        x = tensor((4, 3))
        b = tensor((3,))
        ad.backward(ad.tsum(ad.add(x, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))

    def test_div_gradcheck(self):
        a = tensor((3, 4))
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        assert max_rel_error(lambda: ad.div(a, b), [a, b], rng) < 1e-4

    def test_minimum_and_clip_gradcheck(self):
        a, b = tensor((4, 4)), tensor((4, 4))
        assert max_rel_error(lambda: ad.minimum(a, b), [a, b], rng) < 1e-3
        x = Tensor(rng.uniform(-2, 2, (4, 4)), requires_grad=True)
        assert max_rel_error(lambda: ad.clip(x, -0.9, 0.9), [x], rng) < 1e-3

    def test_getitem_scatter_grad(self):
        x = tensor((5, 3))
        ad.backward(ad.tsum(x[1:3]))
        expected = np.zeros((5, 3))
        expected[1:3] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_concat_split_grad(self):
        a, b = tensor((2, 3)), tensor((2, 2))
        ad.backward(ad.tsum(ad.mul(ad.concat([a, b], axis=1), 2.0)))
        np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))
        np.testing.assert_array_equal(b.grad, np.full((2, 2), 2.0))

    def test_mean_axis_gradcheck(self):
        x = tensor((3, 5))
        assert max_rel_error(lambda: ad.tmean(x, axis=1), [x], rng) < 1e-4

    def test_no_grad_suppresses_recording(self):
        x = tensor((3,))
        before = len(ad.tape())
        with ad.no_grad():
            ad.tsum(ad.square(x))
        assert len(ad.tape()) == before


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        named = {"a.w": tensor((3, 4), grad=False), "b": Tensor(np.array(2.5)), "c": tensor((2, 2, 2))}
        path = tmp_path / "p.tnsr"
        ad.save_tensors(named, path)
        back = ad.load_tensors(path)
        assert set(back) == set(named)
        for k in named:
            np.testing.assert_array_equal(back[k], named[k].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tnsr"
        path.write_bytes(b"JUNK" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            ad.load_tensors(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.tnsr"
        ad.save_tensors({"x": tensor((4, 4))}, path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            ad.load_tensors(path)
