import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opic import mesh
from opic import nncore as nn
from opic.errors import NumericError


@pytest.fixture(scope="module")
def h():
    return mesh.build_hierarchy(2)


def identity_params(channels):
    taps = np.zeros((channels, channels, 7))
    for i in range(channels):
        taps[i, i, 0] = 1.0
    return nn.ConvParams(taps, np.zeros(channels))


class TestMeshConv:
    def test_identity_center_tap(self, h):
        rng = np.random.default_rng(0)
        x = nn.ChannelField(1, rng.standard_normal((3, 42)))
        out = nn.mesh_conv(x, identity_params(3), h.mesh_at(1))
        assert np.array_equal(out.data, x.data)

    def test_zero_taps_bias_only(self, h):
        p = nn.ConvParams(np.zeros((2, 1, 7)), np.array([1.5, -0.5]))
        x = nn.ChannelField(1, np.random.default_rng(1).standard_normal((1, 42)))
        out = nn.mesh_conv(x, p, h.mesh_at(1))
        assert np.allclose(out.data[0], 1.5)
        assert np.allclose(out.data[1], -0.5)

    def test_uniform_taps_average_ring(self, h):
        m = h.mesh_at(2)
        v = 20  # hexagonal
        data = np.zeros((1, m.n_vertices))
        data[0, m.one_ring(v)] = np.arange(1, 7)
        p = nn.ConvParams(np.full((1, 1, 7), 1 / 7), np.zeros(1))
        out = nn.mesh_conv(nn.ChannelField(2, data), p, m)
        assert out.data[0, v] == pytest.approx(3.0, abs=1e-12)

    def test_pentagon_rereads_center(self, h):
        m = h.mesh_at(1)
        v = 3  # pentagonal
        data = np.zeros((1, m.n_vertices))
        data[0, v] = 1.0
        taps = np.zeros((1, 1, 7))
        taps[0, 0, 6] = 1.0  # only the 7th tap
        out = nn.mesh_conv(nn.ChannelField(1, data), nn.ConvParams(taps, np.zeros(1)), m)
        assert out.data[0, v] == 1.0

    def test_linear_in_input(self, h):
        m = h.mesh_at(1)
        rng = np.random.default_rng(2)
        p = nn.glorot_conv_params(2, 3, rng, dtype=np.float64)
        p.bias.data[:] = 0.0
        a = rng.standard_normal((2, 42))
        b = rng.standard_normal((2, 42))
        out_sum = nn.mesh_conv(nn.ChannelField(1, 2 * a + 3 * b), p, m)
        out_a = nn.mesh_conv(nn.ChannelField(1, a), p, m)
        out_b = nn.mesh_conv(nn.ChannelField(1, b), p, m)
        assert np.allclose(out_sum.data, 2 * out_a.data + 3 * out_b.data, atol=1e-12)

    def test_channel_permutation_invariance(self, h):
        m = h.mesh_at(1)
        rng = np.random.default_rng(3)
        p = nn.glorot_conv_params(3, 2, rng, dtype=np.float64)
        x = rng.standard_normal((3, 42))
        perm = [2, 0, 1]
        p_perm = nn.ConvParams(p.taps.data[:, perm, :].copy(), p.bias.data.copy())
        out = nn.mesh_conv(nn.ChannelField(1, x), p, m)
        out_perm = nn.mesh_conv(nn.ChannelField(1, x[perm]), p_perm, m)
        assert np.allclose(out.data, out_perm.data, atol=1e-12)

    def test_channel_mismatch_rejected(self, h):
        x = nn.ChannelField(1, np.zeros((2, 42)))
        with pytest.raises(ValueError):
            nn.mesh_conv(x, identity_params(3), h.mesh_at(1))

    def test_level_mismatch_rejected(self, h):
        x = nn.ChannelField(2, np.zeros((1, 162)))
        with pytest.raises(ValueError):
            nn.mesh_conv(x, identity_params(1), h.mesh_at(1))


class TestPoolUnpool:
    def test_pool_preserves_constants(self, h):
        x = nn.ChannelField(2, np.full((2, 162), 4.5))
        out = nn.mesh_pool(x, h)
        assert out.level == 1
        assert out.data.shape == (2, 42)
        assert np.allclose(out.data, 4.5)

    def test_pool_impulse_hexagonal(self, h):
        m = h.mesh_at(2)
        data = np.zeros((1, m.n_vertices))
        data[0, 20] = 1.0  # coarse-coincident, hexagonal at the coarse level
        out = nn.mesh_pool(nn.ChannelField(2, data), h)
        assert out.data[0, 20] == pytest.approx(1 / 7)

    def test_pool_level0_rejected(self, h):
        with pytest.raises(ValueError):
            nn.mesh_pool(nn.ChannelField(0, np.zeros((1, 12))), h)

    def test_unpool_constant(self, h):
        out = nn.mesh_unpool(nn.ChannelField(1, np.full((1, 42), 2.0)), h)
        assert out.level == 2
        assert np.allclose(out.data, 2.0)

    def test_unpool_midpoint_mean(self, h):
        coarse = h.mesh_at(0)
        parents = h.parents[0]
        data = np.zeros((1, 12))
        data[0, parents[0, 0]] = 0.0
        data[0, parents[0, 1]] = 1.0
        out = nn.mesh_unpool(nn.ChannelField(0, data), h)
        assert out.data[0, coarse.n_vertices + 0] == pytest.approx(0.5)

    def test_unpool_then_pool_constant_identity(self, h):
        x = nn.ChannelField(1, np.full((3, 42), -1.25))
        back = nn.mesh_pool(nn.mesh_unpool(x, h), h)
        assert np.allclose(back.data, x.data)

    def test_unpool_finest_rejected(self, h):
        with pytest.raises(ValueError):
            nn.mesh_unpool(nn.ChannelField(2, np.zeros((1, 162))), h)


class TestL2Loss:
    def test_zero_when_equal(self):
        x = np.random.default_rng(0).standard_normal((2, 5))
        assert nn.l2_loss(x, x.copy()).value == 0.0

    def test_unit_offset(self):
        x = np.zeros((3, 4))
        assert nn.l2_loss(x + 1.0, x).value == pytest.approx(1.0)

    def test_mean_convention(self):
        assert nn.l2_loss(np.array([1.0, 2.0]), np.zeros(2)).value == pytest.approx(2.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.l2_loss(np.zeros(3), np.zeros(4))

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8),
           st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_symmetric_nonnegative(self, a, b):
        n = min(len(a), len(b))
        a, b = np.array(a[:n]), np.array(b[:n])
        ab = nn.l2_loss(a, b).value
        assert ab >= 0.0
        assert ab == pytest.approx(nn.l2_loss(b, a).value)

    def test_gradient(self):
        pred = nn.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = nn.l2_loss(pred, np.zeros(2))
        nn.backward(loss)
        assert np.allclose(pred.grad, 2 * pred.data / 2)


class TestRcLoss:
    def test_zero_at_own_target_with_distant_others(self):
        own = np.zeros(4)
        other = np.full(4, 10.0)
        val = nn.rc_loss(own, own, [other], alpha=0.5, margin=1.0).value
        assert val == 0.0

    def test_alpha_one_is_l2(self):
        rng = np.random.default_rng(4)
        pred, own, other = rng.standard_normal((3, 6))
        rc = nn.rc_loss(pred, own, [other], alpha=1.0, margin=0.3).value
        assert rc == pytest.approx(nn.l2_loss(pred, own).value)

    def test_hinge_fixture(self):
        # l_same = 1, l_diff = 0.5, alpha = 0.5, margin = 0 -> 0.75
        pred = np.zeros(4)
        own = np.full(4, 1.0)
        other = np.full(4, np.sqrt(0.5))
        val = nn.rc_loss(pred, own, [other], alpha=0.5, margin=0.0).value
        assert val == pytest.approx(0.75)

    def test_empty_others_rejected(self):
        with pytest.raises(ValueError):
            nn.rc_loss(np.zeros(3), np.zeros(3), [])

    def test_gradient_matches_finite_difference(self, h):
        rng = np.random.default_rng(5)
        m = h.mesh_at(1)
        p = nn.glorot_conv_params(2, 1, rng, dtype=np.float64)
        x = nn.Tensor(rng.standard_normal((1, 42, 2)))
        own = rng.standard_normal((1, 42, 1))
        others = [rng.standard_normal((1, 42, 1)) for _ in range(2)]

        def fwd():
            return nn.rc_loss(nn.conv_op(x, p, m), own, others, alpha=0.4, margin=5.0)

        assert nn.grad_check(fwd, [p.taps, p.bias], eps=1e-6) < 1e-4


class TestBackward:
    def test_unused_parameter_gets_no_gradient(self, h):
        rng = np.random.default_rng(6)
        used = nn.glorot_conv_params(1, 1, rng, dtype=np.float64)
        unused = nn.glorot_conv_params(1, 1, rng, dtype=np.float64)
        x = nn.Tensor(rng.standard_normal((1, 42, 1)))
        loss = nn.l2_loss(nn.conv_op(x, used, h.mesh_at(1)), np.zeros((1, 42, 1)))
        nn.backward(loss)
        assert unused.taps.grad is None
        assert used.taps.grad is not None

    def test_square_gradient(self):
        w = nn.Tensor(np.array([3.0]), requires_grad=True)
        loss = nn.l2_loss(w, np.zeros(1))  # w^2
        nn.backward(loss)
        assert w.grad[0] == pytest.approx(6.0)

    def test_shared_subexpression_accumulates(self):
        w = nn.Tensor(np.array([2.0]), requires_grad=True)
        loss = nn.l2_loss(w, np.zeros(1)) + nn.l2_loss(w, np.zeros(1))
        nn.backward(loss)
        assert w.grad[0] == pytest.approx(8.0)

    def test_nonfinite_loss_rejected(self):
        bad = nn.Tensor(np.array(np.inf), requires_grad=True)
        with pytest.raises(NumericError):
            nn.backward(bad)

    def test_non_scalar_rejected(self):
        t = nn.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            nn.backward(t)


class TestAdam:
    def test_zero_gradient_is_identity(self):
        rng = np.random.default_rng(7)
        params = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
        before = [p.copy() for p in params]
        state = nn.AdamState.for_params(params, lr=0.1)
        nn.adam_step(params, [np.zeros_like(p) for p in params], state)
        for p, b in zip(params, before):
            assert np.array_equal(p, b)

    def test_first_step_magnitude(self):
        theta = np.array([0.0])
        state = nn.AdamState.for_params([theta], lr=0.1)
        nn.adam_step([theta], [np.array([1.0])], state)
        assert abs(theta[0] + 0.1) < 1e-7
        assert state.step == 1

    def test_minimizes_quadratic(self):
        theta = np.array([1.0])
        state = nn.AdamState.for_params([theta], lr=0.1)
        for _ in range(200):
            nn.adam_step([theta], [2.0 * theta], state)
            if abs(theta[0]) < 1e-3:
                break
        assert abs(theta[0]) < 1e-3

    def test_second_moment_nonnegative(self):
        theta = np.array([1.0, -2.0])
        state = nn.AdamState.for_params([theta], lr=0.01)
        for _ in range(5):
            nn.adam_step([theta], [np.random.default_rng(8).standard_normal(2)], state)
        assert np.all(state.second_moment[0] >= 0)

    def test_shape_mismatch_rejected(self):
        theta = np.array([1.0])
        state = nn.AdamState.for_params([theta], lr=0.1)
        with pytest.raises(ValueError):
            nn.adam_step([theta], [np.zeros(2)], state)


class TestGradCheck:
    def test_linear_map_is_exact(self):
        w = nn.Tensor(np.array([1.5, -2.0]), requires_grad=True)
        target = np.array([0.3, 0.7])

        def fwd():
            return nn.l2_loss(w * 2.0, target)

        assert nn.grad_check(fwd, [w], eps=1e-5) < 1e-10

    def test_conv_l2_level1(self, h):
        rng = np.random.default_rng(9)
        m = h.mesh_at(1)
        p = nn.glorot_conv_params(2, 2, rng, dtype=np.float64)
        x = nn.Tensor(rng.standard_normal((1, 42, 2)))
        tgt = rng.standard_normal((1, 42, 2))

        def fwd():
            return nn.l2_loss(nn.conv_op(x, p, m), tgt)

        assert nn.grad_check(fwd, [p.taps, p.bias], eps=1e-6) < 1e-4

    def test_corrupted_gradient_flagged(self):
        w = nn.Tensor(np.array([0.7]), requires_grad=True)

        def doubled_grad(t):
            def bwd(g):
                t.grad = 2.0 * g * 2.0 * t.data if t.grad is None else t.grad
            return nn.Tensor(t.data**2, parents=(t,), bwd=bwd)

        def fwd():
            return doubled_grad(w)

        err = nn.grad_check(fwd, [w], eps=1e-6)
        assert err == pytest.approx(1 / 3, abs=1e-3)

    def test_float32_rejected(self):
        w = nn.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            nn.grad_check(lambda: nn.l2_loss(w, np.zeros(2, dtype=np.float32)), [w])


class TestSmallOps:
    def test_relu_gradient_gates(self):
        x = nn.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        loss = nn.l2_loss(nn.relu(x), np.zeros(2))
        nn.backward(loss)
        assert x.grad[0] == 0.0
        assert x.grad[1] == pytest.approx(2 * 2.0 / 2)

    def test_concat_splits_gradient(self):
        a = nn.Tensor(np.ones((1, 2, 2)), requires_grad=True)
        b = nn.Tensor(np.ones((1, 2, 1)), requires_grad=True)
        out = nn.concat_channels(a, b)
        assert out.data.shape == (1, 2, 3)
        nn.backward(nn.l2_loss(out, np.zeros((1, 2, 3))))
        assert a.grad.shape == (1, 2, 2)
        assert b.grad.shape == (1, 2, 1)

    def test_slice_and_scale_gradcheck(self):
        rng = np.random.default_rng(10)
        x = nn.Tensor(rng.standard_normal((2, 3, 4)))
        gain = nn.Tensor(rng.standard_normal(2), requires_grad=True)
        tgt = rng.standard_normal((2, 3, 2))

        def fwd():
            block = nn.slice_channels(x, 1, 3)
            return nn.l2_loss(nn.channel_scale(block, gain), tgt)

        assert nn.grad_check(fwd, [gain], eps=1e-6) < 1e-8

    def test_slice_batch_gradient(self):
        x = nn.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        loss = nn.l2_loss(nn.slice_batch(x, 1), np.zeros((1, 2)))
        nn.backward(loss)
        assert np.allclose(x.grad[0], 0)
        assert np.allclose(x.grad[2], 0)
        assert np.allclose(x.grad[1], x.data[1])


class TestChannelField:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            nn.ChannelField(0, np.array([[np.nan, 1.0]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            nn.ChannelField(0, np.zeros((2, 2, 2)))


class TestConvParams:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            nn.ConvParams(np.zeros((2, 3, 5)), np.zeros(2))  # 5 taps
        with pytest.raises(ValueError):
            nn.ConvParams(np.zeros((2, 3, 7)), np.zeros(3))  # bias mismatch

    def test_glorot_bound(self):
        rng = np.random.default_rng(11)
        p = nn.glorot_conv_params(4, 8, rng, dtype=np.float64)
        bound = np.sqrt(6.0 / (7 * 4 + 7 * 8))
        assert np.max(np.abs(p.taps.data)) <= bound
        assert np.all(p.bias.data == 0)
