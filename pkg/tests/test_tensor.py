import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from apprentice import tensor as T
from apprentice.tensor import SGD, SgdState, Tensor, no_grad, set_debug, sgd_step
from gradcheck import DEFAULT_TOLERANCE, PRIMITIVE_CASES, TOLERANCE, worst_error
from oracles import conv2d_loops, cross_entropy_rows


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_gradients_match_finite_differences(name):
    assert worst_error(name, instances=20) <= TOLERANCE.get(name, DEFAULT_TOLERANCE)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), pad=1).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_six_loop_reference(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        # small integers keep every partial sum exact, so equality is exact
        x = rng.integers(-3, 4, (2, 3, 5, 5)).astype(np.float64)
        w = rng.integers(-2, 3, (4, 3, 3, 3)).astype(np.float64)
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w), stride, pad).data,
                                      conv2d_loops(x, w, stride, pad))

    def test_floor_mode_matches_reference(self):
        rng = np.random.default_rng(7)
        x = rng.integers(-3, 4, (1, 2, 6, 6)).astype(np.float64)
        w = rng.integers(-2, 3, (3, 2, 3, 3)).astype(np.float64)
        out = T.conv2d(Tensor(x), Tensor(w), 2, 1, floor=True).data
        assert out.shape == (1, 3, 3, 3)
        np.testing.assert_array_equal(out, conv2d_loops(x, w, 2, 1))

    def test_non_integral_extent_rejected(self):
        with pytest.raises(ValueError, match="does not tile"):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=0)


class TestBatchnorm:
    def test_standardized_batch_passes_through(self):
        x = np.array([[-1.0], [1.0], [-1.0], [1.0]])
        out = T.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), True)
        assert np.max(np.abs(out.data - x)) <= 1e-5

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3))
        beta = np.array([0.25, -2.0])
        out = T.batchnorm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), np.zeros(2), np.ones(2), True)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))

    def test_running_stats_follow_moving_average(self):
        x = np.random.default_rng(0).standard_normal((8, 3))
        rm, rv = np.zeros(3), np.ones(3)
        T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0))

    def test_eval_mode_uses_running_stats(self):
        x = np.full((2, 1), 3.0)
        out = T.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([1.0]),
                          np.array([4.0 - 1e-5]), False)
        np.testing.assert_allclose(out.data, 1.0)

    def test_constant_channel_is_finite(self):
        out = T.batchnorm(Tensor(np.ones((4, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2), True)
        assert np.all(np.isfinite(out.data))


class TestSoftmaxCrossEntropy:
    def test_symmetric(self):
        assert T.softmax(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_known_values(self):
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_one_hot_zero(self):
        y = np.eye(3)
        assert T.cross_entropy(y, Tensor(y)).item() == 0.0

    def test_ln2(self):
        assert abs(T.cross_entropy([[1.0, 0.0]], Tensor([[0.5, 0.5]])).item() - math.log(2)) <= 1e-6

    def test_soft_target(self):
        expected = -(0.7 * math.log(0.6) + 0.3 * math.log(0.4))
        assert abs(T.cross_entropy([[0.7, 0.3]], Tensor([[0.6, 0.4]])).item() - expected) <= 1e-12

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            T.cross_entropy(np.ones((2, 3)) / 3, Tensor(np.ones((2, 4)) / 4))

    def test_clamp_keeps_zero_probability_finite(self):
        loss = T.cross_entropy([[1.0, 0.0]], Tensor([[0.0, 1.0]]))
        assert abs(loss.item() + math.log(1e-12)) < 1e-9

    def test_matches_row_oracle(self):
        rng = np.random.default_rng(3)
        t, p = rng.dirichlet(np.ones(5), 4), rng.dirichlet(np.ones(5), 4)
        assert abs(T.cross_entropy(t, Tensor(p)).item() - cross_entropy_rows(t, p)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(z):
    assert np.all(np.abs(T.softmax(Tensor(z)).data.sum(axis=-1) - 1.0) <= 1e-6)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (2, 5), elements=st.integers(-64, 64).map(lambda i: i / 8)),
       st.integers(-40, 40).map(lambda i: i / 4))
def test_softmax_shift_invariance_is_exact(z, c):
    # dyadic values: the shift and max-subtraction are both exact
    np.testing.assert_array_equal(T.softmax(Tensor(z + c)).data, T.softmax(Tensor(z)).data)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_softmax_shift_invariance_general(z):
    np.testing.assert_allclose(T.softmax(Tensor(z + 7.3)).data, T.softmax(Tensor(z)).data, rtol=1e-12, atol=1e-15)


class TestGraph:
    def test_gradients_accumulate_across_uses(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])

    def test_graph_is_freed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.relu(x * 2.0)
        loss = y.sum()
        loss.backward()
        assert loss._parents == () and y._parents == () and y._backward is None

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_debug_mode_flags_non_finite(self):
        set_debug(True)
        try:
            with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
                Tensor(np.array([1e308])) * 1e10
        finally:
            set_debug(False)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((2, 3, 6, 6)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
        b = T.conv2d(Tensor(x), Tensor(w), 1, 1).data
        assert a.tobytes() == b.tobytes()


class TestSgd:
    def test_plain_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        sgd_step([p], [np.array([1.0])], SgdState([p], 0.1, momentum=0.0))
        assert p.data.tolist() == [0.9]

    def test_momentum_hand_iteration(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = SgdState([p], 1.0, momentum=0.9)
        sgd_step([p], [np.array([1.0])], state)
        assert p.data.tolist() == [-1.0]
        sgd_step([p], [np.array([1.0])], state)
        assert abs(p.data[0] + 2.9) < 1e-15

    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        sgd_step([p], [np.zeros(2)], SgdState([p], 0.5, momentum=0.0))
        assert p.data.tolist() == [1.5, -2.0]

    def test_missing_gradient_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError, match="missing gradient"):
            sgd_step([p], [None], SgdState([p], 0.1))

    def test_velocity_shapes_match(self):
        ps = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(4), requires_grad=True)]
        state = SgdState(ps, 0.1)
        assert [v.shape for v in state.velocity] == [(2, 3), (4,)]

    def test_weight_decay_is_l2_gradient(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD([p], 0.1, momentum=0.0, weight_decay=0.5)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data.tolist() == [2.0 - 0.1 * 0.5 * 2.0]

    @pytest.mark.parametrize("lr,mom", [(0.0, 0.9), (0.1, 1.0), (0.1, -0.1)])
    def test_invalid_hyperparameters(self, lr, mom):
        with pytest.raises(ValueError):
            SgdState([], lr, mom)
