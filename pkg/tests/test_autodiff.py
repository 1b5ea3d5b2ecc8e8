import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scis import autodiff as ad


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestMatmul:
    def test_identity(self):
        m = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.Tensor(np.eye(2)), m)
        assert np.array_equal(out.data, m.data)

    def test_column_selection(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0], [3.0, 4.0]]),
                        ad.Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, [[2.0], [4.0]])

    def test_against_triple_loop(self):
        a, b = rand((3, 4), 1), rand((4, 2), 2)
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        out = ad.matmul(ad.Tensor(a), ad.Tensor(b))
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"3, 4.*5, 2"):
            ad.matmul(ad.Tensor(rand((3, 4))), ad.Tensor(rand((5, 2))))

    def test_gradients(self):
        a = ad.Tensor(rand((3, 4), 3), requires_grad=True)
        b = ad.Tensor(rand((4, 2), 4), requires_grad=True)
        loss = ad.sum_all(ad.matmul(a, b))
        ad.backward(loss)
        g = np.ones((3, 2))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


class TestSoftmaxRows:
    def test_symmetry(self):
        out = ad.softmax_rows(ad.Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        out = ad.softmax_rows(ad.Tensor([[7.3]]))
        assert out.data[0, 0] == 1.0

    def test_direct_evaluation(self):
        x = np.array([1.0, 2.0, 3.0])
        out = ad.softmax_rows(ad.Tensor(x), scale=1.0)
        expect = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_scale_must_be_positive(self):
        with pytest.raises(ad.ContractError):
            ad.softmax_rows(ad.Tensor([1.0, 2.0]), scale=0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
    def test_rows_sum_to_one(self, rows, cols, seed):
        x = ad.Tensor(np.random.default_rng(seed).normal(scale=30, size=(rows, cols)))
        out = ad.softmax_rows(x, scale=2.0)
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_extreme_inputs_stay_finite(self):
        out = ad.softmax_rows(ad.Tensor([[1e6, -1e6, 0.0]]))
        assert np.isfinite(out.data).all()


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(ad.Tensor([-1e4, 1e4]))
        assert np.isfinite(out.data).all()

    def test_sub_additive_identity(self):
        x = ad.Tensor(rand((2, 3)))
        out = ad.sub(x, ad.Tensor(np.zeros((2, 3))))
        assert np.array_equal(out.data, x.data)

    def test_concat_slice_roundtrip(self):
        a, b = ad.Tensor(rand((2, 3), 5)), ad.Tensor(rand((2, 2), 6))
        joined = ad.concat_last(a, b)
        assert np.array_equal(ad.slice_last(joined, 0, 3).data, a.data)
        assert np.array_equal(ad.slice_last(joined, 3, 5).data, b.data)

    def test_broadcast_mul_gradient_reduces(self):
        lam = ad.Tensor(rand(4, 7), requires_grad=True)
        x = ad.Tensor(rand((2, 3, 4), 8), requires_grad=True)
        ad.backward(ad.sum_all(ad.mul_elementwise(lam, x)))
        assert lam.grad.shape == (4,)
        assert np.allclose(lam.grad, x.data.sum(axis=(0, 1)))


class TestMlpForward:
    def test_hand_computed_two_layer(self):
        w1 = ad.Tensor([[1.0, -1.0], [0.5, 2.0]])
        b1 = ad.Tensor([0.0, 1.0])
        w2 = ad.Tensor([[1.0], [1.0]])
        b2 = ad.Tensor([0.5])
        x = ad.Tensor([[2.0, 1.0]])
        # hidden = relu([2*1+1*0.5, 2*-1+1*2+1]) = [2.5, 1.0]
        out = ad.mlp_forward([(w1, b1), (w2, b2)], x)
        assert abs(out.data[0, 0] - 4.0) < 1e-12

    def test_chain_mismatch_raises(self):
        params = [(ad.Tensor(rand((3, 4))), ad.Tensor(np.zeros(4))),
                  (ad.Tensor(rand((5, 2))), ad.Tensor(np.zeros(2)))]
        with pytest.raises(ad.DimensionError):
            ad.mlp_forward(params, ad.Tensor(rand((1, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(rand((3, 2)), requires_grad=True)
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_softmax_sum_gives_zeros(self):
        x = ad.Tensor(rand((4, 5)), requires_grad=True)
        ad.backward(ad.sum_all(ad.softmax_rows(x)))
        assert np.max(np.abs(x.grad)) < 1e-12

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(rand((2, 2)), requires_grad=True)
        with pytest.raises(ad.ContractError):
            ad.backward(ad.add(x, x))

    def test_leaf_loss_rejected(self):
        with pytest.raises(ad.ContractError):
            ad.backward(ad.Tensor(1.0, requires_grad=True))

    def test_grad_accumulates_across_uses(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum_all(ad.add(x, x)))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_suppresses_history(self):
        x = ad.Tensor(rand(3), requires_grad=True)
        with ad.no_grad():
            y = ad.sum_all(x)
        assert y._record is None

    def test_frozen_leaf_gets_no_grad(self):
        x = ad.Tensor(rand((2, 2)), requires_grad=True)
        z = ad.Tensor(rand((2, 2)))
        ad.backward(ad.sum_all(ad.matmul(x, z)))
        assert z.grad is None and x.grad is not None

    def test_determinism_bitwise(self):
        x = ad.Tensor(rand((3, 3), 9))
        a = ad.softmax_rows(ad.sigmoid(ad.matmul(x, x))).data
        b = ad.softmax_rows(ad.sigmoid(ad.matmul(x, x))).data
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_quadratic(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)

        def f(t):
            return ad.sum_all(ad.mul_elementwise(t, t))

        assert ad.grad_check(f, x, eps=1e-6) < 1e-8

    def test_constant_function_zero_error(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        c = ad.Tensor([5.0], requires_grad=True)

        def f(t):
            return ad.sum_all(ad.mul_elementwise(c, c))

        assert ad.grad_check(f, x, eps=1e-6) == 0.0

    def test_sigmoid_linear_chain(self):
        w = ad.Tensor(rand((5, 3), 11))
        x = ad.Tensor(rand((2, 5), 12), requires_grad=True)

        def f(t):
            return ad.sum_all(ad.sigmoid(ad.matmul(t, w)))

        assert ad.grad_check(f, x, eps=1e-6) < 1e-5

    def test_nondeterministic_f_rejected(self):
        state = {"n": 0}
        x = ad.Tensor([1.0], requires_grad=True)

        def f(t):
            state["n"] += 1
            return ad.sum_all(ad.mul_elementwise(t, ad.Tensor([float(state["n"])])))

        with pytest.raises(ad.ContractError, match="deterministic"):
            ad.grad_check(f, x)

    def test_eps_range_enforced(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.ContractError):
            ad.grad_check(lambda t: ad.sum_all(t), x, eps=0.1)


def test_cross_entropy_matches_manual():
    logits = rand((4, 3), 13)
    labels = np.array([0, 2, 1, 1])
    out = ad.cross_entropy_logits(ad.Tensor(logits), labels)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    manual = -np.log(probs[np.arange(4), labels]).mean()
    assert abs(out.item() - manual) < 1e-12


def test_cross_entropy_gradient():
    logits = ad.Tensor(rand((4, 3), 14), requires_grad=True)
    labels = np.array([0, 2, 1, 1])

    def f(t):
        return ad.cross_entropy_logits(t, labels)

    assert ad.grad_check(f, logits, eps=1e-6) < 1e-6


def test_tensor_json_roundtrip():
    t = ad.Tensor(rand((2, 3), 15))
    back = ad.Tensor.from_json(t.to_json())
    assert back.shape == t.shape
    assert np.array_equal(back.data, t.data)
