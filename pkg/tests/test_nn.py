import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dacood import nn
from dacood.nn import MlpParams
from dacood.selfcheck import finite_difference_gradients, relative_error

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def random_params(dims, seed=0):
    rng = np.random.default_rng(seed)
    p = MlpParams.init(dims, rng)
    for b in p.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    return p


class TestForward:
    def test_zero_params_give_zero_logits(self):
        p = MlpParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
        X = np.random.default_rng(1).normal(size=(5, 3))
        np.testing.assert_array_equal(nn.forward(p, X).logits, np.zeros((5, 2)))

    def test_identity_layer(self):
        p = MlpParams([np.eye(2)], [np.zeros(2)])
        np.testing.assert_array_equal(nn.forward(p, np.array([[1.0, 2.0]])).logits, [[1.0, 2.0]])

    def test_same_seed_dropout_is_bitwise_identical(self):
        p = random_params([4, 16, 8, 3])
        X = np.random.default_rng(2).normal(size=(6, 4))
        a = nn.forward(p, X, 0.5, 123).logits
        b = nn.forward(p, X, 0.5, 123).logits
        assert a.tobytes() == b.tobytes()
        c = nn.forward(p, X, 0.5, 124).logits
        assert not np.array_equal(a, c)

    def test_no_dropout_ignores_seed(self):
        p = random_params([4, 16, 3])
        X = np.random.default_rng(2).normal(size=(6, 4))
        t1 = nn.forward(p, X, None, 1)
        t2 = nn.forward(p, X, None, 2)
        assert t1.logits.tobytes() == t2.logits.tobytes()
        assert t1.dropout_masks == []

    def test_inverted_dropout_scaling(self):
        p = MlpParams([np.eye(1000), np.ones((1000, 1))], [np.zeros(1000), np.zeros(1)])
        trace = nn.forward(p, np.ones((1, 1000)), 0.25, 0)
        h = trace.post_activations[0]
        assert set(np.unique(h)) <= {0.0, 1.0 / 0.75}
        assert abs((h == 0).mean() - 0.25) < 0.05

    def test_shape_error_names_layer(self):
        p = random_params([3, 4, 2])
        with pytest.raises(nn.ShapeError, match="layer 0"):
            nn.forward(p, np.zeros((2, 5)))

    def test_params_shape_mismatch(self):
        with pytest.raises(nn.ShapeError, match="layer 1"):
            MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nn.softmax(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)

    @given(a=finite, c=st.floats(-5, 5))
    def test_shift_invariance(self, a, c):
        base = nn.softmax(np.array([[0.0, c, 2 * c]]))
        shifted = nn.softmax(np.array([[a, a + c, a + 2 * c]]))
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_temperature_divides(self):
        np.testing.assert_allclose(
            nn.softmax(np.array([[2.0, 1.0, 0.0]]), 2.0),
            nn.softmax(np.array([[1.0, 0.5, 0.0]]), 1.0),
            atol=1e-15,
        )

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            nn.softmax(np.zeros((1, 2)), 0.0)

    @settings(max_examples=200)
    @given(
        logits=arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
        T=st.floats(0.01, 100),
    )
    def test_rows_sum_to_one_and_argmax_kept(self, logits, T):
        p = nn.softmax(logits, T)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        # argmax is preserved up to exact ties in the scaled logits
        top = p[np.arange(len(p)), logits.argmax(axis=1)]
        np.testing.assert_allclose(top, p.max(axis=1), rtol=0, atol=0)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert nn.cross_entropy(np.array([[0.0, 1.0]]), [1]) == pytest.approx(0.0, abs=1e-15)

    def test_uniform(self):
        assert nn.cross_entropy(np.full((4, 3), 1 / 3), [0, 1, 2, 0]) == pytest.approx(math.log(3), abs=1e-12)

    def test_two_samples(self):
        # true-class probabilities 0.5 and 0.25
        probs = np.array([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]])
        expected = (math.log(2) + math.log(4)) / 2
        assert nn.cross_entropy(probs, [0, 1]) == pytest.approx(expected, abs=1e-15)

    def test_clamp_keeps_it_finite(self):
        assert nn.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            nn.cross_entropy(np.full((1, 3), 1 / 3), [3])

    @given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
    def test_non_negative(self, logits, labels):
        assert nn.cross_entropy(nn.softmax(logits), labels) >= 0.0


class TestBackward:
    @pytest.mark.parametrize("dims", [[2, 16, 8, 3], [3, 5, 2], [4, 6, 5, 4, 3], [2, 3]])
    def test_matches_finite_differences(self, dims):
        rng = np.random.default_rng(len(dims))
        p = random_params(dims, seed=7)
        X = rng.normal(size=(4, dims[0]))
        y = rng.integers(0, dims[-1], 4)
        g = nn.backward(p, nn.forward(p, X), y)
        fd_w, fd_b, fd_x = finite_difference_gradients(p, X, y)
        for a, b in zip(g.d_weights + g.d_biases, fd_w + fd_b):
            assert a.shape == b.shape
            assert relative_error(a, b).max() < 1e-6
        assert relative_error(g.d_input, fd_x).max() < 1e-6

    def test_dropout_masks_are_replayed(self):
        p = random_params([3, 8, 6, 2], seed=3)
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5, 3))
        y = rng.integers(0, 2, 5)
        trace = nn.forward(p, X, 0.3, 99)
        g = nn.backward(p, trace, y)

        def loss(params):
            return nn.cross_entropy(nn.softmax(nn.forward(params, X, 0.3, 99).logits), y)

        h = 1e-5
        for i, w in enumerate(p.weights):
            for idx in [(0, 0), (w.shape[0] - 1, w.shape[1] - 1)]:
                orig = w[idx]
                w[idx] = orig + h
                up = loss(p)
                w[idx] = orig - h
                down = loss(p)
                w[idx] = orig
                assert g.d_weights[i][idx] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)

    def test_zero_input_zero_first_layer_grad(self):
        p = random_params([3, 4, 2])
        for b in p.biases:
            b[:] = 0
        g = nn.backward(p, nn.forward(p, np.zeros((3, 3))), [0, 1, 0])
        np.testing.assert_array_equal(g.d_weights[0], 0.0)

    def test_trace_params_mismatch(self):
        trace = nn.forward(random_params([3, 4, 2]), np.zeros((1, 3)))
        with pytest.raises(nn.ShapeError):
            nn.backward(random_params([3, 4, 4, 2]), trace, [0])


class TestPenultimate:
    def test_rectifier(self):
        p = MlpParams([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
        np.testing.assert_array_equal(nn.penultimate_features(nn.forward(p, np.array([[1.0, -1.0]]))), [[1.0, 0.0]])

    def test_width(self):
        p = random_params([5, 7, 11, 3])
        assert nn.penultimate_features(nn.forward(p, np.zeros((2, 5)))).shape == (2, 11)

    def test_deterministic(self):
        p = random_params([5, 7, 3])
        x = np.ones((1, 5))
        a = nn.penultimate_features(nn.forward(p, x))
        b = nn.penultimate_features(nn.forward(p, x))
        assert a.tobytes() == b.tobytes()

    def test_no_hidden_layer(self):
        p = MlpParams([np.eye(2)], [np.zeros(2)])
        with pytest.raises(nn.UnsupportedArchitectureError):
            nn.penultimate_features(nn.forward(p, np.zeros((1, 2))))
