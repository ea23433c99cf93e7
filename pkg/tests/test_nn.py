import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmed import nn
from oracles import central_diff, mlp_loss, random_net, rel_error


def params_from(weights, biases, dtype=np.float64):
    return nn.MlpParams(tuple(np.asarray(w, dtype=dtype) for w in weights),
                        tuple(np.asarray(b, dtype=dtype) for b in biases))


class TestInit:
    def test_mnist_shapes(self):
        p = nn.init_mlp([784, 400, 400, 10], seed=7)
        assert [w.shape for w in p.weights] == [(400, 784), (400, 400), (10, 400)]
        assert [b.shape for b in p.biases] == [(400,), (400,), (10,)]
        assert p.dtype == np.float32

    def test_biases_zero(self):
        p = nn.init_mlp([2, 2], seed=123)
        assert np.array_equal(p.biases[0], [0.0, 0.0])

    def test_deterministic(self):
        a = nn.init_mlp([784, 400, 400, 10], seed=3)
        b = nn.init_mlp([784, 400, 400, 10], seed=3)
        assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), b.arrays()))
        c = nn.init_mlp([784, 400, 400, 10], seed=4)
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_he_scale(self):
        p = nn.init_mlp([784, 400], seed=0)
        assert p.weights[0].std() == pytest.approx(math.sqrt(2 / 784), rel=0.02)
        assert abs(p.weights[0].mean()) < 1e-3

    @pytest.mark.parametrize("sizes", [[], [5], [3, 0], [3, -1, 2], [2.5, 3]])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ValueError):
            nn.init_mlp(sizes, seed=0)

    def test_layer_chain_validated(self):
        with pytest.raises(ValueError):
            nn.MlpParams((np.zeros((3, 2)), np.zeros((2, 4))), (np.zeros(3), np.zeros(2)))


class TestForward:
    def test_zero_params_give_zero_logits(self):
        p = params_from([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
        logits, _ = nn.forward(p, np.random.default_rng(0).random((5, 3)))
        assert np.array_equal(logits, np.zeros((5, 2)))

    def test_identity_layer(self):
        p = params_from([np.eye(2)], [np.zeros(2)])
        logits, _ = nn.forward(p, np.array([[1.0, 2.0]]))
        assert np.array_equal(logits, [[1.0, 2.0]])

    def test_batch_shape(self):
        p = nn.init_mlp([784, 400, 400, 10], seed=1)
        logits, cache = nn.forward(p, np.random.default_rng(0).random((10, 784)))
        assert logits.shape == (10, 10)
        assert np.isfinite(logits).all()
        assert len(cache.pre_activations) == 3

    def test_dimension_mismatch(self):
        p = nn.init_mlp([4, 3], seed=0)
        with pytest.raises(ValueError):
            nn.forward(p, np.zeros((2, 5)))

    def test_pure(self):
        p = nn.init_mlp([6, 5, 3], seed=0)
        x = np.random.default_rng(1).random((4, 6))
        a, _ = nn.forward(p, x)
        b, _ = nn.forward(p, x)
        assert np.array_equal(a, b)

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        _, ws, bs = random_net(rng, n_in=5, n_out=4)
        x = rng.standard_normal((3, 5))
        y = np.array([0, 3, 1])
        p = params_from(ws, bs)
        assert nn.cross_entropy(nn.forward(p, x)[0], y) == pytest.approx(mlp_loss(ws, bs, x, y),
                                                                        rel=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        assert nn.cross_entropy(np.zeros((3, 10)), [0, 4, 9]) == pytest.approx(math.log(10))

    def test_saturated_correct(self):
        logits = np.eye(3)[[0, 2]] * 1e6
        assert nn.cross_entropy(logits, [0, 2]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        # scripted oracle: -log(e^1 / (e^1 + e^2 + e^3))
        expected = -math.log(math.exp(1) / sum(math.exp(v) for v in (1, 2, 3)))
        assert expected == pytest.approx(2.40760596, abs=1e-8)
        assert nn.cross_entropy(np.array([[1.0, 2.0, 3.0]]), [0]) == pytest.approx(expected,
                                                                                rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            nn.cross_entropy(np.zeros((2, 3)), [0, 3])
        with pytest.raises(ValueError):
            nn.cross_entropy(np.zeros((2, 3)), [-1, 0])

    def test_reductions(self):
        logits = np.random.default_rng(0).standard_normal((4, 3))
        y = [0, 1, 2, 1]
        per = nn.cross_entropy(logits, y, reduction="none")
        assert per.shape == (4,)
        assert (per >= 0).all()
        assert nn.cross_entropy(logits, y) == pytest.approx(per.mean())
        assert nn.cross_entropy(logits, y, reduction="sum") == pytest.approx(per.sum())

    def test_huge_logits_stable(self):
        assert np.isfinite(nn.cross_entropy(np.array([[1e30, -1e30]]), [1]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, 6)
        perm = rng.permutation(6)
        assert nn.cross_entropy(logits[perm], y[perm]) == pytest.approx(
            nn.cross_entropy(logits, y), rel=1e-12)


class TestBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        ws = [rng.standard_normal((8, 4)) * 0.7, rng.standard_normal((3, 8)) * 0.5]
        bs = [rng.standard_normal(8) * 0.1, rng.standard_normal(3) * 0.1]
        x = rng.standard_normal((10, 4))
        y = rng.integers(0, 3, 10)
        p = params_from(ws, bs)
        _, cache = nn.forward(p, x)
        g = nn.backward(p, cache, y)
        f = lambda: mlp_loss(ws, bs, x, y)
        for i in range(2):
            assert rel_error(g.param_grads.weights[i], central_diff(f, ws[i])) < 1e-6
            assert rel_error(g.param_grads.biases[i], central_diff(f, bs[i])) < 1e-6
        assert rel_error(g.input_grads, central_diff(f, x)) < 1e-6

    def test_saturated_batch_has_zero_grad(self):
        p = params_from([np.eye(3) * 1e4], [np.zeros(3)])
        x = np.eye(3)[[0, 1, 2, 1]]
        _, cache = nn.forward(p, x)
        g = nn.backward(p, cache, [0, 1, 2, 1])
        assert np.abs(g.param_grads.to_vector()).max() < 1e-12
        assert np.abs(g.input_grads).max() < 1e-12

    def test_duplicating_batch_keeps_param_grads(self):
        p = nn.init_mlp([5, 6, 3], seed=2, dtype=np.float64)
        rng = np.random.default_rng(0)
        x, y = rng.random((4, 5)), rng.integers(0, 3, 4)
        _, g1 = nn.loss_and_grads(p, x, y)
        _, g2 = nn.loss_and_grads(p, np.concatenate([x, x]), np.concatenate([y, y]))
        np.testing.assert_allclose(g1.param_grads.to_vector(), g2.param_grads.to_vector(),
                                   rtol=1e-12, atol=1e-15)

    def test_stale_cache(self):
        p = nn.init_mlp([4, 3], seed=0)
        q = nn.init_mlp([4, 3], seed=1)
        _, cache = nn.forward(p, np.zeros((1, 4)))
        with pytest.raises(nn.StaleCacheError):
            nn.backward(q, cache, [0])

    def test_shapes_mirror_inputs(self):
        p = nn.init_mlp([7, 5, 4], seed=0)
        x = np.random.default_rng(0).random((3, 7)).astype(np.float32)
        _, g = nn.loss_and_grads(p, x, [0, 1, 2])
        assert g.param_grads.layer_sizes == p.layer_sizes
        assert g.input_grads.shape == x.shape

    def test_input_grad_only(self):
        p = nn.init_mlp([7, 5, 4], seed=0, dtype=np.float64)
        x = np.random.default_rng(0).random((3, 7))
        _, cache = nn.forward(p, x)
        full = nn.backward(p, cache, [0, 1, 2])
        only = nn.backward(p, cache, [0, 1, 2], param_grads=False)
        assert only.param_grads is None
        assert np.array_equal(full.input_grads, only.input_grads)


class TestSgd:
    def test_scalar_step(self):
        p = params_from([np.ones((1, 1))], [np.ones(1)])
        g = params_from([np.full((1, 1), 2.0)], [np.full(1, 2.0)])
        q = nn.sgd_step(p, g, 0.05)
        assert q.weights[0][0, 0] == pytest.approx(0.9)
        assert p.weights[0][0, 0] == 1.0  # value semantics

    def test_zero_grad(self):
        p = nn.init_mlp([3, 2], seed=0)
        zero = p.from_vector(np.zeros_like(p.to_vector()))
        q = nn.sgd_step(p, zero, 0.1)
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))

    def test_linearity(self):
        p = nn.init_mlp([3, 4, 2], seed=0, dtype=np.float64)
        g = p.from_vector(np.random.default_rng(0).standard_normal(p.to_vector().size))
        twice = nn.sgd_step(nn.sgd_step(p, g, 0.05), g, 0.05)
        once = nn.sgd_step(p, p.from_vector(2 * g.to_vector()), 0.05)
        np.testing.assert_allclose(twice.to_vector(), once.to_vector(), rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("lr", [float("nan"), float("inf")])
    def test_non_finite_lr(self, lr):
        p = nn.init_mlp([3, 2], seed=0)
        with pytest.raises(ValueError):
            nn.sgd_step(p, p, lr)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.sgd_step(nn.init_mlp([3, 2], 0), nn.init_mlp([3, 3], 0), 0.1)


class TestAccuracy:
    def test_memorizer(self):
        x = np.eye(4)
        p = params_from([np.eye(4) * 5], [np.zeros(4)])
        assert nn.evaluate_accuracy(p, x, [0, 1, 2, 3]) == 1.0

    def test_constant_logits(self):
        p = params_from([np.zeros((10, 3))], [np.zeros(10)])
        y = np.repeat(np.arange(10), 7)
        assert nn.evaluate_accuracy(p, np.ones((70, 3)), y) == pytest.approx(0.1)

    def test_ties_go_to_lowest_index(self):
        p = params_from([np.zeros((3, 2))], [np.array([1.0, 1.0, 0.0])])
        assert nn.predict(p, np.zeros((2, 2))).tolist() == [0, 0]

    def test_empty(self):
        with pytest.raises(ValueError):
            nn.evaluate_accuracy(nn.init_mlp([2, 2], 0), np.zeros((0, 2)), [])


class TestParamsVector:
    def test_roundtrip(self):
        p = nn.init_mlp([5, 4, 3], seed=0)
        q = p.from_vector(p.to_vector())
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))

    def test_all_finite(self):
        p = nn.init_mlp([2, 2], seed=0)
        assert p.all_finite()
        bad = p.from_vector(np.full(p.to_vector().size, np.nan))
        assert not bad.all_finite()
