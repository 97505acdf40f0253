import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import (
    dense_reference,
    finite_difference_grads,
    gradcheck_setup,
    max_relative_error,
    random_batch,
    random_small_config,
)
from usn import _seeding
from usn.network import (
    CheckpointError,
    HiddenLayerConfig,
    ModelConfig,
    OptimizerConfig,
    count_parameters,
    cross_entropy,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    nadam_step,
    predict,
    save_checkpoint,
    softmax,
)
from usn.topology import degree_spec, generate_uniform


def mnist_config(density, dtype="float32"):
    return ModelConfig(784, [HiddenLayerConfig(250, density, "relu", 0.2)], 10, seed=1, dtype=dtype)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [dict(size=0), dict(size=3, density=1.2), dict(size=3, activation="tanh"), dict(size=3, dropout=1.0)]
    )
    def test_invalid_hidden(self, kwargs):
        with pytest.raises(ValueError):
            HiddenLayerConfig(**kwargs)

    def test_dict_roundtrip(self):
        cfg = mnist_config(0.1)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_bad_dtype(self):
        with pytest.raises(ValueError):
            ModelConfig(3, [], 2, dtype="float16")


class TestSoftmax:
    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
    def test_columns_sum_to_one(self, z):
        p = softmax(z)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)

    def test_zero_head_gives_uniform(self):
        model = init_model(ModelConfig(4, [], 5, dtype="float64"))
        model.out_weights[:] = 0
        probs, _ = forward(model, np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_allclose(probs, 0.2)

    def test_hand_computed_three_class(self):
        cfg = ModelConfig(2, [HiddenLayerConfig(2, 1.0, "identity")], 3, dtype="float64")
        model = init_model(cfg)
        model.hidden[0].values[:] = [1.0, 0.0, 0.0, 1.0]
        model.out_weights[:] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
        model.out_bias[:] = [0.0, 0.0, -1.0]
        probs, _ = forward(model, np.array([[1.0], [2.0]]))
        # logits (1, 2, 2): e / (e + 2 e^2)
        np.testing.assert_allclose(probs[:, 0], [0.1554, 0.4223, 0.4223], atol=5e-5)


class TestLoss:
    def test_perfect_prediction(self):
        y = np.eye(3)
        assert cross_entropy(y.copy(), y) == 0.0

    @pytest.mark.parametrize("c", [2, 3, 10])
    def test_uniform(self, c):
        y = np.eye(c)
        assert cross_entropy(np.full((c, c), 1.0 / c), y) == pytest.approx(math.log(c))

    def test_clamped_probability(self):
        y = np.array([[1.0], [0.0]])
        p = np.array([[0.0], [1.0]])
        assert cross_entropy(p, y) == pytest.approx(-math.log(1e-12))

    def test_shape_mismatch(self):
        model = init_model(ModelConfig(3, [HiddenLayerConfig(2)], 2, dtype="float64"))
        probs, cache = forward(model, np.ones((3, 4)))
        with pytest.raises(ValueError):
            loss_and_grad(probs, np.ones((2, 3)), cache, model)


class TestGradients:
    def test_six_five_three(self):
        cfg = ModelConfig(6, [HiddenLayerConfig(5, 0.5, "relu")], 3, seed=4, dtype="float64")
        model = init_model(cfg)
        rng = np.random.default_rng(0)
        x, y = random_batch(rng, cfg, 7)
        probs, cache = forward(model, x)
        _, grads = loss_and_grad(probs, y, cache, model)
        assert max_relative_error(grads, finite_difference_grads(model, x, y)) <= 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_random_configs(self, seed):
        rng = np.random.default_rng(100 + seed)
        model, x, y = gradcheck_setup(rng, random_small_config(rng))
        probs, cache = forward(model, x)
        _, grads = loss_and_grad(probs, y, cache, model)
        assert max_relative_error(grads, finite_difference_grads(model, x, y)) <= 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_with_dropout_mask_reused(self, seed):
        rng = np.random.default_rng(200 + seed)
        cfg = random_small_config(rng, dropout=0.3)
        model = init_model(cfg)
        x, y = random_batch(rng, cfg)
        probs, cache = forward(model, x, training=True, rng=_seeding.make_rng(seed))
        _, grads = loss_and_grad(probs, y, cache, model)
        numeric = finite_difference_grads(model, x, y, mask_seed=seed)
        assert max_relative_error(grads, numeric) <= 1e-4

    def test_gradients_live_on_pattern(self):
        cfg = ModelConfig(20, [HiddenLayerConfig(15, 0.2), HiddenLayerConfig(10, 0.3)], 4, dtype="float64")
        model = init_model(cfg)
        patterns = [h.pattern for h in model.hidden]
        rng = np.random.default_rng(1)
        x, y = random_batch(rng, cfg, 16)
        for _ in range(5):
            probs, cache = forward(model, x)
            _, grads = loss_and_grad(probs, y, cache, model)
            assert [g.shape for g in grads] == [p.shape for p in model.parameters()]
            nadam_step(model, grads)
        assert [h.pattern for h in model.hidden] == patterns
        for h in model.hidden:
            dense = h.matrix.to_dense()
            assert np.all(dense[~h.pattern.to_dense()] == 0)


class TestDenseEquivalence:
    @pytest.mark.parametrize("seed", range(3))
    def test_density_one_matches_dense_network(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(12, [HiddenLayerConfig(9, 1.0), HiddenLayerConfig(7, 1.0, "identity")], 4,
                          seed=seed, dtype="float64")
        model = init_model(cfg)
        x, y = random_batch(rng, cfg, 11)
        probs, cache = forward(model, x)
        loss, grads = loss_and_grad(probs, y, cache, model)
        ref_p, ref_loss, ref_grads, _ = dense_reference(model, x, y)
        np.testing.assert_allclose(probs, ref_p, rtol=0, atol=1e-10)
        assert abs(loss - ref_loss) <= 1e-10
        for k, h in enumerate(model.hidden):
            np.testing.assert_allclose(grads[2 * k], ref_grads[2 * k].ravel(), rtol=0, atol=1e-10)
            np.testing.assert_allclose(grads[2 * k + 1], ref_grads[2 * k + 1], rtol=0, atol=1e-10)
        for g, r in zip(grads[-2:], ref_grads[-2:]):
            np.testing.assert_allclose(g, r, rtol=0, atol=1e-10)

    def test_sparse_matches_masked_dense(self):
        rng = np.random.default_rng(3)
        cfg = ModelConfig(10, [HiddenLayerConfig(8, 0.3)], 3, dtype="float64")
        model = init_model(cfg)
        x, y = random_batch(rng, cfg, 6)
        probs, cache = forward(model, x)
        _, grads = loss_and_grad(probs, y, cache, model)
        ref_p, _, ref_grads, _ = dense_reference(model, x, y)
        np.testing.assert_allclose(probs, ref_p, atol=1e-12)
        pat = model.hidden[0].pattern
        np.testing.assert_allclose(grads[0], ref_grads[0][pat.row_ids(), pat.col_indices], atol=1e-12)


class TestDropout:
    def test_evaluation_is_deterministic(self):
        model = init_model(mnist_config(0.1))
        x = np.random.default_rng(0).random((784, 9)).astype(np.float32)
        a, _ = forward(model, x)
        b, _ = forward(model, x)
        assert a.tobytes() == b.tobytes()

    def test_inverted_scaling(self):
        cfg = ModelConfig(5, [HiddenLayerConfig(400, 1.0, "relu", 0.5)], 2, dtype="float64")
        model = init_model(cfg)
        _, cache = forward(model, np.ones((5, 30)), training=True, rng=np.random.default_rng(0))
        mask = cache["masks"][0]
        assert set(np.unique(mask)) == {0.0, 2.0}
        assert abs(np.mean(mask == 0) - 0.5) < 0.02

    def test_training_needs_rng(self):
        model = init_model(ModelConfig(3, [HiddenLayerConfig(4, 1.0, "relu", 0.2)], 2))
        with pytest.raises(ValueError):
            forward(model, np.ones((3, 2)), training=True)


class TestNadam:
    def scalar_model(self, lr=0.001):
        cfg = ModelConfig(1, [], 1, dtype="float64", optimizer=OptimizerConfig(learning_rate=lr))
        model = init_model(cfg)
        model.out_weights[:] = 1.0
        return model

    def test_zero_gradient_no_change(self):
        model = init_model(ModelConfig(4, [HiddenLayerConfig(3, 0.5)], 2, dtype="float64"))
        before = [p.copy() for p in model.parameters()]
        nadam_step(model, [np.zeros_like(p) for p in model.parameters()])
        for a, b in zip(before, model.parameters()):
            assert np.array_equal(a, b)
        assert model.state.step == 1

    def test_first_step_is_signed_lr(self):
        model = init_model(ModelConfig(4, [HiddenLayerConfig(3, 1.0)], 2, dtype="float64"))
        rng = np.random.default_rng(0)
        grads = [rng.normal(size=p.shape) for p in model.parameters()]
        before = [p.copy() for p in model.parameters()]
        nadam_step(model, grads)
        for a, b, g in zip(before, model.parameters(), grads):
            step = b - a
            np.testing.assert_array_equal(np.sign(step), -np.sign(g))
            # m_hat = g and g_hat = 10 g at t=1, so |step| = (0.9 + 0.1 * 10) * lr
            np.testing.assert_allclose(np.abs(step), 1.9e-3, rtol=1e-4)

    def test_quadratic_descent(self):
        model = self.scalar_model(lr=0.1)
        theta = 1.0
        m = v = 0.0
        b1, b2, eps, lr = 0.9, 0.999, 1e-7, 0.1
        for t in range(1, 51):
            g = 2 * model.out_weights[0, 0]
            nadam_step(model, [np.array([[g]]), np.zeros(1)])
            # scalar re-derivation of the same update
            gs = 2 * theta
            m = b1 * m + (1 - b1) * gs
            v = b2 * v + (1 - b2) * gs * gs
            c1, c2 = 1 - b1**t, 1 - b2**t
            theta -= lr * (b1 * m / c1 + (1 - b1) * gs / c1) / (math.sqrt(v / c2) + eps)
        assert abs(model.out_weights[0, 0]) < 0.1
        assert model.out_weights[0, 0] == pytest.approx(theta, abs=1e-12)

    def test_rejects_bad_gradients(self):
        model = self.scalar_model()
        with pytest.raises(FloatingPointError):
            nadam_step(model, [np.array([[np.nan]]), np.zeros(1)])
        with pytest.raises(ValueError):
            nadam_step(model, [np.zeros((1, 1))])
        with pytest.raises(ValueError):
            nadam_step(model, [np.zeros((2, 1)), np.zeros(1)])

    def test_state_mirrors_parameters(self):
        model = init_model(mnist_config(0.1))
        assert [a.shape for a in model.state.m] == [p.shape for p in model.parameters()]
        assert [a.shape for a in model.state.v] == [p.shape for p in model.parameters()]
        assert model.state.step == 0


class TestInit:
    def test_parameter_counts(self):
        assert count_parameters(init_model(mnist_config(0.1))) == 22360
        assert count_parameters(init_model(mnist_config(1.0))) == 196000 + 250 + 2510
        assert count_parameters(init_model(mnist_config(0.0))) == 250 + 2510

    def test_sparse_weight_count(self):
        assert init_model(mnist_config(0.1)).hidden[0].values.shape == (19600,)

    def test_deterministic(self):
        a = save_checkpoint(init_model(mnist_config(0.1)))
        b = save_checkpoint(init_model(mnist_config(0.1)))
        assert a == b

    def test_per_edge_glorot_bound(self):
        model = init_model(ModelConfig(50, [HiddenLayerConfig(30, 0.1)], 3, dtype="float64"))
        w = model.hidden[0]
        pat = w.pattern
        fan_in = pat.row_degrees()[pat.row_ids()]
        fan_out = pat.col_degrees()[pat.col_indices]
        assert np.all(np.abs(w.values) <= np.sqrt(6.0 / (fan_in + fan_out)))
        assert not w.bias.any()

    def test_explicit_topology(self):
        cfg = ModelConfig(8, [HiddenLayerConfig(6, 0.5)], 2)
        topo = generate_uniform(degree_spec(8, 6, 0.5), 123)
        model = init_model(cfg, [topo])
        assert model.topologies() == [topo]
        with pytest.raises(ValueError):
            init_model(cfg, [generate_uniform(degree_spec(6, 8, 0.5), 1)])

    def test_non_finite_input(self):
        model = init_model(ModelConfig(3, [HiddenLayerConfig(2)], 2))
        with pytest.raises(ValueError):
            forward(model, np.array([[np.inf], [0.0], [0.0]]))
        with pytest.raises(ValueError):
            forward(model, np.ones((4, 1)))


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", ["float32", "float64"])
    def test_roundtrip_bit_exact(self, dtype):
        cfg = ModelConfig(30, [HiddenLayerConfig(20, 0.25), HiddenLayerConfig(10, 0.5, "identity", 0.1)],
                          4, seed=9, dtype=dtype)
        model = init_model(cfg)
        blob = save_checkpoint(model)
        back = load_checkpoint(blob)
        assert back.config == model.config
        for a, b in zip(model.parameters(), back.parameters()):
            assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
        assert back.topologies() == model.topologies()
        x = np.random.default_rng(0).normal(size=(30, 5))
        assert predict(model, x).tobytes() == predict(back, x).tobytes()
        assert save_checkpoint(back) == blob

    def test_errors(self):
        blob = save_checkpoint(init_model(ModelConfig(5, [HiddenLayerConfig(4, 0.5)], 2)))
        with pytest.raises(CheckpointError):
            load_checkpoint(b"XXXX" + blob[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:-3])
        with pytest.raises(CheckpointError):
            load_checkpoint(blob + b"\0\0\0\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:40])


def test_predict_chunks_match_single_pass():
    model = init_model(ModelConfig(6, [HiddenLayerConfig(5, 0.4)], 3, dtype="float64"))
    x = np.random.default_rng(2).normal(size=(6, 23))
    np.testing.assert_array_equal(predict(model, x, batch_size=4), forward(model, x)[0])
