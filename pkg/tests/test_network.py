import math

import numpy as np
import pytest

from fedspeech import (AdamState, TrainConfig, adam_step, backward, classifier_stack,
                       cross_entropy, forward, he_init, predict, train_epoch,
                       train_model)
from fedspeech.errors import (ConfigurationError, DataError, ShapeError,
                              TrainingError)
from fedspeech.network import Gradients, LayerGrads, LayerSpec, _batch_slices

from conftest import max_relative_gradient_error, tiny_stack


def test_classifier_stack_dims_chain():
    specs = classifier_stack(4608)
    assert [(s.input_dim, s.output_dim) for s in specs] == [
        (4608, 1024), (1024, 256), (256, 64), (64, 2)]
    assert [s.has_batchnorm for s in specs] == [True, True, True, False]
    assert specs[-1].activation == "softmax"


def test_non_chaining_dims_rejected():
    specs = (LayerSpec(8, 4, True, "relu"), LayerSpec(5, 2, False, "softmax"))
    with pytest.raises(ConfigurationError):
        he_init(specs, np.random.default_rng(0))


class TestHeInit:
    def test_biases_zero_gamma_one(self):
        params = he_init(classifier_stack(32), np.random.default_rng(0))
        for lp in params.layers:
            assert np.all(lp.biases == 0.0)
            if lp.gamma is not None:
                assert np.all(lp.gamma == 1.0)
                assert np.all(lp.beta == 0.0)
                assert np.all(lp.running_mean == 0.0)
                assert np.all(lp.running_var == 1.0)

    def test_weight_std_matches_he_scheme(self):
        # 1e5 weights from repeated 64->2 inits; std should sit within 2%
        # of sqrt(2/64).
        spec = (LayerSpec(64, 2, False, "softmax"),)
        rng = np.random.default_rng(7)
        samples = []
        while sum(s.size for s in samples) < 100_000:
            samples.append(he_init(spec, rng).layers[0].weights)
        std = np.concatenate([s.ravel() for s in samples]).std()
        target = math.sqrt(2.0 / 64.0)
        assert abs(std - target) / target < 0.02

    def test_same_seed_bit_identical(self):
        specs = tiny_stack()
        a = he_init(specs, np.random.default_rng(123))
        b = he_init(specs, np.random.default_rng(123))
        for (_, arr_a), (_, arr_b) in zip(a.named_arrays(), b.named_arrays()):
            assert np.array_equal(arr_a, arr_b)


class TestForward:
    def test_rows_sum_to_one(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 8))
        probs, _ = forward(params, x, "eval")
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9

    def test_softmax_stable_for_large_logits(self):
        # a bare softmax layer driven to logits of magnitude 1e3
        specs = (LayerSpec(2, 2, False, "softmax"),)
        params = he_init(specs, np.random.default_rng(0))
        params.layers[0].weights[:] = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.array([[1e3, -1e3], [-1e3, 1e3], [999.0, 1000.0]])
        probs, _ = forward(params, x, "eval")
        assert np.all(np.isfinite(probs))
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9

    def test_eval_is_pure(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 8))
        before = [arr.copy() for _, arr in params.named_arrays()]
        p1, _ = forward(params, x, "eval")
        p2, _ = forward(params, x, "eval")
        assert np.array_equal(p1, p2)
        for (_, arr), old in zip(params.named_arrays(), before):
            assert np.array_equal(arr, old)

    def test_train_mode_normalizes_batch(self):
        params = he_init(tiny_stack(16, 12), np.random.default_rng(2))
        x = 3.0 * np.random.default_rng(3).normal(size=(32, 16))
        _, cache = forward(params, x, "train")
        z_hat = cache.layers[0].z_hat
        assert np.max(np.abs(z_hat.mean(axis=0))) <= 1e-7
        assert np.max(np.abs(z_hat.var(axis=0) - 1.0)) <= 1e-5

    def test_train_mode_updates_running_stats(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(8, 8))
        forward(params, x, "train")
        lp = params.layers[0]
        assert not np.all(lp.running_mean == 0.0)
        assert not np.all(lp.running_var == 1.0)

    def test_train_batch_of_one_rejected(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        with pytest.raises(TrainingError):
            forward(params, np.zeros((1, 8)), "train")

    def test_wrong_width_rejected(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(params, np.zeros((4, 9)), "eval")


class TestCrossEntropy:
    def test_uniform_is_ln_two(self):
        probs = np.full((3, 2), 0.5)
        assert cross_entropy(probs, np.array([0, 1, 0])) == pytest.approx(math.log(2))

    def test_perfect_is_zero(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert cross_entropy(probs, np.array([0, 1])) == 0.0

    def test_hand_computed_mean(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        expected = (-math.log(0.9) - math.log(0.8)) / 2
        assert cross_entropy(probs, np.array([0, 1])) == pytest.approx(expected, abs=1e-12)

    def test_bad_label_rejected(self):
        with pytest.raises(DataError):
            cross_entropy(np.full((2, 2), 0.5), np.array([0, 2]))


class TestBackward:
    def test_gradient_shapes_match(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 8))
        y = np.array([0, 1, 1, 0])
        _, cache = forward(params, x, "train")
        grads = backward(cache, y)
        for g, (_, p, _) in zip(grads.trainable_arrays(), params.trainable_arrays()):
            assert g.shape == p.shape

    def test_matches_finite_differences(self):
        params = he_init(tiny_stack(8, 4), np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(4, 8))
        y = np.random.default_rng(7).integers(0, 2, 4)
        assert max_relative_gradient_error(params, x, y) < 1e-4

    def test_matches_finite_differences_without_batchnorm(self):
        specs = (LayerSpec(6, 5, False, "relu"), LayerSpec(5, 2, False, "softmax"))
        params = he_init(specs, np.random.default_rng(8))
        x = np.random.default_rng(9).normal(size=(5, 6))
        y = np.random.default_rng(10).integers(0, 2, 5)
        assert max_relative_gradient_error(params, x, y) < 1e-4

    def test_row_duplication_leaves_gradients_unchanged(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 8))
        y = np.array([0, 1, 1, 0])
        _, cache = forward(params, x, "train")
        g1 = backward(cache, y)
        _, cache2 = forward(params, np.vstack([x, x]), "train")
        g2 = backward(cache2, np.concatenate([y, y]))
        for a, b in zip(g1.trainable_arrays(), g2.trainable_arrays()):
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_eval_cache_rejected(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 8))
        _, cache = forward(params, x, "eval")
        with pytest.raises(TrainingError):
            backward(cache, np.array([0, 1, 1, 0]))


def _scalar_params(value=0.0):
    """One-weight network for scalar Adam checks."""
    specs = (LayerSpec(1, 1, False, "none"),)
    params = he_init(specs, np.random.default_rng(0))
    params.layers[0].weights[:] = value
    params.layers[0].biases[:] = 0.0
    return params


def _scalar_grads(g):
    return Gradients(layers=[LayerGrads(weights=np.array([[g]], dtype=float),
                                        biases=np.zeros(1))])


def reference_adam(grad_sequence, lr, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Straightforward scalar Adam, written independently of the package."""
    m = v = 0.0
    x = x0
    trajectory = []
    for t, g in enumerate(grad_sequence, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(x)
    return trajectory


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        for g in (0.5, -2.0, 0.05):
            params = _scalar_params(0.0)
            state = AdamState.zeros_for(params)
            cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.0)
            adam_step(params, _scalar_grads(g), state, cfg)
            change = params.layers[0].weights[0, 0]
            # exact bias-corrected first step, and its -lr*sign(g) reading
            assert change == pytest.approx(-1e-2 * g / (abs(g) + 1e-8), abs=1e-15)
            assert change == pytest.approx(-1e-2 * math.copysign(1.0, g), abs=1e-6 * 1e-2)

    def test_zero_gradient_is_identity(self):
        params = he_init(tiny_stack(), np.random.default_rng(3))
        before = [arr.copy() for _, arr, _ in params.trainable_arrays()]
        zero = Gradients(layers=[
            LayerGrads(np.zeros_like(lp.weights), np.zeros_like(lp.biases),
                       None if lp.gamma is None else np.zeros_like(lp.gamma),
                       None if lp.beta is None else np.zeros_like(lp.beta))
            for lp in params.layers])
        state = AdamState.zeros_for(params)
        adam_step(params, zero, state, TrainConfig(weight_decay=0.0))
        for (_, arr, _), old in zip(params.trainable_arrays(), before):
            assert np.array_equal(arr, old)
        assert state.step_count == 1

    def test_trajectory_matches_scalar_reference(self):
        params = _scalar_params(0.0)
        state = AdamState.zeros_for(params)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        seen = []
        for _ in range(2):
            adam_step(params, _scalar_grads(1.0), state, cfg)
            seen.append(float(params.layers[0].weights[0, 0]))
        expected = reference_adam([1.0, 1.0], lr=0.1)
        assert np.max(np.abs(np.array(seen) - np.array(expected))) < 1e-12

    def test_weight_decay_only_touches_weight_matrices(self):
        params = he_init(tiny_stack(), np.random.default_rng(3))
        params.layers[0].beta[:] = 0.5   # make every non-weight array nonzero
        before = [(name, arr.copy()) for name, arr, _ in params.trainable_arrays()]
        zero = Gradients(layers=[
            LayerGrads(np.zeros_like(lp.weights), np.zeros_like(lp.biases),
                       None if lp.gamma is None else np.zeros_like(lp.gamma),
                       None if lp.beta is None else np.zeros_like(lp.beta))
            for lp in params.layers])
        adam_step(params, zero, AdamState.zeros_for(params),
                  TrainConfig(weight_decay=1e-2))
        for (name, old), (_, arr, is_weight) in zip(before, params.trainable_arrays()):
            if is_weight:
                assert not np.array_equal(arr, old), name
            else:
                assert np.array_equal(arr, old), name


class TestBatchSlices:
    def test_33_with_batch_16_folds_trailing_one(self):
        assert _batch_slices(33, 16) == [(0, 16), (16, 33)]

    def test_exact_multiple(self):
        assert _batch_slices(32, 16) == [(0, 16), (16, 32)]

    def test_small_remainder_kept_if_at_least_two(self):
        assert _batch_slices(34, 16) == [(0, 16), (16, 32), (32, 34)]

    def test_tiny_dataset_single_batch(self):
        assert _batch_slices(5, 16) == [(0, 5)]


class TestTrainEpoch:
    def _setup(self, n=33, dim=8):
        specs = tiny_stack(dim)
        params = he_init(specs, np.random.default_rng(0))
        state = AdamState.zeros_for(params)
        x = np.random.default_rng(1).normal(size=(n, dim))
        y = np.random.default_rng(2).integers(0, 2, n)
        return params, state, x, y

    def test_deterministic_given_seed(self):
        outs = []
        for _ in range(2):
            params, state, x, y = self._setup()
            cfg = TrainConfig()
            train_epoch(params, state, x, y, cfg, np.random.default_rng(42))
            outs.append([arr.copy() for _, arr in params.named_arrays()])
        for a, b in zip(*outs):
            assert np.array_equal(a, b)

    def test_batch_count_with_folded_remainder(self):
        params, state, x, y = self._setup(n=33)
        train_epoch(params, state, x, y, TrainConfig(batch_size=16),
                    np.random.default_rng(0))
        assert state.step_count == 2   # batches of 16 and 17

    def test_loss_decreases_on_separable_data(self):
        # two informative feature columns, the rest zero padding
        rng = np.random.default_rng(5)
        n, dim = 64, 8
        y = rng.integers(0, 2, n)
        x = np.zeros((n, dim))
        x[:, 0] = (2.0 * y - 1.0) * 2.0 + 0.3 * rng.normal(size=n)
        x[:, 1] = (1.0 - 2.0 * y) * 1.5 + 0.3 * rng.normal(size=n)
        params, losses = train_model(
            tiny_stack(dim), x, y, TrainConfig(learning_rate=1e-3, epochs=10),
            init_rng=np.random.default_rng(0), shuffle_rng=np.random.default_rng(1))
        assert losses[-1] < losses[0]

    def test_size_one_dataset_rejected(self):
        params, state, x, y = self._setup(n=1)
        with pytest.raises(TrainingError):
            train_epoch(params, state, x, y, TrainConfig(), np.random.default_rng(0))


class TestPredict:
    def test_probabilities_and_complement(self):
        params = he_init(tiny_stack(), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(6, 8))
        scores = predict(params, x)
        assert np.all((scores >= 0.0) & (scores <= 1.0))
        probs, _ = forward(params, x, "eval")
        assert np.allclose(scores, 1.0 - probs[:, 0], atol=1e-12)
        assert np.array_equal(scores, predict(params, x))
