import numpy as np
import pytest

from fedmatch.nets import MLPParams, TrainConfig, apply_permutation, evaluate, \
    forward, from_atoms, init_params, loss_and_grads, loss_value, \
    to_atoms, train
from fedmatch.estimators import MLPClassifier


def make_blobs(n_per_class=120, margin=8.0, seed=0):
    """Two well-separated 2-D blobs; separability checked by a perceptron."""
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(0.0, 1.0, size=(n_per_class, 2)),
                        rng.normal(margin, 1.0, size=(n_per_class, 2))])
    y = np.concatenate([np.zeros(n_per_class, dtype=int),
                        np.ones(n_per_class, dtype=int)])
    order = rng.permutation(len(y))
    return X[order], y[order]


def perceptron_separable(X, y, epochs=50):
    w = np.zeros(X.shape[1] + 1)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    target = 2 * y - 1
    for _ in range(epochs):
        mistakes = 0
        for xi, ti in zip(Xb, target):
            if ti * (w @ xi) <= 0:
                w += ti * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def flatten_params(params):
    return np.concatenate([t.ravel() for t in params.weights + params.biases])


def unflatten_like(vec, params):
    out = params.copy()
    ofs = 0
    for t in out.weights + out.biases:
        t[...] = vec[ofs:ofs + t.size].reshape(t.shape)
        ofs += t.size
    return out


class TestTraining:
    def test_zero_epochs_leaves_parameters_unchanged(self):
        X, y = make_blobs()
        params = init_params(2, (5,), 2, seed=0)
        trained = train(params, X, y, TrainConfig(seed=1, epochs=0))
        for a, b in zip(params.weights + params.biases,
                        trained.weights + trained.biases):
            assert np.array_equal(a, b)

    def test_blobs_reach_high_accuracy(self):
        X, y = make_blobs()
        assert perceptron_separable(X, y)
        params = init_params(2, (100,), 2, seed=0)
        trained = train(params, X, y, TrainConfig(seed=1, epochs=10))
        assert evaluate(trained, X, y) >= 0.99

    def test_first_epoch_reduces_loss(self):
        X, y = make_blobs(seed=3)
        cfg = TrainConfig(seed=2, epochs=1)
        params = init_params(2, (100,), 2, seed=4)
        before = loss_value(params, X, y, cfg.l2)
        after = loss_value(train(params, X, y, cfg), X, y, cfg.l2)
        assert after < before

    def test_training_is_bit_deterministic(self):
        X, y = make_blobs(seed=5)
        cfg = TrainConfig(seed=9, epochs=3)
        params = init_params(2, (7,), 2, seed=6)
        a = train(params, X, y, cfg)
        b = train(params, X, y, cfg)
        for ta, tb in zip(a.weights + a.biases, b.weights + b.biases):
            assert np.array_equal(ta, tb)

    def test_sgd_option(self):
        X, y = make_blobs(seed=7)
        params = init_params(2, (20,), 2, seed=8)
        trained = train(params, X, y, TrainConfig(seed=1, epochs=10,
                                                  optimizer="sgd",
                                                  learning_rate=0.1))
        assert evaluate(trained, X, y) >= 0.95

    def test_non_finite_loss_aborts_with_minibatch_index(self):
        X, y = make_blobs(seed=11)
        params = init_params(2, (4,), 2, seed=0, init_scale=1e300,
                             init_scale_is_variance=False)
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(FloatingPointError, match="minibatch"):
            train(params, X, y, TrainConfig(seed=0, epochs=1))

    def test_label_out_of_range_rejected(self):
        params = init_params(2, (4,), 2, seed=0)
        with pytest.raises(ValueError, match="label"):
            train(params, np.zeros((3, 2)), np.array([0, 1, 2]),
                  TrainConfig(seed=0))


class TestGradients:
    @pytest.mark.parametrize("hidden", [(8,), (7, 5)])
    @pytest.mark.parametrize("activation", ["relu", "sigmoid"])
    def test_gradients_match_finite_differences(self, hidden, activation):
        rng = np.random.default_rng(hash((hidden, activation)) % 2**32)
        X = rng.normal(size=(12, 4))
        y = rng.integers(0, 3, size=12)
        params = init_params(4, hidden, 3, seed=1, activation=activation)
        l2 = 1e-3
        _, w_grads, b_grads = loss_and_grads(params, X, y, l2)
        analytic = np.concatenate([g.ravel() for g in w_grads + b_grads])

        vec = flatten_params(params)
        numeric = np.zeros_like(vec)
        probe = rng.choice(vec.size, size=min(60, vec.size), replace=False)

        def f(v):
            return loss_value(unflatten_like(v, params), X, y, l2)

        for i in probe:
            up, dn = vec.copy(), vec.copy()
            up[i] += 1e-5
            dn[i] -= 1e-5
            numeric[i] = (f(up) - f(dn)) / 2e-5
        denom = np.maximum(np.abs(analytic[probe]), 1e-8)
        rel = np.abs(analytic[probe] - numeric[probe]) / denom
        assert rel.max() < 1e-4


class TestEvaluate:
    def _passthrough(self, k):
        # relu(I x) @ I with zero biases = x for positive inputs
        return MLPParams([np.eye(k), np.eye(k)], [np.zeros(k), np.zeros(k)])

    def test_all_correct_and_all_wrong(self):
        params = self._passthrough(2)
        X = np.array([[2.0, 1.0], [3.0, 1.0]])
        assert evaluate(params, X, np.array([0, 0])) == 1.0
        assert evaluate(params, X, np.array([1, 1])) == 0.0

    def test_hand_counted_fraction(self):
        params = self._passthrough(3)
        logits = np.array([[3, 1, 1], [1, 3, 1], [1, 1, 3], [3, 1, 1],
                           [1, 3, 1], [1, 1, 3], [3, 1, 1], [1, 3, 1],
                           [1, 1, 3], [3, 1, 1]], dtype=float)
        labels = np.array([0, 1, 2, 0, 1, 2, 1, 2, 0, 0])  # 7 of 10 correct
        assert evaluate(params, logits, labels) == pytest.approx(0.7)

    def test_empty_rejected(self):
        params = self._passthrough(2)
        with pytest.raises(ValueError):
            evaluate(params, np.zeros((0, 2)), np.zeros(0, dtype=int))


class TestAtoms:
    def test_single_layer_layout(self):
        params = init_params(2, (1,), 3, seed=0)
        atoms = to_atoms(params)
        assert len(atoms) == 1
        assert atoms[0].shape == (1, 6)
        np.testing.assert_array_equal(atoms[0][0, :2], params.weights[0][:, 0])
        assert atoms[0][0, 2] == params.biases[0][0]
        np.testing.assert_array_equal(atoms[0][0, 3:], params.weights[1][0])

    @pytest.mark.parametrize("hidden", [(4,), (4, 3), (5, 4, 3)])
    def test_round_trip(self, hidden):
        params = init_params(3, hidden, 2, seed=1)
        rebuilt = from_atoms(to_atoms(params), 3, 2, params.biases[-1],
                             params.activation)
        for a, b in zip(params.weights + params.biases,
                        rebuilt.weights + rebuilt.biases):
            assert np.array_equal(a, b)

    def test_zero_atoms_give_uniform_network(self):
        params = from_atoms([np.zeros((4, 3 + 1 + 2))], 3, 2, np.zeros(2))
        probs = forward(params, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_allclose(probs, 0.5, atol=1e-15)

    def test_permuting_neurons_permutes_atoms(self):
        params = init_params(3, (5,), 2, seed=2)
        perm = np.array([4, 2, 0, 1, 3])
        permuted = apply_permutation(params, 0, perm)
        np.testing.assert_array_equal(to_atoms(permuted)[0], to_atoms(params)[0][perm])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dimension"):
            from_atoms([np.zeros((2, 5))], 3, 2, np.zeros(2))

    def test_flat_prior_single_batch_round_trip_close_per_parameter(self):
        from fedmatch.matching import MatchSchedule, PriorConfig, \
            match_single_layer
        params = init_params(3, (5,), 2, seed=9)
        result = match_single_layer([to_atoms(params)[0]],
                                    PriorConfig(1e9, 1.0, 1.0, 1),
                                    MatchSchedule(seed=0))
        rebuilt = from_atoms([np.asarray(result.atoms)], 3, 2,
                             params.biases[-1], params.activation)
        for a, b in zip(params.weights + params.biases,
                        rebuilt.weights + rebuilt.biases):
            np.testing.assert_allclose(a, b, atol=1e-4)


class TestPermutation:
    def test_identity_permutation(self):
        params = init_params(3, (4,), 2, seed=3)
        same = apply_permutation(params, 0, np.arange(4))
        for a, b in zip(params.weights + params.biases,
                        same.weights + same.biases):
            assert np.array_equal(a, b)

    @pytest.mark.parametrize("layer", [0, 1])
    def test_outputs_unchanged(self, layer):
        rng = np.random.default_rng(4)
        params = init_params(3, (6, 5), 2, seed=5)
        perm = rng.permutation(params.weights[layer].shape[1])
        permuted = apply_permutation(params, layer, perm)
        X = rng.normal(size=(100, 3))
        assert np.abs(forward(permuted, X) - forward(params, X)).max() <= 1e-12

    def test_inverse_composition_restores_parameters(self):
        rng = np.random.default_rng(6)
        params = init_params(3, (5,), 2, seed=7)
        perm = rng.permutation(5)
        back = apply_permutation(apply_permutation(params, 0, perm), 0,
                                 np.argsort(perm))
        for a, b in zip(params.weights + params.biases,
                        back.weights + back.biases):
            assert np.array_equal(a, b)

    def test_invalid_permutation_rejected(self):
        params = init_params(3, (4,), 2, seed=8)
        with pytest.raises(ValueError, match="permutation"):
            apply_permutation(params, 0, np.array([0, 0, 1, 2]))


class TestInit:
    def test_variance_interpretation_default(self):
        params = init_params(200, (300,), 10, seed=0, init_scale=0.01)
        std = params.weights[0].std()
        assert 0.095 < std < 0.105  # std = sqrt(0.01)

    def test_std_interpretation_flag(self):
        params = init_params(200, (300,), 10, seed=0, init_scale=0.01,
                             init_scale_is_variance=False)
        assert params.weights[0].std() < 0.02

    def test_bias_init(self):
        params = init_params(4, (3,), 2, seed=0, bias_init=0.1)
        assert np.all(params.biases[0] == 0.1)
        assert np.all(params.biases[1] == 0.1)


class TestMLPClassifierEstimator:
    def test_fit_predict_score(self):
        X, y = make_blobs(seed=9)
        clf = MLPClassifier(hidden_layer_sizes=(20,), epochs=5, random_state=0)
        clf.fit(X, y)
        assert clf.score(X, y) >= 0.98
        assert clf.predict_proba(X).shape == (len(y), 2)

    def test_get_set_params_roundtrip(self):
        clf = MLPClassifier(epochs=3, random_state=1)
        params = clf.get_params()
        assert params["epochs"] == 3
        clf.set_params(epochs=7)
        assert clf.epochs == 7

    def test_random_state_required(self):
        X, y = make_blobs(seed=10)
        with pytest.raises(ValueError, match="random_state"):
            MLPClassifier().fit(X, y)

    def test_sklearn_clone_compatible(self):
        from sklearn.base import clone
        clf = MLPClassifier(epochs=2, random_state=3)
        cloned = clone(clf)
        assert cloned.get_params() == clf.get_params()
