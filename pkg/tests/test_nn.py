import numpy as np
import pytest

from fedprint.nn import (
    LabelError,
    MlpModel,
    ModelParams,
    ShapeError,
    SgdTrainer,
    backward,
    forward,
    init_model,
    init_params,
    one_hot,
    predict_proba,
    sgd_step,
    softmax,
)


def f64_forward_loss(params_layers, x, y_onehot):
    """Independent float64 re-implementation of the forward pass + loss.

    Deliberately written as its own code path (plain loops over layers,
    float64 throughout) so gradient checks do not share code with the
    implementation under test.
    """
    h = x.astype(np.float64)
    last = len(params_layers) - 1
    for i, (w, b) in enumerate(params_layers):
        h = h @ w.astype(np.float64) + b.astype(np.float64)
        if i != last:
            h = np.where(h > 0.0, h, 0.0)
    h = h - h.max(axis=1, keepdims=True)
    p = np.exp(h)
    p /= p.sum(axis=1, keepdims=True)
    picked = (p * y_onehot).sum(axis=1)
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def make_model(arch, seed):
    return init_model(arch, np.random.default_rng(seed))


class TestForward:
    def test_zero_weights_give_uniform_softmax(self):
        params = ModelParams(
            [
                (np.zeros((6, 8), dtype=np.float32), np.zeros(8, dtype=np.float32)),
                (np.zeros((8, 4), dtype=np.float32), np.zeros(4, dtype=np.float32)),
            ]
        )
        model = MlpModel(params)
        probs = predict_proba(model, np.random.default_rng(0).random((3, 6)))
        assert np.allclose(probs, 0.25, atol=1e-7)

    def test_identity_single_layer(self):
        params = ModelParams([(np.eye(5, dtype=np.float32), np.zeros(5, dtype=np.float32))])
        model = MlpModel(params)
        x = np.random.default_rng(1).random((4, 5)).astype(np.float32)
        assert np.array_equal(forward(model, x), x)

    def test_two_layer_matches_scalar_loop_oracle(self):
        model = make_model((7, 9, 3), seed=2)
        x = np.random.default_rng(3).random((5, 7)).astype(np.float32)
        got = forward(model, x)
        # Scalar-loop oracle in float64.
        expect = np.zeros((5, 3))
        for r in range(5):
            h = [float(v) for v in x[r]]
            for li, (w, b) in enumerate(model.params.layers):
                out = []
                for j in range(w.shape[1]):
                    acc = float(b[j])
                    for i in range(w.shape[0]):
                        acc += h[i] * float(w[i, j])
                    if li != len(model.params.layers) - 1:
                        acc = max(acc, 0.0)
                    out.append(acc)
                h = out
            expect[r] = h
        assert np.abs(got - expect).max() < 1e-5

    def test_softmax_rows_sum_to_one(self):
        model = make_model((12, 20, 10), seed=4)
        x = np.random.default_rng(5).random((32, 12)).astype(np.float32)
        sums = predict_proba(model, x).sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-5

    def test_shape_mismatch_raises(self):
        model = make_model((6, 4), seed=6)
        with pytest.raises(ShapeError):
            forward(model, np.zeros((2, 7), dtype=np.float32))

    def test_no_nan_on_extreme_inputs(self):
        model = make_model((4, 8, 3), seed=7)
        x = np.array([[1e4, -1e4, 1e4, -1e4]], dtype=np.float32)
        probs = predict_proba(model, x)
        assert np.isfinite(probs).all()


class TestBackward:
    def test_saturated_correct_prediction_has_tiny_loss_and_grads(self):
        # One linear layer with huge weights pointing at class 0.
        w = np.zeros((3, 2), dtype=np.float32)
        w[0, 0] = 50.0
        params = ModelParams([(w, np.zeros(2, dtype=np.float32))])
        model = MlpModel(params)
        x = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
        y = one_hot(np.array([0]), 2)
        loss, grads, gx = backward(model, x, y)
        assert loss < 1e-6
        assert max(np.abs(g).max() for g, _ in grads.layers) < 1e-6
        assert np.abs(gx).max() < 1e-5

    def test_loss_nonnegative(self):
        model = make_model((5, 6, 4), seed=8)
        rng = np.random.default_rng(9)
        x = rng.random((10, 5)).astype(np.float32)
        y = one_hot(rng.integers(0, 4, 10), 4)
        loss, _, _ = backward(model, x, y)
        assert loss >= 0.0

    def test_rejects_non_one_hot_labels(self):
        model = make_model((5, 4), seed=10)
        x = np.zeros((2, 5), dtype=np.float32)
        bad = np.full((2, 4), 0.25, dtype=np.float32)
        with pytest.raises(LabelError):
            backward(model, x, bad)

    @pytest.mark.parametrize("seed", range(4))
    def test_param_grads_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        model = make_model((6, 8, 5), seed=200 + seed)
        x = rng.random((7, 6)).astype(np.float32)
        y = one_hot(rng.integers(0, 5, 7), 5)
        _, grads, _ = backward(model, x, y)
        h = 1e-3
        for li, (w, b) in enumerate(model.params.layers):
            for arr, grad in ((w, grads.layers[li][0]), (b, grads.layers[li][1])):
                flat = arr.ravel()
                gflat = grad.ravel()
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = f64_forward_loss(model.params.layers, x, y)
                    flat[idx] = orig - h
                    down = f64_forward_loss(model.params.layers, x, y)
                    flat[idx] = orig
                    fd = (up - down) / (2 * h)
                    assert rel_err(float(gflat[idx]), fd, floor=1e-4) < 1e-3

    def test_input_grads_match_finite_differences(self):
        rng = np.random.default_rng(42)
        model = make_model((6, 8, 5), seed=43)
        x = rng.random((4, 6)).astype(np.float32)
        y = one_hot(rng.integers(0, 5, 4), 5)
        _, _, gx = backward(model, x, y)
        h = 1e-3
        for r in range(x.shape[0]):
            for c in range(x.shape[1]):
                orig = x[r, c]
                x[r, c] = orig + h
                up = f64_forward_loss(model.params.layers, x, y)
                x[r, c] = orig - h
                down = f64_forward_loss(model.params.layers, x, y)
                x[r, c] = orig
                fd = (up - down) / (2 * h)
                assert rel_err(float(gx[r, c]), fd, floor=1e-4) < 1e-3


class TestSgdStep:
    def test_zero_gradient_leaves_params(self):
        params = init_params((4, 3), np.random.default_rng(11))
        before = params.copy()
        sgd_step(params, params.zeros_like(), lr=0.1, momentum=0.0,
                 velocity=params.zeros_like())
        assert params == before

    def test_quadratic_closed_form(self):
        # loss w^2: grad 2w; w0=1, lr=0.1 -> w1 = 1 - 0.1*2 = 0.8
        w = np.array([[1.0]], dtype=np.float32)
        params = ModelParams([(w, np.zeros(1, dtype=np.float32))])
        grads = ModelParams(
            [(2.0 * w.copy(), np.zeros(1, dtype=np.float32))]
        )
        sgd_step(params, grads, lr=0.1, momentum=0.0, velocity=params.zeros_like())
        assert np.isclose(params.layers[0][0][0, 0], 0.8)

    def test_momentum_two_step_displacement(self):
        # constant grad g, momentum 0.9: v1=g, v2=1.9g, second step moves lr*1.9*g
        g = 0.5
        lr = 0.1
        w = np.array([[1.0]], dtype=np.float32)
        params = ModelParams([(w, np.zeros(1, dtype=np.float32))])
        grads = ModelParams(
            [(np.full((1, 1), g, dtype=np.float32), np.zeros(1, dtype=np.float32))]
        )
        velocity = params.zeros_like()
        sgd_step(params, grads, lr=lr, momentum=0.9, velocity=velocity)
        after_one = float(params.layers[0][0][0, 0])
        sgd_step(params, grads, lr=lr, momentum=0.9, velocity=velocity)
        after_two = float(params.layers[0][0][0, 0])
        assert np.isclose(after_one - after_two, lr * 1.9 * g, rtol=1e-6)

    def test_shape_mismatch_raises(self):
        params = init_params((4, 3), np.random.default_rng(12))
        other = init_params((4, 2), np.random.default_rng(13))
        with pytest.raises(ShapeError):
            sgd_step(params, other, lr=0.1, momentum=0.0,
                     velocity=params.zeros_like())

    def test_invalid_hyperparams(self):
        params = init_params((4, 3), np.random.default_rng(14))
        with pytest.raises(ValueError):
            sgd_step(params, params.zeros_like(), lr=0.0, momentum=0.0,
                     velocity=params.zeros_like())
        with pytest.raises(ValueError):
            sgd_step(params, params.zeros_like(), lr=0.1, momentum=1.0,
                     velocity=params.zeros_like())


class TestDeterminism:
    def test_identical_seed_identical_training(self):
        def train():
            rng = np.random.default_rng(77)
            model = init_model((6, 10, 3), np.random.default_rng(78))
            trainer = SgdTrainer(model, lr=0.05, momentum=0.9, batch_size=4)
            data_rng = np.random.default_rng(79)
            x = data_rng.random((24, 6)).astype(np.float32)
            y = data_rng.integers(0, 3, 24)
            for _ in range(5):
                trainer.epoch(x, y, rng)
            return model.params

        assert train() == train()

    def test_init_is_seeded_and_bounded(self):
        p1 = init_params((30, 20), np.random.default_rng(5))
        p2 = init_params((30, 20), np.random.default_rng(5))
        assert p1 == p2
        limit = np.sqrt(6.0 / 50.0)
        w = p1.layers[0][0]
        assert np.abs(w).max() <= limit
        assert np.abs(b := p1.layers[0][1]).max() == 0.0

    def test_softmax_max_subtraction_stable(self):
        logits = np.array([[1000.0, 1000.0, 999.0]], dtype=np.float32)
        p = softmax(logits)
        assert np.isfinite(p).all()
        assert abs(p.sum() - 1.0) < 1e-5
