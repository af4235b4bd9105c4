import json

import numpy as np
import pytest

from goalrec import nn
from goalrec.nn import (Adam, ConfigurationError, DenseNet, Layer, UsageError,
                        gradient_check, nudge_off_kinks, uncertainty_loss)


def _manual_forward(net, x):
    """Independent oracle: plain loops over layers with explicit activations."""
    h = np.array(x, dtype=np.float64)
    for layer in net.layers:
        z = np.array([sum(layer.weight[o, i] * h[i] for i in range(h.size)) + layer.bias[o]
                      for o in range(layer.weight.shape[0])])
        if layer.activation == "relu":
            h = np.where(z > 0, z, 0.0)
        elif layer.activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-z))
        else:
            h = z
    return h


class TestForward:
    def test_identity_layer(self):
        net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
        np.testing.assert_array_equal(net.forward(np.array([1.0, 2.0])), [1.0, 2.0])

    def test_relu_clips_negative_preactivation(self):
        net = DenseNet([Layer(np.array([[1.0, -1.0]]), np.zeros(1), "relu")])
        np.testing.assert_array_equal(net.forward(np.array([3.0, 5.0])), [0.0])

    def test_matches_manual_oracle(self):
        rng = np.random.default_rng(3)
        net = DenseNet.build([5, 7, 3], ["relu", "sigmoid"], rng)
        x = rng.normal(size=5)
        np.testing.assert_allclose(net.forward(x), _manual_forward(net, x), atol=1e-12)

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(4)
        net = DenseNet.build([4, 6, 2], "relu", rng)
        x = rng.normal(size=(5, 4))
        np.testing.assert_allclose(net.forward(x), np.stack([net.forward(r) for r in x]),
                                   atol=1e-14)

    def test_dimension_mismatch(self):
        net = DenseNet.build([3, 2], "identity", np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            net.forward(np.ones(4))

    def test_layers_must_chain(self):
        with pytest.raises(ConfigurationError):
            DenseNet([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((1, 4)), np.zeros(1))])

    def test_unknown_activation(self):
        with pytest.raises(ConfigurationError):
            Layer(np.ones((1, 1)), np.zeros(1), "tanh")

    def test_seeded_init_reproducible(self):
        a = DenseNet.build([6, 5, 4], "relu", np.random.default_rng(11))
        b = DenseNet.build([6, 5, 4], "relu", np.random.default_rng(11))
        for pa, pb in zip(a.params(), b.params()):
            np.testing.assert_array_equal(pa, pb)

    def test_init_limits(self):
        net = DenseNet.build([50, 40, 30], ["relu", "identity"], np.random.default_rng(0))
        assert np.abs(net.layers[0].weight).max() <= np.sqrt(6 / 50)
        assert np.abs(net.layers[1].weight).max() <= np.sqrt(6 / 70)
        assert not net.layers[0].bias.any()


class TestBackward:
    def test_scalar_linear_derivative(self):
        net = DenseNet([Layer(np.array([[2.0]]), np.zeros(1))])
        _, tape = net.forward_train(np.array([3.0]))
        grads, gx = net.backward(np.array([1.0]), tape)
        assert grads[0][0, 0] == 3.0
        assert grads[1][0] == 1.0
        assert gx[0] == 2.0

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(1)
        net = DenseNet.build([4, 5, 3], ["relu", "identity"], rng)
        _, tape = net.forward_train(rng.normal(size=(6, 4)))
        grads, _ = net.backward(np.zeros((6, 3)), tape)
        assert all(not g.any() for g in grads)
        assert [g.shape for g in grads] == [p.shape for p in net.params()]

    def test_batch_grad_is_sum_of_sample_grads(self):
        rng = np.random.default_rng(2)
        net = DenseNet.build([3, 4, 2], ["sigmoid", "identity"], rng)
        x = rng.normal(size=(5, 3))
        _, tape = net.forward_train(x)
        total, _ = net.backward(np.ones((5, 2)), tape)
        per = []
        for row in x:
            _, t = net.forward_train(row)
            per.append(net.backward(np.ones(2), t)[0])
        for k, g in enumerate(total):
            np.testing.assert_allclose(g, sum(p[k] for p in per), atol=1e-12)

    def test_missing_tape(self):
        net = DenseNet.build([2, 2], "identity", np.random.default_rng(0))
        with pytest.raises(UsageError):
            net.backward(np.ones(2), None)

    def test_three_layer_finite_difference(self):
        rng = np.random.default_rng(5)
        net = DenseNet.build([4, 6, 5, 2], ["relu", "sigmoid", "identity"], rng)
        x = nudge_off_kinks(net, rng.normal(size=(3, 4)))
        y = rng.normal(size=(3, 2))

        def fn():
            out, tape = net.forward_train(x)
            r = out - y
            return 0.5 * float(np.sum(r * r)), net.backward(r, tape)[0]
        report = gradient_check(fn, net.params(), net.param_names())
        assert report.passed, report.lines()


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        w = np.array([1.0, -2.0])
        opt = Adam([w])
        assert opt.step([np.zeros(2)])
        np.testing.assert_array_equal(w, [1.0, -2.0])
        assert opt.state.step_count == 1

    def test_first_step_magnitude(self):
        w = np.zeros(3)
        opt = Adam([w], learning_rate=0.01)
        opt.step([np.array([0.5, -3.0, 1e-3])])
        np.testing.assert_allclose(w, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_quadratic_matches_scalar_recursion(self):
        w = np.zeros(1)
        opt = Adam([w], learning_rate=0.1)
        # independent scalar recursion
        v_w, m, v = 0.0, 0.0, 0.0
        for t in range(1, 101):
            opt.step([2 * (w - 3.0)])
            g = 2 * (v_w - 3.0)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            v_w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(w[0] - 3.0) < 0.1
        np.testing.assert_allclose(w[0], v_w, rtol=1e-12)

    def test_non_finite_rejected(self):
        w = np.ones(2)
        opt = Adam([w])
        assert not opt.step([np.array([np.nan, 1.0])])
        np.testing.assert_array_equal(w, [1.0, 1.0])
        assert opt.state.step_count == 0
        assert opt.rejected == 1

    def test_shape_mismatch(self):
        opt = Adam([np.ones(2)])
        with pytest.raises(ConfigurationError):
            opt.step([np.ones(3)])

    def test_state_round_trip(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(2, 3))
        opt = Adam([w])
        for _ in range(3):
            opt.step([rng.normal(size=(2, 3))])
        w2 = w.copy()
        opt2 = Adam([w2])
        opt2.load_dict(json.loads(json.dumps(opt.to_dict())))
        g = rng.normal(size=(2, 3))
        opt.step([g])
        opt2.step([g])
        np.testing.assert_array_equal(w, w2)


class TestUncertaintyLoss:
    def test_perfect_prediction_zero_log_var(self):
        p = np.ones((4, 3))
        loss, dp, dlv = uncertainty_loss(p, p, np.zeros(3))
        assert loss == 0.0
        assert not dp.any()
        np.testing.assert_array_equal(dlv, [4.0, 4.0, 4.0])

    def test_single_residual(self):
        loss, _, _ = uncertainty_loss([[2.0]], [[0.0]], np.zeros(1))
        assert loss == 4.0

    def test_zero_log_var_is_sum_squared_error(self):
        rng = np.random.default_rng(0)
        p, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        loss, _, _ = uncertainty_loss(p, t, np.zeros(4))
        np.testing.assert_allclose(loss, np.sum((p - t) ** 2), rtol=1e-14)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        p, t, lv = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=3)
        perm = rng.permutation(6)
        a = uncertainty_loss(p, t, lv)
        b = uncertainty_loss(p[perm], t[perm], lv)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-13)
        np.testing.assert_allclose(a[2], b[2], rtol=1e-13)

    def test_stationary_log_var(self):
        rng = np.random.default_rng(2)
        resid = rng.normal(scale=[0.5, 2.0], size=(30, 2))
        grid = np.linspace(-4, 4, 8001)
        for j in range(2):
            vals = [uncertainty_loss(resid[:, j:j + 1], np.zeros((30, 1)), [s])[0] for s in grid]
            best = grid[int(np.argmin(vals))]
            np.testing.assert_allclose(np.exp(best), np.mean(resid[:, j] ** 2), rtol=1e-2)

    def test_weights_positive(self):
        state = nn.UncertaintyLossState(np.array([-50.0, 0.0, 50.0]))
        assert np.all(state.weights > 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            uncertainty_loss(np.ones((2, 2)), np.ones((2, 3)), np.zeros(2))


class TestGradientCheck:
    def test_linear_mse(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([3, 2], "identity", rng)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))

        def fn():
            out, tape = net.forward_train(x)
            return 0.5 * float(np.sum((out - y) ** 2)), net.backward(out - y, tape)[0]
        assert gradient_check(fn, net.params(), net.param_names()).max_error < 1e-7

    def test_corrupted_gradient_detected(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([3, 2], "identity", rng)
        x = rng.normal(size=(4, 3))

        def fn():
            out, tape = net.forward_train(x)
            grads, _ = net.backward(out, tape)
            return 0.5 * float(np.sum(out ** 2)), [2.0 * g for g in grads]
        report = gradient_check(fn, net.params(), net.param_names())
        assert not report.passed
        assert set(report.blocks) == {"W0", "b0"}

    def test_nudge_clears_kinks(self):
        rng = np.random.default_rng(0)
        net = DenseNet.build([3, 8], "relu", rng)
        x = np.zeros((2, 3))  # every pre-activation starts at exactly 0
        x2 = nudge_off_kinks(net, x, rng=rng)
        _, tape = net.forward_train(x2)
        assert np.abs(tape.pre[0]).min() >= 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        net = DenseNet.build([4, 5, 2], ["relu", "identity"], rng)
        opt = Adam(net.params())
        opt.step([rng.normal(size=p.shape) for p in net.params()])
        lv = rng.normal(size=2)
        path = tmp_path / "ck.json"
        nn.save_checkpoint(path, {"kind": "test"}, {"net": net}, lv, opt, seed=9)
        doc = nn.load_checkpoint(path)
        for a, b in zip(net.params(), doc["nets"]["net"].params()):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(doc["log_var"], lv)
        assert doc["seed"] == 9
        assert doc["adam"]["step_count"] == 1

    def test_version_checked(self, tmp_path):
        path = tmp_path / "ck.json"
        path.write_text(json.dumps({"format_version": 99}))
        with pytest.raises(ConfigurationError):
            nn.load_checkpoint(path)
