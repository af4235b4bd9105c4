import numpy as np
import pytest

from goalrec.nn import ConfigurationError, UsageError, gradient_check
from goalrec.world_model import Batch, WorldModel, WorldModelConfig

S, A, D = 6, 4, 5


def model(seed=0, **kw):
    return WorldModel(S, A, D, WorldModelConfig(**kw), seed=seed)


def inputs(rng, n=3):
    g = rng.normal(size=(n, D))
    return rng.normal(size=(n, S)), rng.normal(size=(n, A)), g / np.linalg.norm(g, axis=1,
                                                                           keepdims=True)


def zero_net(net):
    for p in net.params():
        p[...] = 0.0


class TestPredict:
    def test_zero_advantage_gives_value(self):
        rng = np.random.default_rng(0)
        wm = model()
        zero_net(wm.nets["advantage_head"])
        s, a, g = inputs(rng)
        v, _ = wm.heads(s, a, g)
        np.testing.assert_array_equal(wm.predict(s, a, g), v)
        a2 = rng.normal(size=a.shape)
        np.testing.assert_array_equal(wm.predict(s, a2, g), v)

    def test_zero_value_gives_advantage(self):
        rng = np.random.default_rng(1)
        wm = model()
        zero_net(wm.nets["value_head"])
        s, a, g = inputs(rng)
        _, adv = wm.heads(s, a, g)
        np.testing.assert_array_equal(wm.predict(s, a, g), adv)

    def test_manual_composition(self):
        rng = np.random.default_rng(2)
        wm = model()
        wm.fit_target_normalization(rng.normal(size=(10, D)))
        s, a, g = inputs(rng, 1)
        n = wm.nets
        hs, ha, hg = n["state_tower"](s[0]), n["action_tower"](a[0]), n["goal_tower"](g[0])
        v = n["value_head"](np.concatenate([hs, hg]))
        adv = n["advantage_head"](np.concatenate([hs, hg, ha]))
        want = wm.target_shift + wm.target_scale * (v + adv)
        np.testing.assert_allclose(wm.predict_measurement(s[0], a[0], g[0]), want, atol=1e-12)

    def test_candidates_match_rowwise(self):
        rng = np.random.default_rng(3)
        wm = model()
        s, _, g = inputs(rng, 1)
        acts = rng.normal(size=(7, A))
        rows = np.stack([wm.predict_measurement(s[0], x, g[0]) for x in acts])
        np.testing.assert_allclose(wm.predict_candidates(s[0], acts, g[0]), rows, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ConfigurationError):
            model().predict(np.ones(S + 1), np.ones(A), np.ones(D))


class TestScoreAndSelect:
    def test_basis_goal_picks_component(self):
        rng = np.random.default_rng(0)
        wm = model()
        s, a, _ = inputs(rng, 1)
        for j in range(D):
            g = np.eye(D)[j]
            np.testing.assert_allclose(wm.score_action(s[0], a[0], g),
                                       wm.predict_measurement(s[0], a[0], g)[j], atol=1e-14)

    def test_zero_prediction_scores_zero(self):
        wm = model()
        zero_net(wm.nets["value_head"])
        zero_net(wm.nets["advantage_head"])
        assert wm.score_action(np.ones(S), np.ones(A), np.eye(D)[0]) == 0.0

    def test_single_candidate(self):
        wm = model()
        assert wm.select_action(np.ones(S), [17], np.ones((1, A)), np.eye(D)[0]) == 17

    def test_empty_candidates(self):
        with pytest.raises(UsageError):
            model().select_action(np.ones(S), [], np.zeros((0, A)), np.eye(D)[0])

    def test_hand_set_second_wins(self):
        wm = WorldModel(1, 1, 1, WorldModelConfig(hidden=1, state_layers=(), action_layers=(),
                                                  head_layers=(), tower_output="identity"))
        for name in ("state_tower", "goal_tower", "value_head"):
            zero_net(wm.nets[name])
        wm.nets["action_tower"].layers[0].weight[:] = 1.0
        wm.nets["advantage_head"].layers[0].weight[:] = [[0.0, 0.0, 1.0]]
        q = wm.score_candidates([0.0], [[1.0], [2.0]], [1.0])
        np.testing.assert_allclose(q, [1.0, 2.0])
        assert wm.select_action([0.0], [4, 9], [[1.0], [2.0]], [1.0]) == 9

    def test_ties_to_smallest_id(self):
        wm = model()
        zero_net(wm.nets["advantage_head"])
        assert wm.select_action(np.ones(S), [8, 3, 5], np.eye(3, A), np.eye(D)[0]) == 3

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        wm = model()
        s, _, g = inputs(rng, 1)
        acts = rng.normal(size=(100, A))
        ids = rng.permutation(1000)[:100]
        q = [g[0] @ wm.predict_measurement(s[0], x, g[0]) for x in acts]
        assert wm.select_action(s[0], ids, acts, g[0]) == ids[int(np.argmax(q))]

    def test_invariant_to_value_offset_and_goal_scale(self):
        rng = np.random.default_rng(5)
        wm = model()
        s, _, g = inputs(rng, 1)
        acts = rng.normal(size=(30, A))
        ids = np.arange(30)
        base = wm.select_action(s[0], ids, acts, g[0])
        wm.nets["value_head"].layers[-1].bias += rng.normal(size=D) * 5
        assert wm.select_action(s[0], ids, acts, g[0]) == base
        assert wm.select_action(s[0], ids, acts, 3.7 * g[0]) == base

    def test_removing_advantage_is_per_state_offset(self):
        rng = np.random.default_rng(6)
        wm = model()
        s, _, g = inputs(rng, 1)
        acts = rng.normal(size=(5, A))
        full = wm.predict_candidates(s[0], acts, g[0])
        zero_net(wm.nets["advantage_head"])
        no_adv = wm.predict_candidates(s[0], acts, g[0])
        np.testing.assert_allclose(no_adv - no_adv[0], 0.0, atol=1e-14)
        assert full.shape == no_adv.shape


def linear_task(rng, n, w):
    s, a, g = inputs(rng, n)
    x = np.hstack([s, a, g])
    return Batch(s, a, g, x @ w, np.zeros(n, dtype=bool))


class TestTraining:
    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        wm = model(seed=3)
        wm.fit_target_normalization(rng.normal(size=(20, D)))
        wm.loss_state.log_var[:] = rng.normal(scale=0.2, size=D)
        s, a, g = inputs(rng, 5)
        b = Batch(s, a, g, rng.normal(size=(5, D)), np.zeros(5, dtype=bool))

        def fn():
            main, aux, grads = wm.loss_and_grads(b)
            return main + wm.config.lambda_aux * aux, grads
        report = gradient_check(fn, wm.params(), wm.param_names(), max_entries=30,
                                rng=np.random.default_rng(1))
        assert report.passed, report.lines()

    def test_zero_residual_only_log_var_moves(self):
        rng = np.random.default_rng(1)
        wm = model()
        zero_net(wm.nets["advantage_head"])
        s, a, g = inputs(rng, 4)
        b = Batch(s, a, g, wm.predict(s, a, g), np.zeros(4, dtype=bool))
        _, _, grads = wm.loss_and_grads(b)
        assert all(not gr.any() for gr in grads[:-1])
        assert np.all(grads[-1] > 0)

    def test_lambda_zero_is_plain_loss(self):
        rng = np.random.default_rng(2)
        wm = model(lambda_aux=0.0)
        s, a, g = inputs(rng, 4)
        b = Batch(s, a, g, rng.normal(size=(4, D)), np.zeros(4, dtype=bool))

        def main_only():
            main, _, grads = wm.loss_and_grads(b)
            return main, grads
        report = gradient_check(main_only, wm.params(), wm.param_names(), max_entries=20,
                                rng=np.random.default_rng(0))
        assert report.passed, report.lines()

    def test_non_finite_batch_rejected(self):
        rng = np.random.default_rng(3)
        wm = model()
        s, a, g = inputs(rng, 2)
        before = [p.copy() for p in wm.params()]
        t = np.full((2, D), np.nan)
        _, _, applied = wm.train_batch(Batch(s, a, g, t, np.zeros(2, dtype=bool)))
        assert not applied
        for p, q in zip(before, wm.params()):
            np.testing.assert_array_equal(p, q)

    def test_recovers_linear_target(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(S + A + D, D)) / 3
        wm = model(seed=1, state_layers=(), action_layers=(), tower_output="identity",
                   hidden=32, head_layers=(32,), learning_rate=3e-3)
        train = linear_task(rng, 2000, w)
        wm.fit_target_normalization(train.targets)
        test = linear_task(rng, 500, w)
        sub = np.random.default_rng(5)
        first_adv = None
        for step in range(2000):
            idx = sub.integers(2000, size=64)
            wm.train_batch(Batch(train.states[idx], train.actions[idx], train.goals[idx],
                                 train.targets[idx], train.hindsight[idx]))
            if step == 199:
                first_adv = np.abs(wm.mean_advantage(test.states, test.actions, test.goals)).mean()
        pred = wm.predict(test.states, test.actions, test.goals)
        rel = np.sum((pred - test.targets) ** 2) / np.sum((test.targets - test.targets.mean(0)) ** 2)
        assert rel < 0.05
        last_adv = np.abs(wm.mean_advantage(test.states, test.actions, test.goals)).mean()
        assert last_adv < first_adv

    def test_log_var_floor(self):
        rng = np.random.default_rng(6)
        wm = model(log_var_min=-0.5, log_var_learning_rate=1.0)
        s, a, g = inputs(rng, 4)
        b = Batch(s, a, g, wm.predict(s, a, g), np.zeros(4, dtype=bool))
        for _ in range(20):
            wm.train_batch(b)
        assert wm.log_var.min() >= -0.5


class TestPersistence:
    def test_save_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        wm = model(seed=2)
        wm.fit_target_normalization(rng.normal(size=(10, D)))
        s, a, g = inputs(rng, 8)
        wm.train_batch(Batch(s, a, g, rng.normal(size=(8, D)), np.zeros(8, dtype=bool)))
        wm.save(tmp_path / "m.json")
        back = WorldModel.load(tmp_path / "m.json")
        for p, q in zip(wm.params(), back.params()):
            np.testing.assert_array_equal(p, q)
        np.testing.assert_array_equal(wm.predict(s, a, g), back.predict(s, a, g))
        assert back.optimizer.state.step_count == 1

    def test_copy_is_independent(self):
        wm = model()
        c = wm.copy()
        c.nets["value_head"].layers[0].weight[0, 0] += 1.0
        assert wm.nets["value_head"].layers[0].weight[0, 0] != \
            c.nets["value_head"].layers[0].weight[0, 0]
