import json

import numpy as np
import pytest

from goalrec.env import EnvConfig, RandomPolicy, Simulator, rollout
from goalrec.harness import (CellResult, ComparisonReport, ExperimentConfig,
                             config_from_manifest, derive_seed, dump_config,
                             export_sessions_csv, format_mean_std, gradient_suite,
                             ingest_sessions, load_config, metrics_csv, per_seed_csv,
                             render_report, write_manifest)
from goalrec.measurement import MeasurementSpec, compute_measurement
from goalrec.nn import ConfigurationError, UsageError

SMALL = dict(n_items=40, d_e=4, max_steps=12, n_candidates=8)


def cell(method, seed, reward, variant="vanilla"):
    return CellResult(method, variant, seed,
                      {"cumulative_reward": reward, "ctr": 0.5, "browsing_depth": 4.0})


class TestConfig:
    def test_rejects_empty_and_duplicate_seeds(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(seeds=())
        with pytest.raises(ConfigurationError):
            ExperimentConfig(seeds=(1, 1))

    def test_rejects_methods(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(methods=())
        with pytest.raises(ConfigurationError):
            ExperimentConfig(methods=("goalrec", "rainbow"))

    def test_rejects_split_and_goal(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(train_fraction=1.0)
        with pytest.raises(ConfigurationError):
            ExperimentConfig(eval_goal={"dwell": 1.0})
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict({"learning_rate": 1.0})

    def test_user_split_disjoint(self):
        train, test = ExperimentConfig(n_users=10, n_eval_users=2).user_split()
        assert train == list(range(7)) and test == [7, 8]

    def test_yaml_round_trip_and_hash(self, tmp_path):
        cfg = ExperimentConfig(seeds=(3, 4), methods=("random",),
                               env=EnvConfig(variant="high_variance", n_items=30))
        p = tmp_path / "c.yaml"
        p.write_text(dump_config(cfg))
        back = load_config(p)
        assert back.to_dict() == cfg.to_dict()
        assert back.config_hash() == cfg.config_hash()
        assert ExperimentConfig(seeds=(3, 5)).config_hash() != cfg.config_hash()

    def test_manifest_round_trip_and_tamper(self, tmp_path):
        cfg = ExperimentConfig(seeds=(2,))
        path = write_manifest(tmp_path, "compare", cfg, {"report": "report.csv"})
        assert config_from_manifest(path).to_dict() == cfg.to_dict()
        doc = json.loads(path.read_text())
        doc["config"]["n_users"] = 50
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigurationError):
            config_from_manifest(path)


class TestSeeds:
    def test_insulated_by_method_and_variant(self):
        base = derive_seed(0, "goalrec", "vanilla", 0)
        assert base == derive_seed(0, "goalrec", "vanilla", 0)
        others = {derive_seed(0, "dqn", "vanilla", 0), derive_seed(0, "goalrec", "high_dim", 0),
                  derive_seed(0, "goalrec", "vanilla", 1), derive_seed(1, "goalrec", "vanilla", 0)}
        assert base not in others and len(others) == 4
        assert 0 <= base < 2 ** 32


class TestReport:
    def test_two_seed_aggregate(self):
        rep = ComparisonReport(("goalrec",), ("vanilla",), (0, 1))
        rep.add(cell("goalrec", 0, 1.0))
        rep.add(cell("goalrec", 1, 3.0))
        mean, std, n = rep.aggregate("goalrec", "vanilla")
        assert (mean, n) == (2.0, 2)
        np.testing.assert_allclose(std, np.sqrt(2.0), rtol=1e-15)
        csv_text, table = render_report(rep)
        row = csv_text.splitlines()[1].split(",")
        assert row[:4] == ["goalrec", "vanilla", "2", "0"]
        assert float(row[4]) == 2.0 and float(row[5]) == np.sqrt(2.0)
        assert "2(±1.41)" in table

    def test_single_seed_std_zero(self):
        rep = ComparisonReport(("myopic",), ("vanilla",), (0,))
        rep.add(cell("myopic", 0, 5.0))
        assert rep.aggregate("myopic", "vanilla") == (5.0, 0.0, 1)
        assert format_mean_std(5.0, 0.0) == "5(±0)"

    def test_structure_covers_grid(self):
        methods, variants, seeds = ("goalrec", "dqn"), ("vanilla", "high_variance"), (0, 1, 2)
        rep = ComparisonReport(methods, variants, seeds)
        for m in methods:
            for v in variants:
                for s in seeds:
                    rep.add(cell(m, s, float(s), v))
        csv_text, _ = render_report(rep)
        rows = [r.split(",")[:2] for r in csv_text.splitlines()[1:]]
        assert rows == [[m, v] for m in methods for v in variants]
        assert len(per_seed_csv(rep).splitlines()) == 1 + 12

    def test_incomplete_report_rejected(self):
        rep = ComparisonReport(("goalrec",), ("vanilla",), (0, 1))
        rep.add(cell("goalrec", 0, 1.0))
        with pytest.raises(UsageError):
            render_report(rep)

    def test_failed_cells_counted_not_averaged(self):
        rep = ComparisonReport(("dqn",), ("vanilla",), (0, 1))
        rep.add(cell("dqn", 0, 4.0))
        rep.add(CellResult("dqn", "vanilla", 1, None, error="diverged"))
        assert rep.aggregate("dqn", "vanilla") == (4.0, 0.0, 1)
        csv_text, _ = render_report(rep)
        assert csv_text.splitlines()[1].split(",")[3] == "1"
        assert ",failed," in per_seed_csv(rep)

    def test_metrics_csv_full_precision(self):
        text = metrics_csv([{"loop": 0, "mean_reward": 0.1 + 0.2}], ("loop", "mean_reward"))
        assert text == "loop,mean_reward\n0,0.30000000000000004\n"


def small_trajs(n_users=3, per_user=2):
    sim = Simulator(EnvConfig(**SMALL))
    return sim, rollout(sim, RandomPolicy(np.random.default_rng(0)), range(n_users), per_user)


class TestIngest:
    def test_hand_built_session(self, tmp_path):
        sim = Simulator(EnvConfig(**SMALL))
        p = tmp_path / "s.csv"
        p.write_text("user_id,session_id,step,item_id,clicked,purchased,timestamp\n"
                     "7,0,0,3,0,0,10\n7,0,1,5,1,0,11\n7,0,2,9,1,1,12\n")
        spec = MeasurementSpec(0.5, 4)
        store, report = ingest_sessions(p, sim.catalog, spec)
        assert (report.rows, report.sessions, report.malformed) == (3, 1, 0)
        (traj,) = list(store)
        assert [s.item_id for s in traj.steps] == [3, 5, 9]
        assert [s.exited for s in traj.steps] == [False, False, True]
        m = compute_measurement(traj, 0, None, spec)
        np.testing.assert_allclose(m[:5], [0.5 + 0.25, 0.25, 3.0, 2 / 3, 1.0], rtol=1e-15)

    def test_row_order_irrelevant(self, tmp_path):
        _, trajs = small_trajs()
        export_sessions_csv(tmp_path / "a.csv", trajs)
        lines = (tmp_path / "a.csv").read_text().splitlines()
        rng = np.random.default_rng(0)
        body = [lines[1 + i] for i in rng.permutation(len(lines) - 1)]
        (tmp_path / "b.csv").write_text("\n".join([lines[0], *body]) + "\n")
        sim = Simulator(EnvConfig(**SMALL))
        spec = MeasurementSpec(0.9, 4)
        a, _ = ingest_sessions(tmp_path / "a.csv", sim.catalog, spec)
        b, _ = ingest_sessions(tmp_path / "b.csv", sim.catalog, spec)
        np.testing.assert_array_equal(a.all_targets(), b.all_targets())
        np.testing.assert_array_equal(a.state_rows(np.arange(a.n_steps)),
                                      b.state_rows(np.arange(b.n_steps)))

    def test_replay_round_trip_is_exact(self, tmp_path):
        sim, trajs = small_trajs()
        export_sessions_csv(tmp_path / "s.csv", trajs)
        replay = Simulator(EnvConfig(**SMALL))
        spec = MeasurementSpec(0.9, 4)
        store, report = ingest_sessions(tmp_path / "s.csv", sim.catalog, spec, sim=replay)
        assert report.sessions == len(trajs)
        by_key = {(t.user_id, t.episode_id): t for t in trajs}
        for t in store:
            orig = by_key[(t.user_id, t.episode_id)]
            assert len(t) == len(orig)
            for a, b in zip(t.steps, orig.steps):
                np.testing.assert_array_equal(a.state_features, b.state_features)
                np.testing.assert_array_equal(a.action_features, b.action_features)
                assert (a.clicked, a.purchased, a.exited) == (b.clicked, b.purchased, b.exited)

    def test_malformed_and_unresolved_rows(self, tmp_path):
        sim = Simulator(EnvConfig(**SMALL))
        p = tmp_path / "s.csv"
        p.write_text("user_id,session_id,step,item_id,clicked,purchased,timestamp\n"
                     "1,0,0,3,0,0,0\n1,0,1,x,0,0,1\n1,0,2,999,1,0,2\n1,0,3,4,2,0,3\n")
        store, report = ingest_sessions(p, sim.catalog, MeasurementSpec(0.9, 4))
        assert (report.rows, report.malformed, report.unresolved) == (4, 2, 1)
        assert store.n_steps == 1

    def test_missing_column(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("user_id,step,item_id\n1,0,3\n")
        with pytest.raises(ConfigurationError):
            ingest_sessions(p, Simulator(EnvConfig(**SMALL)).catalog, MeasurementSpec(0.9, 4))


class TestGradientSuite:
    def test_all_blocks_pass(self):
        reports = gradient_suite(seed=1)
        assert set(reports) >= {"world_model", "uncertainty_loss", "myopic_bce", "dqn_td"}
        for name, rep in reports.items():
            assert rep.passed, (name, rep.lines())
