"""Experiment orchestration: configuration, seeded comparison grids, session
ingestion and report rendering."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .agent import (AgentConfig, GoalRecPolicy, METRIC_COLUMNS, TrajectoryStore, evaluate,
                    online_train, pretrain, train_offline)
from .baselines import (DqnConfig, MyopicConfig, click_dataset, dqn_train, myopic_train,
                        policy_of)
from .env import VARIANTS, EnvConfig, ItemCatalog, RandomPolicy, Simulator, rollout
from .measurement import (MeasurementSpec, StepRecord, Trajectory, goal_for_reward_setting,
                          hindsight_goal, compute_measurement)
from .nn import ConfigurationError, UsageError
from .world_model import WorldModel, WorldModelConfig

log = logging.getLogger(__name__)

METHODS = ("goalrec", "goalrec_off", "myopic", "dqn", "random")
REPORT_METRICS = ("cumulative_reward", "ctr", "browsing_depth")
OUTPUT_DIR_ENV = "GOALREC_OUTPUT_DIR"


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    myopic: MyopicConfig = field(default_factory=MyopicConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    methods: tuple = ("goalrec", "myopic", "dqn")
    variants: tuple = ("vanilla",)
    seeds: tuple = (0,)
    root_seed: int = 0
    n_users: int = 333
    train_fraction: float = 0.7
    n_eval_users: int = 100
    log_episodes: int = 1500
    pretrain_iterations: int = 3000
    offline_iterations: int = 3000
    eval_goal: dict = field(default_factory=lambda: {"clicks": 1.0})
    output_dir: str = "runs"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.variants = tuple(self.variants)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seed list has duplicates")
        if not self.methods:
            raise ConfigurationError("method set is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {METHODS}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigurationError(f"variants must be a non-empty subset of {VARIANTS}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        n_train = self.n_train_users
        if n_train < 1 or self.n_users - n_train < 1:
            raise ConfigurationError("user split leaves an empty train or test set")
        if self.log_episodes < 1:
            raise ConfigurationError("log_episodes must be positive")
        self.eval_setting()  # raises on unknown goal components

    @property
    def spec(self) -> MeasurementSpec:
        return MeasurementSpec(self.env.gamma, self.env.d_e)

    def eval_setting(self):
        return goal_for_reward_setting(self.eval_goal, self.spec)

    @property
    def n_train_users(self) -> int:
        return int(round(self.n_users * self.train_fraction))

    def user_split(self) -> tuple[list[int], list[int]]:
        """Disjoint train / evaluation user seeds."""
        n_train = self.n_train_users
        test = list(range(n_train, self.n_users))[:self.n_eval_users]
        return list(range(n_train)), test

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "model": self.model.to_dict(),
            "agent": self.agent.to_dict(),
            "myopic": self.myopic.to_dict(),
            "dqn": self.dqn.to_dict(),
            "methods": list(self.methods),
            "variants": list(self.variants),
            "seeds": list(self.seeds),
            "root_seed": self.root_seed,
            "n_users": self.n_users,
            "train_fraction": self.train_fraction,
            "n_eval_users": self.n_eval_users,
            "log_episodes": self.log_episodes,
            "pretrain_iterations": self.pretrain_iterations,
            "offline_iterations": self.offline_iterations,
            "eval_goal": dict(self.eval_goal),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            if "env" in d:
                d["env"] = EnvConfig.from_dict(d["env"] or {})
            for key, kind in (("model", WorldModelConfig), ("agent", AgentConfig),
                              ("myopic", MyopicConfig), ("dqn", DqnConfig)):
                if key in d:
                    sub = dict(d[key] or {})
                    for k, v in sub.items():
                        if isinstance(v, list):
                            sub[k] = tuple(v)
                    d[key] = kind(**sub)
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: Mapping) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a mapping at top level")
    return ExperimentConfig.from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def derive_seed(root_seed: int, method: str, variant: str, seed_index: int) -> int:
    """Independent 32-bit seed for one (method, variant, seed) cell."""
    key = f"{root_seed}|{method}|{variant}|{seed_index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


# ---------------------------------------------------------------- cells

@dataclass
class CellResult:
    method: str
    variant: str
    seed: int
    metrics: dict | None
    curve: list = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.metrics is None


class CellContext:
    """Shared per-(variant, seed) inputs: the simulator and the behavior logs.

    The environment seed depends on the seed index only, so every method and
    variant of one seed sees the same catalog and users; the logs depend on
    (variant, seed) but never on the method.
    """

    def __init__(self, cfg: ExperimentConfig, variant: str, seed: int):
        self.cfg = cfg
        self.variant = variant
        self.seed = seed
        env_seed = derive_seed(cfg.root_seed, "env", "*", seed)
        self.env_config = cfg.env.with_variant(variant, seed=env_seed)
        self.spec = cfg.spec
        self.setting = cfg.eval_setting()
        self.train_users, self.eval_users = cfg.user_split()
        self._sim = None
        self._logs = None

    @property
    def sim(self) -> Simulator:
        if self._sim is None:
            self._sim = Simulator(self.env_config)
        return self._sim

    def fresh_sim(self) -> Simulator:
        """Simulator sharing the catalog but with its own interaction counter."""
        return Simulator(self.env_config, self.sim.catalog) if self.variant != "high_dim" \
            else copy.copy(self.sim)

    @property
    def logs(self) -> list[Trajectory]:
        if self._logs is None:
            rng = np.random.default_rng(derive_seed(self.cfg.root_seed, "logs", self.variant,
                                                    self.seed))
            per_user = math.ceil(self.cfg.log_episodes / len(self.train_users))
            self._logs = rollout(self.fresh_sim(), RandomPolicy(rng), self.train_users,
                                 per_user, self.spec.dim)[:self.cfg.log_episodes]
        return self._logs

    def log_store(self, sim: Simulator) -> TrajectoryStore:
        store = TrajectoryStore(self.spec, action_matrix=sim.action_matrix)
        store.extend(self.logs)
        return store

    def evaluate(self, policy, sim: Simulator) -> dict:
        return evaluate(policy, sim, self.setting, self.eval_users, self.spec)


def run_cell(ctx: CellContext, method: str) -> CellResult:
    cfg = ctx.cfg
    seed = derive_seed(cfg.root_seed, method, ctx.variant, ctx.seed)
    t0 = time.perf_counter()
    curve: list = []
    sim = ctx.fresh_sim()
    if method in ("goalrec", "goalrec_off"):
        wm = WorldModel(sim.state_dim, sim.action_dim, ctx.spec.dim, cfg.model, seed=seed)
        rng = np.random.default_rng([seed, 3])
        store = ctx.log_store(sim)
        if method == "goalrec_off":
            losses = train_offline(store, wm, cfg.offline_iterations, cfg.agent, rng)
            curve = [{"iteration": k, "main_loss": m, "aux_loss": a}
                     for k, (m, a) in enumerate(losses)]
            if sim.interactions:
                raise UsageError("offline training touched the environment")
        else:
            if cfg.pretrain_iterations:
                pretrain(store, wm, cfg.pretrain_iterations, cfg.agent, rng)
            _, curve = online_train(sim, wm, ctx.setting, ctx.spec, cfg.agent, ctx.train_users,
                                    rng, store=store)
        metrics = ctx.evaluate(GoalRecPolicy(wm, sim.action_matrix, ctx.setting.vector), sim)
    elif method == "myopic":
        x, y = click_dataset(ctx.logs)
        scorer = myopic_train(x, y, MyopicConfig(**{**asdict(cfg.myopic), "seed": seed}))
        metrics = ctx.evaluate(policy_of(scorer, sim.action_matrix), sim)
    elif method == "dqn":
        dcfg = DqnConfig(**{**asdict(cfg.dqn), "seed": seed})
        agent, curve = dqn_train(sim, dcfg, ctx.train_users)
        metrics = ctx.evaluate(policy_of(agent, sim.action_matrix), sim)
    elif method == "random":
        metrics = ctx.evaluate(RandomPolicy(np.random.default_rng(seed)), sim)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return CellResult(method, ctx.variant, ctx.seed, metrics, curve,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------- report

@dataclass
class ComparisonReport:
    methods: tuple
    variants: tuple
    seeds: tuple
    cells: dict = field(default_factory=dict)  # (method, variant, seed) -> CellResult

    def add(self, cell: CellResult) -> None:
        self.cells[(cell.method, cell.variant, cell.seed)] = cell

    def missing(self) -> list[tuple]:
        return [(m, v, s) for m in self.methods for v in self.variants for s in self.seeds
                if (m, v, s) not in self.cells]

    def values(self, method: str, variant: str, metric: str = "cumulative_reward") -> list[float]:
        out = []
        for s in self.seeds:
            cell = self.cells.get((method, variant, s))
            if cell is not None and not cell.failed:
                out.append(float(cell.metrics[metric]))
        return out

    def aggregate(self, method: str, variant: str, metric: str = "cumulative_reward"):
        """(mean, sample std, n); std is 0 for a single value."""
        v = self.values(method, variant, metric)
        if not v:
            return float("nan"), float("nan"), 0
        std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return float(np.mean(v)), std, len(v)


def format_sig(x: float, digits: int = 3) -> str:
    if not math.isfinite(x):
        return "nan"
    if x == 0:
        return "0"
    return f"{x:.{digits}g}"


def format_mean_std(mean: float, std: float) -> str:
    return f"{format_sig(mean)}(±{format_sig(std)})"


def render_report(report: ComparisonReport) -> tuple[str, str]:
    """Machine CSV (one row per method and variant) and a plain-text table."""
    if report.missing():
        raise UsageError(f"report incomplete: {report.missing()[:3]} ...")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["method", "variant", "n_seeds", "n_failed"]
    for m in REPORT_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    table_rows = []
    for method in report.methods:
        for variant in report.variants:
            n_failed = sum(report.cells[(method, variant, s)].failed for s in report.seeds)
            row = [method, variant, len(report.seeds), n_failed]
            pretty = [method, variant]
            for m in REPORT_METRICS:
                mean, std, _ = report.aggregate(method, variant, m)
                row += [repr(mean), repr(std)]
                pretty.append(format_mean_std(mean, std))
            w.writerow(row)
            table_rows.append(pretty)
    cols = ["method", "variant", "reward", "ctr", "depth"]
    widths = [max(len(c), *(len(r[k]) for r in table_rows)) for k, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(cols, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    lines += ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in table_rows]
    return buf.getvalue(), "\n".join(lines) + "\n"


def per_seed_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "variant", "seed", "status", *REPORT_METRICS])
    for (method, variant, seed), cell in sorted(report.cells.items()):
        if cell.failed:
            w.writerow([method, variant, seed, "failed", "", "", ""])
        else:
            w.writerow([method, variant, seed, "ok",
                        *(repr(float(cell.metrics[m])) for m in REPORT_METRICS)])
    return buf.getvalue()


def metrics_csv(rows: Sequence[Mapping], columns: Sequence[str] = METRIC_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "")
                    for c in columns])
    return buf.getvalue()


def compare(cfg: ExperimentConfig, keep_going: bool = True, progress=None) -> ComparisonReport:
    """Run every (method, variant, seed) cell; failures are recorded, not raised,
    unless ``keep_going`` is false."""
    cfg.validate()
    report = ComparisonReport(cfg.methods, cfg.variants, cfg.seeds)
    for seed in cfg.seeds:
        for variant in cfg.variants:
            ctx = CellContext(cfg, variant, seed)
            for method in cfg.methods:
                try:
                    cell = run_cell(ctx, method)
                except (ArithmeticError, RuntimeError, ValueError) as exc:
                    if not keep_going:
                        raise
                    log.error("cell %s/%s/%s failed: %s", method, variant, seed, exc)
                    cell = CellResult(method, variant, seed, None, error=str(exc))
                report.add(cell)
                if progress:
                    progress(cell)
    return report


def write_manifest(out_dir, command: str, cfg: ExperimentConfig, artifacts: Mapping[str, str],
                   complete: bool = True, extra: Mapping | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "complete": complete,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "root_seed": cfg.root_seed,
        "seeds": list(cfg.seeds),
        "artifacts": dict(artifacts),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def config_from_manifest(path) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    cfg = ExperimentConfig.from_dict(data["config"])
    if cfg.config_hash() != data.get("config_hash"):
        raise ConfigurationError("manifest config hash does not match its config")
    return cfg


# ---------------------------------------------------------------- sessions

SESSION_COLUMNS = ("user_id", "session_id", "step", "item_id", "clicked", "purchased",
                   "timestamp")


@dataclass
class IngestReport:
    rows: int = 0
    malformed: int = 0
    unresolved: int = 0
    sessions: int = 0


def export_sessions_csv(path, trajs: Sequence[Trajectory]) -> None:
    """Write trajectories in the session-log schema. ``session_id`` is the
    episode id; ``timestamp`` is a synthetic monotone counter."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SESSION_COLUMNS)
        ts = 0
        for t in trajs:
            for k, s in enumerate(t.steps):
                w.writerow([t.user_id, t.episode_id, k, s.item_id, int(s.clicked),
                            int(s.purchased), ts])
                ts += 1


def history_state_features(embeddings: np.ndarray, clicked_items: Sequence[int],
                           since_click: int, step: int, max_steps: int) -> np.ndarray:
    """State features computable from a logged session alone, laid out like the
    simulator's: [mean clicked embedding, recent-click mean, steps since the last
    click, step], with the first block standing in for the unobserved preference."""
    d = embeddings.shape[1]
    taste = embeddings[list(clicked_items)].mean(axis=0) if clicked_items else np.zeros(d)
    recent = embeddings[list(clicked_items[-5:])].mean(axis=0) if clicked_items else np.zeros(d)
    return np.concatenate([taste, recent, [since_click / max_steps, step / max_steps]])


def _parse_row(row: Mapping) -> tuple | None:
    try:
        vals = (int(row["user_id"]), int(row["session_id"]), int(row["step"]),
                int(row["item_id"]), int(row["clicked"]), int(row["purchased"]))
    except (KeyError, TypeError, ValueError):
        return None
    if vals[2] < 0 or vals[4] not in (0, 1) or vals[5] not in (0, 1):
        return None
    return vals


def _sessions_from_csv(path, n_items: int, report: IngestReport) -> dict:
    sessions: dict[tuple[int, int], list[tuple]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SESSION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigurationError(f"session CSV lacks columns {sorted(missing)}")
        for row in reader:
            report.rows += 1
            vals = _parse_row(row)
            if vals is None:
                report.malformed += 1
                continue
            if not 0 <= vals[3] < n_items:
                report.unresolved += 1
                continue
            sessions.setdefault((vals[0], vals[1]), []).append(vals)
    return sessions


def ingest_sessions(path, catalog: ItemCatalog, spec: MeasurementSpec,
                    sim: Simulator | None = None, max_steps: int = 50,
                    ) -> tuple[TrajectoryStore, IngestReport]:
    """Session-log CSV to a TrajectoryStore.

    Rows are grouped by (user_id, session_id) and ordered by step. The last row
    of a session is its exit. With ``sim`` given, state and action features are
    the simulator's own (the logged items are replayed through it, which
    reproduces the logged session exactly when it came from that simulator);
    otherwise history-based state features and raw catalog action features are
    used. Each trajectory's behavior goal is the hindsight goal of its own
    measurement (the click goal when that is zero).
    """
    report = IngestReport()
    sessions = _sessions_from_csv(path, len(catalog), report)
    if not sessions:
        raise UsageError(f"no usable sessions in {path}")
    raw_actions = np.hstack([catalog.embeddings, catalog.base_attractiveness[:, None],
                             catalog.purchase_propensity[:, None]])
    action_matrix = sim.action_matrix if sim is not None else raw_actions
    store = TrajectoryStore(spec, action_matrix=action_matrix)
    fallback = np.zeros(spec.dim)
    fallback[0] = 1.0
    for (user, session) in sorted(sessions):
        rows = sorted(sessions[(user, session)], key=lambda r: r[2])
        if sim is not None:
            states = _replay_states(sim, user, session, [r[3] for r in rows])
        else:
            states = _history_states(catalog.embeddings, rows, max_steps)
        rows = rows[:len(states)]
        steps = []
        for k, (r, s) in enumerate(zip(rows, states)):
            item = r[3]
            steps.append(StepRecord(s, action_matrix[item], item, bool(r[4]), bool(r[5]),
                                    k == len(rows) - 1, catalog.embeddings[item],
                                    np.array([float(r[4]), float(r[5])])))
        traj = Trajectory(steps, fallback, True, user, session)
        goal = hindsight_goal(compute_measurement(traj, 0, None, spec))
        traj.behavior_goal = goal if goal is not None else fallback
        store.append(traj)
        report.sessions += 1
    return store, report


def _history_states(embeddings, rows, max_steps) -> list[np.ndarray]:
    clicked, since, out = [], 0, []
    for k, r in enumerate(rows):
        out.append(history_state_features(embeddings, clicked, since, k, max_steps))
        if r[4]:
            clicked.append(r[3])
            since = 0
        else:
            since += 1
    return out


def _replay_states(sim: Simulator, user: int, session: int, items: Sequence[int]):
    state, s = sim.reset(user, session)
    out = []
    for item in items:
        out.append(s)
        if state.terminated:
            break
        sim.candidates(state)  # keep the candidate stream aligned with the rollout
        outcome, state = sim.step(state, item)
        s = outcome.next_state_features
    return out


# ---------------------------------------------------------------- gradients

def gradient_suite(seed: int = 0, model: WorldModelConfig | None = None,
                   tolerance: float = 1e-4, batch: int = 6, state_dim: int = 7,
                   action_dim: int = 5, measurement_dim: int = 6,
                   max_entries: int | None = 24) -> dict:
    """Finite-difference checks of every trainable loss on small random inputs.

    Returns ``{name: GradCheckReport}`` for the world model (main plus
    auxiliary uncertainty-weighted loss), the uncertainty loss alone, the myopic
    BCE scorer and the DQN regression loss. ``max_entries`` caps the probed
    entries per parameter block (None probes all of them).
    """
    from . import nn
    from .baselines import DqnAgent, MyopicScorer
    from .world_model import Batch

    rng = np.random.default_rng(seed)
    model = model or WorldModelConfig()
    probe = {"max_entries": max_entries, "rng": rng}
    reports = {}

    wm = WorldModel(state_dim, action_dim, measurement_dim, model, seed=seed)
    wm.fit_target_normalization(rng.normal(size=(20, measurement_dim)) * 2 + 1)
    wm.loss_state.log_var[:] = rng.normal(scale=0.3, size=measurement_dim)
    goals = rng.normal(size=(batch, measurement_dim))
    goals /= np.linalg.norm(goals, axis=1, keepdims=True)
    b = Batch(rng.normal(size=(batch, state_dim)), rng.normal(size=(batch, action_dim)), goals,
              rng.normal(size=(batch, measurement_dim)), np.zeros(batch, dtype=bool))
    lam = wm.config.lambda_aux

    def wm_fn():
        main, aux, grads = wm.loss_and_grads(b)
        return main + lam * aux, grads
    reports["world_model"] = nn.gradient_check(wm_fn, wm.params(), wm.param_names(), tolerance, **probe)

    pred = rng.normal(size=(batch, measurement_dim))
    targ = rng.normal(size=(batch, measurement_dim))
    lv = rng.normal(scale=0.5, size=measurement_dim)

    def unc_fn():
        loss, d_pred, d_lv = nn.uncertainty_loss(pred, targ, lv)
        return loss, [d_pred, d_lv]
    reports["uncertainty_loss"] = nn.gradient_check(unc_fn, [pred, lv], ["pred", "log_var"],
                                                    tolerance, **probe)

    x = rng.normal(size=(batch, state_dim + action_dim))
    y = (rng.random(batch) < 0.5).astype(np.float64)
    scorer = MyopicScorer.build(x.shape[1], MyopicConfig(hidden=(8, 6), seed=seed))
    x_m = nn.nudge_off_kinks(scorer.net, x, rng=rng)
    reports["myopic_bce"] = nn.gradient_check(lambda: scorer.loss_and_grads(x_m, y),
                                              scorer.net.params(),
                                              scorer.net.param_names(), tolerance, **probe)

    agent = DqnAgent(x.shape[1], DqnConfig(hidden=(8, 6), seed=seed))
    x_q = nn.nudge_off_kinks(agent.q_net, x, rng=rng)
    yq = rng.normal(size=batch)
    reports["dqn_td"] = nn.gradient_check(lambda: agent.loss_and_grads(x_q, yq),
                                          agent.q_net.params(), agent.q_net.param_names(),
                                          tolerance, **probe)
    return reports
