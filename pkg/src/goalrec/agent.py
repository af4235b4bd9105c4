"""The goal-conditioned recommendation agent: replay, relabeling, exploration
and the offline/online training loops around :class:`WorldModel`."""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .env import Simulator, run_episode
from .measurement import (GoalSetting, MeasurementSpec, Trajectory, compute_measurement,
                          hindsight_goal, random_unit_goal, suffix_measurements)
from .nn import ConfigurationError, UsageError
from .world_model import Batch, WorldModel

log = logging.getLogger(__name__)

HER_STRATEGIES = ("none", "final", "future", "both")


@dataclass
class ExplorationSchedule:
    """Linear decay of the goal-exploration rate from 1 to 0."""

    total_decay_steps: int
    epsilon_start: float = 1.0
    epsilon_end: float = 0.0

    def __post_init__(self):
        if self.total_decay_steps < 1:
            raise ConfigurationError("total_decay_steps must be positive")

    def epsilon(self, t: int) -> float:
        if t >= self.total_decay_steps:
            return self.epsilon_end
        frac = max(t, 0) / self.total_decay_steps
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass
class ReplaySample:
    state_features: np.ndarray
    action_features: np.ndarray
    goal: np.ndarray
    measurement_target: np.ndarray
    hindsight_flag: bool
    source: tuple = ()  # (trajectory index, from step, to step or None)


class TrajectoryStore:
    """Append-only trajectory collection with optional FIFO eviction of whole
    trajectories. Appends are locked; sampling is single-consumer.

    Step-level arrays (state features, action features, suffix measurements)
    are kept in growable buffers for vectorised batch assembly. When an
    ``action_matrix`` is given, action features are looked up by item id
    instead of being copied per step.
    """

    def __init__(self, spec: MeasurementSpec, capacity: int | None = None,
                 action_matrix: np.ndarray | None = None):
        self.spec = spec
        self.capacity = capacity
        self.action_matrix = action_matrix
        self.trajectories: deque[Trajectory] = deque()
        self._lock = threading.Lock()
        self._reset_buffers()

    def _reset_buffers(self):
        self._n = 0
        self._S = self._A = None
        self._M = np.zeros((0, self.spec.dim))
        self._G = np.zeros((0, self.spec.dim))
        self._has_g = np.zeros(0, dtype=bool)
        self._items = np.zeros(0, dtype=np.int64)
        self._offsets: list[int] = []

    def _grow(self, need: int, ds: int, da: int):
        cap = 0 if self._S is None else self._S.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap, 256)
        D = self.spec.dim
        S, M, G = np.zeros((new, ds)), np.zeros((new, D)), np.zeros((new, D))
        items, has_g = np.zeros(new, np.int64), np.zeros(new, dtype=bool)
        A = None if self.action_matrix is not None else np.zeros((new, da))
        if self._S is not None:
            n = self._n
            S[:n], M[:n], G[:n] = self._S[:n], self._M[:n], self._G[:n]
            items[:n], has_g[:n] = self._items[:n], self._has_g[:n]
            if A is not None:
                A[:n] = self._A[:n]
        self._S, self._A, self._M, self._G = S, A, M, G
        self._items, self._has_g = items, has_g

    def _push(self, traj: Trajectory):
        n = len(traj)
        suffix = suffix_measurements(traj, self.spec)
        self._grow(self._n + n, traj.steps[0].state_features.size,
                   traj.steps[0].action_features.size)
        lo, hi = self._n, self._n + n
        self._S[lo:hi] = np.stack([st.state_features for st in traj.steps])
        if self._A is not None:
            self._A[lo:hi] = np.stack([st.action_features for st in traj.steps])
        self._M[lo:hi] = suffix
        for r, m in enumerate(suffix, start=lo):
            g = hindsight_goal(m)
            self._has_g[r] = g is not None
            if g is not None:
                self._G[r] = g
        self._items[lo:hi] = [st.item_id for st in traj.steps]
        self._offsets.append(lo)
        self._n = hi

    def append(self, traj: Trajectory) -> None:
        with self._lock:
            self.trajectories.append(traj)
            evicted = False
            while self.capacity is not None and len(self.trajectories) > self.capacity:
                self.trajectories.popleft()
                evicted = True
            if evicted:
                self._reset_buffers()
                for t in self.trajectories:
                    self._push(t)
            else:
                self._push(traj)

    def extend(self, trajs: Sequence[Trajectory]) -> None:
        for t in trajs:
            self.append(t)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_steps(self) -> int:
        return self._n

    def suffix(self, k: int) -> np.ndarray:
        lo = self._offsets[k]
        return self._M[lo:lo + len(self.trajectories[k])]

    def all_targets(self) -> np.ndarray:
        return self._M[:self._n]

    def state_rows(self, rows) -> np.ndarray:
        return self._S[rows]

    def action_rows(self, rows) -> np.ndarray:
        if self._A is None:
            return self.action_matrix[self._items[rows]]
        return self._A[rows]


def uniform_future_end(rng: np.random.Generator, i: int, n: int) -> int:
    """End index drawn uniformly from (i, n-1]; the last step maps to itself."""
    if i >= n - 1:
        return n - 1
    return int(rng.integers(i + 1, n))


def sample_batch(store: TrajectoryStore, batch_size: int, rng: np.random.Generator,
                 her_strategy: str = "both", k_future: int = 1,
                 future_end: Callable[[np.random.Generator, int, int], int] | None = None
                 ) -> tuple[Batch, list[tuple]]:
    """Sample ``batch_size`` stored steps uniformly and assemble a batch.

    Every pair yields the original sample (behavior goal, measurement of the
    rest of the trajectory). ``final`` adds one relabeled copy whose goal is the
    normalised achieved measurement; ``future`` adds ``k_future`` copies over a
    truncated segment ending at a random later step; ``both`` does both.
    Relabeled copies are skipped when the achieved measurement is zero.
    Also returns per-row sources ``(trajectory index, from step, to step)``.
    """
    if len(store) == 0:
        raise UsageError("cannot sample from an empty trajectory store")
    if her_strategy not in HER_STRATEGIES:
        raise ConfigurationError(f"unknown HER strategy {her_strategy!r}")
    trajs = store.trajectories
    lengths = np.array([len(t) for t in trajs])
    offsets = np.asarray(store._offsets)
    # uniform over stored steps; drawing a trajectory first would over-weight
    # short sessions and bias every conditional mean toward them
    rows = rng.integers(store.n_steps, size=batch_size)
    k = np.searchsorted(offsets, rows, side="right") - 1
    i = rows - offsets[k]
    targets = store.all_targets()
    row_idx = list(rows)
    goals = [trajs[kk].behavior_goal for kk in k]
    tgts = [targets[r] for r in rows]
    flags = [False] * batch_size
    sources = [(int(kk), int(ii), None) for kk, ii in zip(k, i)]

    def emit(r, g, m, src):
        row_idx.append(r)
        goals.append(g)
        tgts.append(m)
        flags.append(True)
        sources.append(src)

    if her_strategy in ("final", "both"):
        for r, kk, ii in zip(rows, k, i):
            if store._has_g[r]:
                emit(r, store._G[r], targets[r], (int(kk), int(ii), None))
    if her_strategy in ("future", "both"):
        for _ in range(k_future):
            if future_end is None:
                span = lengths[k] - 1 - i
                ends = np.where(span > 0, i + 1 + (rng.random(batch_size) * span).astype(np.int64),
                                lengths[k] - 1)
                ends = np.minimum(ends, lengths[k] - 1)
            else:
                ends = [future_end(rng, int(ii), int(lengths[kk])) for kk, ii in zip(k, i)]
            for r, kk, ii, end in zip(rows, k, i, ends):
                end = int(end)
                if end == lengths[kk] - 1:
                    m2, g = targets[r], (store._G[r] if store._has_g[r] else None)
                else:
                    m2 = compute_measurement(trajs[kk], int(ii), end, store.spec)
                    g = hindsight_goal(m2)
                if g is not None:
                    emit(r, g, m2, (int(kk), int(ii), end))
    row_idx = np.asarray(row_idx)
    batch = Batch(store.state_rows(row_idx), store.action_rows(row_idx), np.stack(goals),
                  np.stack(tgts), np.array(flags))
    return batch, sources


def make_training_batch(store: TrajectoryStore, batch_size: int, rng: np.random.Generator,
                        her_strategy: str = "both", k_future: int = 1,
                        future_end: Callable[[np.random.Generator, int, int], int] | None = None
                        ) -> list[ReplaySample]:
    """:func:`sample_batch` unpacked into individual replay samples."""
    batch, sources = sample_batch(store, batch_size, rng, her_strategy, k_future, future_end)
    return [ReplaySample(batch.states[j], batch.actions[j], batch.goals[j], batch.targets[j],
                         bool(batch.hindsight[j]), sources[j]) for j in range(len(batch))]


def to_batch(samples: Sequence[ReplaySample]) -> Batch:
    return Batch(np.stack([s.state_features for s in samples]),
                 np.stack([s.action_features for s in samples]),
                 np.stack([s.goal for s in samples]),
                 np.stack([s.measurement_target for s in samples]),
                 np.array([s.hindsight_flag for s in samples]))


@dataclass
class AgentConfig:
    loops: int = 200
    episodes_per_loop: int = 5
    update_period: int = 256
    grad_steps: int = 4
    batch_size: int = 128
    her_strategy: str = "both"
    k_future: int = 1
    decay_steps: int | None = None  # defaults to 80% of the expected experience budget
    trajectories_per_user: int = 30
    pretrain_iterations: int = 0
    expected_episode_length: int = 10

    def __post_init__(self):
        if self.her_strategy not in HER_STRATEGIES:
            raise ConfigurationError(f"unknown HER strategy {self.her_strategy!r}")
        if self.update_period < 1 or self.grad_steps < 0 or self.batch_size < 1:
            raise ConfigurationError("invalid update cadence")

    def schedule(self) -> ExplorationSchedule:
        steps = self.decay_steps or max(
            1, int(0.8 * self.loops * self.episodes_per_loop * self.expected_episode_length))
        return ExplorationSchedule(steps)

    def to_dict(self) -> dict:
        return asdict(self)


def ensure_normalized(wm: WorldModel, store: TrajectoryStore) -> None:
    if not wm.normalized and len(store):
        wm.fit_target_normalization(store.all_targets())


def train_steps(wm: WorldModel, store: TrajectoryStore, n_steps: int, cfg: AgentConfig,
                rng: np.random.Generator) -> list[tuple[float, float]]:
    ensure_normalized(wm, store)
    curve = []
    for _ in range(n_steps):
        batch, _ = sample_batch(store, cfg.batch_size, rng, cfg.her_strategy, cfg.k_future)
        main, aux, applied = wm.train_batch(batch)
        if not applied:
            log.warning("non-finite loss; batch skipped")
        curve.append((main, aux))
    return curve


def pretrain(store: TrajectoryStore, wm: WorldModel, iterations: int, cfg: AgentConfig,
             rng: np.random.Generator) -> list[tuple[float, float]]:
    """Fit the world model on stored trajectories only; no environment access."""
    if len(store) == 0:
        raise UsageError("pretraining needs a non-empty trajectory store")
    if iterations <= 0:
        return []
    return train_steps(wm, store, iterations, cfg, rng)


def act(wm: WorldModel, state_features, candidate_ids, action_matrix, eval_goal,
        schedule: ExplorationSchedule | None, step: int,
        rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Greedy under ``eval_goal`` with probability 1 - eps, otherwise greedy
    under a uniformly random unit goal. Returns (item, goal used)."""
    eps = 0.0 if schedule is None else schedule.epsilon(step)
    goal = np.asarray(eval_goal, dtype=np.float64)
    if eps > 0.0 and rng.random() < eps:
        goal = random_unit_goal(goal.size, rng)
    return wm.select_action(state_features, candidate_ids, action_matrix, goal), goal


class GoalRecPolicy:
    """Rollout policy. The behavior goal is drawn once per episode (eval goal,
    or a random goal with probability eps) and acted on greedily."""

    def __init__(self, wm: WorldModel, action_matrix: np.ndarray, eval_goal,
                 schedule: ExplorationSchedule | None = None,
                 rng: np.random.Generator | None = None):
        self.wm = wm
        self.action_matrix = action_matrix
        self.eval_goal = np.asarray(eval_goal, dtype=np.float64)
        self.schedule = schedule
        self.rng = rng or np.random.default_rng(0)
        self.experience = 0
        self.explored_episodes = 0

    def begin_episode(self) -> np.ndarray:
        eps = 0.0 if self.schedule is None else self.schedule.epsilon(self.experience)
        if eps > 0.0 and self.rng.random() < eps:
            self.explored_episodes += 1
            return random_unit_goal(self.eval_goal.size, self.rng)
        return self.eval_goal

    def __call__(self, state_features, candidates, goal) -> int:
        return self.wm.select_action(state_features, candidates,
                                     self.action_matrix[candidates], goal)


def episode_reward(traj: Trajectory, setting: GoalSetting, spec: MeasurementSpec) -> float:
    """Undiscounted goal-weighted return of a whole episode in raw weight units."""
    undiscounted = MeasurementSpec(1.0, spec.d_e)
    m = compute_measurement(traj, 0, None, undiscounted)
    return float(setting.scale * (setting.vector @ m))


def summarize(trajs: Sequence[Trajectory], setting: GoalSetting, spec: MeasurementSpec) -> dict:
    if not trajs:
        return {"cumulative_reward": 0.0, "ctr": 0.0, "browsing_depth": 0.0, "n_users": 0}
    clicks = sum(t.n_clicks for t in trajs)
    depth = sum(len(t) for t in trajs)
    return {
        "cumulative_reward": float(np.mean([episode_reward(t, setting, spec) for t in trajs])),
        "ctr": clicks / depth,
        "browsing_depth": depth / len(trajs),
        "n_users": len(trajs),
    }


EVAL_EPISODE = 1_000_000


def evaluate(policy, sim: Simulator, setting: GoalSetting, user_seeds: Sequence[int],
             spec: MeasurementSpec) -> dict:
    """One greedy session per evaluation user. ``policy`` is any rollout
    callback; a GoalRecPolicy is evaluated with exploration disabled."""
    if isinstance(policy, GoalRecPolicy):
        policy = GoalRecPolicy(policy.wm, policy.action_matrix, setting.vector, None)
    goal = setting.vector
    trajs = [run_episode(sim, policy, int(u), EVAL_EPISODE, goal)
             for k, u in enumerate(user_seeds)]
    return summarize(trajs, setting, spec)


METRIC_COLUMNS = ("loop", "episodes", "epsilon", "mean_reward", "ctr", "depth",
                  "main_loss", "aux_loss")


class UserPool:
    """Round-robin over training users, each capped at ``cap`` sessions."""

    def __init__(self, user_seeds: Sequence[int], cap: int):
        self.users = [int(u) for u in user_seeds]
        if not self.users:
            raise ConfigurationError("no training users")
        self.cap = cap
        self.counts = {u: 0 for u in self.users}
        self._next = 0

    def take(self) -> tuple[int, int] | None:
        for _ in range(len(self.users)):
            u = self.users[self._next]
            self._next = (self._next + 1) % len(self.users)
            if self.counts[u] < self.cap:
                self.counts[u] += 1
                return u, self.counts[u] - 1
        return None


def online_train(sim: Simulator, wm: WorldModel, setting: GoalSetting, spec: MeasurementSpec,
                 cfg: AgentConfig, user_seeds: Sequence[int], rng: np.random.Generator,
                 store: TrajectoryStore | None = None) -> tuple[TrajectoryStore, list[dict]]:
    """Alternate greedy/explorative sessions with world-model refreshes.

    Every ``update_period`` new steps the model takes ``grad_steps`` Adam
    steps on fresh HER batches. Returns the store and one metrics row per loop.
    """
    store = store if store is not None else TrajectoryStore(spec, action_matrix=sim.action_matrix)
    schedule = cfg.schedule()
    policy = GoalRecPolicy(wm, sim.action_matrix, setting.vector, schedule, rng)
    pool = UserPool(user_seeds, cfg.trajectories_per_user)
    if cfg.pretrain_iterations and len(store):
        pretrain(store, wm, cfg.pretrain_iterations, cfg, rng)
    metrics = []
    pending = 0
    episodes = 0
    for loop in range(cfg.loops):
        loop_trajs = []
        losses = []
        eps = schedule.epsilon(policy.experience)
        for _ in range(cfg.episodes_per_loop):
            nxt = pool.take()
            if nxt is None:
                break
            user, k = nxt
            goal = policy.begin_episode()
            traj = run_episode(sim, policy, user, k, goal)
            episodes += 1
            store.append(traj)
            loop_trajs.append(traj)
            policy.experience += len(traj)
            pending += len(traj)
            while pending >= cfg.update_period:
                pending -= cfg.update_period
                losses.extend(train_steps(wm, store, cfg.grad_steps, cfg, rng))
        if not loop_trajs:
            break
        summary = summarize(loop_trajs, setting, spec)
        main = float(np.mean([l[0] for l in losses])) if losses else float("nan")
        aux = float(np.mean([l[1] for l in losses])) if losses else float("nan")
        metrics.append({"loop": loop, "episodes": episodes, "epsilon": eps,
                        "mean_reward": summary["cumulative_reward"], "ctr": summary["ctr"],
                        "depth": summary["browsing_depth"], "main_loss": main, "aux_loss": aux})
    return store, metrics


def train_offline(store: TrajectoryStore, wm: WorldModel, iterations: int, cfg: AgentConfig,
                  rng: np.random.Generator) -> list[tuple[float, float]]:
    """Offline variant: fit purely on logged trajectories."""
    return pretrain(store, wm, iterations, cfg, rng)
