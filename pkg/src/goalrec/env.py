"""Session-based user simulator.

Each user carries a unit preference vector ``u``. Shown item ``e``, they click
with probability ``sigmoid(alpha <u, e> + beta + b_item)`` (plus trend noise in
the high-variance variant), may purchase after a click, drift their preference
toward clicked items, and leave with a probability that grows with the number
of consecutive non-clicks.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse

from .measurement import StepRecord, Trajectory
from .nn import ConfigurationError, UsageError, sigmoid

VARIANTS = ("vanilla", "high_dim", "high_variance")
RECENT_WINDOW = 5
N_BINS = 8


@dataclass
class HighDimConfig:
    action_dim: int = 10_000
    state_dim: int = 30_000
    projection_density: float = 1e-2


@dataclass
class HighVarianceConfig:
    delay_steps: int = 3
    noise_variance: float = 0.2


@dataclass
class EnvConfig:
    n_items: int = 500
    d_e: int = 16
    max_steps: int = 50
    gamma: float = 0.9
    exit_base: float = 0.05
    boredom_rate: float = 0.08
    preference_drift: float = 0.2
    click_scale: float = 4.0
    click_bias: float = -1.0
    attractiveness_std: float = 0.5
    purchase_range: tuple = (0.02, 0.1)
    n_candidates: int = 50
    variant: str = "vanilla"
    high_dim: HighDimConfig | None = None
    high_variance: HighVarianceConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.variant == "high_dim" and self.high_dim is None:
            self.high_dim = HighDimConfig()
        if self.variant == "high_variance" and self.high_variance is None:
            self.high_variance = HighVarianceConfig()
        if self.variant != "high_dim" and self.high_dim is not None:
            raise ConfigurationError("high_dim block given for a non-high_dim variant")
        if self.variant != "high_variance" and self.high_variance is not None:
            raise ConfigurationError("high_variance block given for a non-high_variance variant")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if min(self.n_items, self.d_e, self.max_steps) < 1:
            raise ConfigurationError("n_items, d_e and max_steps must be positive")
        if self.high_variance is not None:
            if self.high_variance.delay_steps < 0 or self.high_variance.noise_variance <= 0:
                raise ConfigurationError("invalid high_variance block")
        self.purchase_range = tuple(self.purchase_range)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["purchase_range"] = list(self.purchase_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if d.get("high_dim") is not None:
            d["high_dim"] = HighDimConfig(**d["high_dim"])
        if d.get("high_variance") is not None:
            d["high_variance"] = HighVarianceConfig(**d["high_variance"])
        return cls(**d)

    def with_variant(self, variant: str, **overrides) -> "EnvConfig":
        d = self.to_dict()
        d.update(variant=variant, high_dim=None, high_variance=None)
        d.update(overrides)
        return EnvConfig.from_dict(d)


@dataclass
class ItemCatalog:
    embeddings: np.ndarray  # (n, d_e), unit rows
    base_attractiveness: np.ndarray
    purchase_propensity: np.ndarray

    @classmethod
    def generate(cls, config: EnvConfig, rng: np.random.Generator) -> "ItemCatalog":
        e = rng.normal(size=(config.n_items, config.d_e))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        attract = rng.normal(scale=config.attractiveness_std, size=config.n_items) \
            if config.attractiveness_std > 0 else np.zeros(config.n_items)
        lo, hi = config.purchase_range
        prop = rng.uniform(lo, hi, size=config.n_items)
        return cls(e, attract, prop)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def d_e(self) -> int:
        return self.embeddings.shape[1]

    def to_dict(self) -> dict:
        return {"item_id": list(range(len(self))),
                "embedding": self.embeddings.tolist(),
                "base_attractiveness": self.base_attractiveness.tolist(),
                "purchase_propensity": self.purchase_propensity.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ItemCatalog":
        ids = d.get("item_id", list(range(len(d["embedding"]))))
        if list(ids) != list(range(len(ids))):
            raise ConfigurationError("catalog item ids must be dense 0..n-1")
        e = np.array(d["embedding"], dtype=np.float64)
        return cls(e, np.array(d["base_attractiveness"], dtype=np.float64),
                   np.array(d["purchase_propensity"], dtype=np.float64))


@dataclass
class EnvState:
    user_seed: int
    user_preference: np.ndarray
    rng: np.random.Generator
    candidate_rng: np.random.Generator
    boredom: int = 0
    step_index: int = 0
    pending_rewards: deque = field(default_factory=deque)
    noise_history: tuple = (0.0, 0.0)
    recent_clicks: deque = field(default_factory=lambda: deque(maxlen=RECENT_WINDOW))
    terminated: bool = False


@dataclass
class StepOutcome:
    clicked: bool
    purchased: bool
    exited: bool
    raw_click_prob: float
    delivered_reward: np.ndarray
    generated_reward: np.ndarray
    next_state_features: np.ndarray


class FeatureExpander:
    """Fixed sparse random projection plus hashed crosses of discretised features."""

    def __init__(self, in_dim: int, out_dim: int, density: float, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.proj_dim = out_dim // 2
        self.hash_dim = out_dim - self.proj_dim
        scale = 1.0 / np.sqrt(max(density * in_dim, 1e-12))
        self.projection = scipy.sparse.random(
            self.proj_dim, in_dim, density=density, format="csr", random_state=rng,
            data_rvs=lambda k: rng.choice([-scale, scale], size=k))
        self.edges = np.linspace(-1.0, 1.0, N_BINS + 1)[1:-1]
        i, j = np.triu_indices(in_dim, k=1)
        self.pair_i, self.pair_j = i.astype(np.int64), j.astype(np.int64)
        self.salt = np.int64(rng.integers(1, 2**31))

    def _hashed(self, bins: np.ndarray) -> np.ndarray:
        # bins: (..., in_dim)
        bi = bins[..., self.pair_i]
        bj = bins[..., self.pair_j]
        key = ((self.pair_i * 1_000_003 + self.pair_j) * 131 + bi) * 131 + bj
        key = (key * 2654435761 + self.salt) % np.int64(2**31 - 1)
        return key % self.hash_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        out = np.zeros((X.shape[0], self.out_dim))
        out[:, :self.proj_dim] = (self.projection @ X.T).T
        idx = self._hashed(np.digitize(X, self.edges).astype(np.int64)) + self.proj_dim
        rows = np.repeat(np.arange(X.shape[0]), idx.shape[1])
        np.add.at(out, (rows, idx.ravel()), 1.0)
        return out[0] if single else out


class Simulator:
    """Owns the immutable catalog and feature maps; episode state lives in
    :class:`EnvState`."""

    def __init__(self, config: EnvConfig, catalog: ItemCatalog | None = None):
        self.config = config
        root = np.random.SeedSequence([config.seed, 0xC0FFEE])
        cat_seq, proj_seq = root.spawn(2)
        self.catalog = catalog if catalog is not None else \
            ItemCatalog.generate(config, np.random.default_rng(cat_seq))
        if self.catalog.d_e != config.d_e or len(self.catalog) != config.n_items:
            raise ConfigurationError("catalog does not match n_items/d_e")
        self.interactions = 0
        self.base_state_dim = 2 * config.d_e + 2
        self.base_action_dim = config.d_e + 2
        base_actions = np.hstack([self.catalog.embeddings,
                                  self.catalog.base_attractiveness[:, None],
                                  self.catalog.purchase_propensity[:, None]])
        if config.variant == "high_dim":
            hd = config.high_dim
            prng = np.random.default_rng(proj_seq)
            self._state_expander = FeatureExpander(self.base_state_dim, hd.state_dim,
                                                   hd.projection_density, prng)
            action_expander = FeatureExpander(self.base_action_dim, hd.action_dim,
                                              hd.projection_density, prng)
            self.action_matrix = action_expander(base_actions)
        else:
            self._state_expander = None
            self.action_matrix = base_actions
        self.action_matrix.setflags(write=False)

    @property
    def state_dim(self) -> int:
        return self._state_expander.out_dim if self._state_expander else self.base_state_dim

    @property
    def action_dim(self) -> int:
        return self.action_matrix.shape[1]

    def reset(self, user_seed: int, episode: int = 0) -> tuple[EnvState, np.ndarray]:
        """Start a session. The user's preference depends only on
        ``(config.seed, user_seed)``; response randomness also on ``episode``."""
        pref_rng = np.random.default_rng([self.config.seed, user_seed])
        u = pref_rng.normal(size=self.config.d_e)
        u /= np.linalg.norm(u)
        resp, cand = np.random.SeedSequence([self.config.seed, user_seed, episode, 1]).spawn(2)
        state = EnvState(user_seed, u, np.random.default_rng(resp), np.random.default_rng(cand))
        return state, self.state_features(state)

    def candidates(self, state: EnvState) -> np.ndarray:
        n, k = self.config.n_items, self.config.n_candidates
        if k <= 0 or k >= n:
            return np.arange(n)
        return np.sort(state.candidate_rng.choice(n, size=k, replace=False))

    def trend_noise_next(self, state: EnvState, eps: float | None = None) -> float:
        """y_t = y_{t-1} + y_{t-2} + eps_t with eps_t ~ N(0, noise_variance)."""
        hv = self.config.high_variance
        if hv is None:
            raise UsageError("trend noise only exists in the high_variance variant")
        if eps is None:
            eps = state.rng.normal(scale=np.sqrt(hv.noise_variance))
        y1, y2 = state.noise_history
        y = y1 + y2 + eps
        state.noise_history = (y, y1)
        return y

    def click_probability(self, state: EnvState, item_id: int, noise: float = 0.0) -> float:
        c = self.config
        logit = (c.click_scale * float(state.user_preference @ self.catalog.embeddings[item_id])
                 + c.click_bias + self.catalog.base_attractiveness[item_id])
        return float(np.clip(sigmoid(logit) + noise, 0.0, 1.0))

    def step(self, state: EnvState, item_id: int) -> tuple[StepOutcome, EnvState]:
        if state.terminated:
            raise UsageError("cannot step a terminated session")
        c = self.config
        if not (0 <= int(item_id) < c.n_items):
            raise ConfigurationError(f"item {item_id} not in catalog")
        item_id = int(item_id)
        noise = self.trend_noise_next(state) if c.variant == "high_variance" else 0.0
        p = self.click_probability(state, item_id, noise)
        u_click, u_buy, u_exit = state.rng.random(3)
        clicked = bool(u_click < p)
        purchased = bool(clicked and u_buy < self.catalog.purchase_propensity[item_id])
        e = self.catalog.embeddings[item_id]
        if clicked:
            u = (1.0 - c.preference_drift) * state.user_preference + c.preference_drift * e
            state.user_preference = u / np.linalg.norm(u)
            state.boredom = 0
            state.recent_clicks.append(item_id)
        else:
            state.boredom += 1
        t = state.step_index
        state.step_index += 1
        exit_p = min(1.0, c.exit_base + c.boredom_rate * state.boredom)
        exited = bool(u_exit < exit_p) or state.step_index >= c.max_steps

        generated = np.array([float(clicked), float(purchased)])
        if c.variant == "high_variance" and c.high_variance.delay_steps > 0:
            state.pending_rewards.append((t + c.high_variance.delay_steps, generated))
            delivered = np.zeros(2)
            while state.pending_rewards and (exited or state.pending_rewards[0][0] <= t):
                delivered = delivered + state.pending_rewards.popleft()[1]
        else:
            delivered = generated.copy()
        state.terminated = exited
        self.interactions += 1
        return StepOutcome(clicked, purchased, exited, p, delivered, generated,
                           self.state_features(state)), state

    def base_state_features(self, state: EnvState) -> np.ndarray:
        c = self.config
        recent = np.zeros(c.d_e)
        if state.recent_clicks:
            recent = self.catalog.embeddings[list(state.recent_clicks)].mean(axis=0)
        return np.concatenate([state.user_preference, recent,
                               [state.boredom / c.max_steps, state.step_index / c.max_steps]])

    def state_features(self, state: EnvState) -> np.ndarray:
        x = self.base_state_features(state)
        return self._state_expander(x) if self._state_expander else x

    def action_features(self, item_id) -> np.ndarray:
        return self.action_matrix[item_id]

    def featurize(self, state: EnvState, item_id: int) -> tuple[np.ndarray, np.ndarray]:
        return self.state_features(state), self.action_features(item_id)

    def describe(self) -> dict:
        return {"config": self.config.to_dict(), "state_dim": self.state_dim,
                "action_dim": self.action_dim,
                "state_layout": {"user_preference": [0, self.config.d_e],
                                 "recent_click_mean": [self.config.d_e, 2 * self.config.d_e],
                                 "boredom": [2 * self.config.d_e, 2 * self.config.d_e + 1],
                                 "step": [2 * self.config.d_e + 1, 2 * self.config.d_e + 2]},
                "action_layout": {"embedding": [0, self.config.d_e],
                                  "base_attractiveness": [self.config.d_e, self.config.d_e + 1],
                                  "purchase_propensity": [self.config.d_e + 1,
                                                          self.config.d_e + 2]}}


PolicyFn = Callable[[np.ndarray, np.ndarray, np.ndarray], int]


class RandomPolicy:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, state_features, candidates, goal) -> int:
        return int(candidates[self.rng.integers(len(candidates))])


def default_behavior_goal(dim: int) -> np.ndarray:
    g = np.zeros(dim)
    g[0] = 1.0
    return g


def run_episode(sim: Simulator, policy: PolicyFn, user_seed: int, episode: int,
                goal: np.ndarray) -> Trajectory:
    """One session; the trajectory's ``(user_id, episode_id)`` pair is the
    ``(user_seed, episode)`` that seeds it, so a session can be replayed."""
    state, s = sim.reset(user_seed, episode)
    steps = []
    while not state.terminated:
        cands = sim.candidates(state)
        item = policy(s, cands, goal)
        try:
            item = int(item)
        except (TypeError, ValueError):
            raise ConfigurationError(f"policy returned non-integer item {item!r}") from None
        if item not in set(cands.tolist()):
            raise ConfigurationError(
                f"policy returned item {item} outside the candidate set at user "
                f"{user_seed} step {state.step_index}")
        outcome, state = sim.step(state, item)
        steps.append(StepRecord(s, sim.action_features(item), item, outcome.clicked,
                                outcome.purchased, outcome.exited,
                                sim.catalog.embeddings[item], outcome.delivered_reward, cands))
        s = outcome.next_state_features
    return Trajectory(steps, np.asarray(goal, dtype=np.float64), True, user_seed, episode)


def rollout(sim: Simulator, policy, user_seeds: Iterable[int], trajectories_per_user: int = 1,
            goal_dim: int | None = None, behavior_goal: np.ndarray | None = None,
            first_episode: int = 0) -> list[Trajectory]:
    """Run ``trajectories_per_user`` sessions for every user.

    ``policy`` maps (state features, candidate item ids, behavior goal) to an
    item id. If it has a ``begin_episode()`` method, that supplies the
    behavior goal of each session; otherwise ``behavior_goal`` is used.
    """
    if goal_dim is None:
        goal_dim = 5 + sim.config.d_e
    fixed_goal = behavior_goal if behavior_goal is not None else default_behavior_goal(goal_dim)
    trajs = []
    for user in user_seeds:
        for k in range(first_episode, first_episode + trajectories_per_user):
            goal = policy.begin_episode() if hasattr(policy, "begin_episode") else fixed_goal
            trajs.append(run_episode(sim, policy, int(user), k, goal))
    return trajs


def trajectory_log_records(trajs: Sequence[Trajectory], include_features: bool = True):
    for t in trajs:
        for k, s in enumerate(t.steps):
            yield {
                "episode_id": t.episode_id,
                "user_id": t.user_id,
                "step": k,
                "state_features": s.state_features.tolist() if include_features else None,
                "item_id": s.item_id,
                "clicked": s.clicked,
                "purchased": s.purchased,
                "exited": s.exited,
                "delivered_reward": s.delivered_reward.tolist(),
                "behavior_goal": t.behavior_goal.tolist(),
            }


def write_trajectory_log(path, trajs: Sequence[Trajectory], include_features: bool = True) -> None:
    """JSON-lines log, one record per step. With ``include_features=False``
    (used for high_dim), records carry ``feature_ref`` instead, from which the
    features are recomputed by replaying the session."""
    with open(path, "w") as fh:
        for rec in trajectory_log_records(trajs, include_features):
            if not include_features:
                rec["feature_ref"] = {"user_seed": rec["user_id"], "step": rec["step"]}
            fh.write(json.dumps(rec) + "\n")


def read_trajectory_log(path, sim: Simulator) -> list[Trajectory]:
    groups: dict[tuple[int, int], list[dict]] = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            groups.setdefault((rec["user_id"], rec["episode_id"]), []).append(rec)
    trajs = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r["step"])
        steps = []
        for r in recs:
            if r.get("state_features") is None:
                raise ConfigurationError("log lacks state features; replay the session instead")
            item = int(r["item_id"])
            steps.append(StepRecord(np.array(r["state_features"]), sim.action_features(item), item,
                                    bool(r["clicked"]), bool(r["purchased"]), bool(r["exited"]),
                                    sim.catalog.embeddings[item], np.array(r["delivered_reward"])))
        trajs.append(Trajectory(steps, np.array(recs[0]["behavior_goal"]), bool(recs[-1]["exited"]),
                                key[0], key[1]))
    return trajs
