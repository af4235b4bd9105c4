"""Comparison policies: a myopic click scorer and a double DQN on scalar reward.

Both see exactly the features GoalRec sees: the simulator's state features
concatenated with the candidate item's action features.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .env import Simulator
from .measurement import Trajectory
from .nn import Adam, DenseNet, sigmoid

log = logging.getLogger(__name__)


def greedy_pick(candidate_ids: np.ndarray, scores: np.ndarray) -> int:
    """Argmax with ties broken toward the smallest item id."""
    candidate_ids = np.asarray(candidate_ids)
    return int(candidate_ids[scores == scores.max()].min())


def pair_inputs(state_features, action_matrix) -> np.ndarray:
    a = np.atleast_2d(action_matrix)
    return np.hstack([np.repeat(np.asarray(state_features)[None, :], a.shape[0], 0), a])


@dataclass
class MyopicConfig:
    hidden: tuple = (64, 32)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class MyopicScorer:
    """Click-probability model; the network emits a logit and the scorer
    squashes it, so outputs lie in (0, 1)."""

    def __init__(self, net: DenseNet):
        self.net = net

    @classmethod
    def build(cls, input_dim: int, cfg: MyopicConfig) -> "MyopicScorer":
        rng = np.random.default_rng(cfg.seed)
        sizes = [input_dim, *cfg.hidden, 1]
        return cls(DenseNet.build(sizes, ["relu"] * len(cfg.hidden) + ["identity"], rng))

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.net(np.atleast_2d(x))[:, 0])

    def score(self, state_features, action_matrix) -> np.ndarray:
        return self.predict_proba(pair_inputs(state_features, action_matrix))

    def loss_and_grads(self, x, y) -> tuple[float, list[np.ndarray]]:
        """Summed binary cross-entropy and its parameter gradients."""
        z, tape = self.net.forward_train(np.atleast_2d(x))
        z = z[:, 0]
        loss = float(np.sum(np.logaddexp(0.0, z) - y * z))
        grads, _ = self.net.backward((sigmoid(z) - y)[:, None], tape)
        return loss, grads


def click_dataset(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.concatenate([s.state_features, s.action_features])
                  for t in trajs for s in t.steps])
    y = np.array([float(s.clicked) for t in trajs for s in t.steps])
    return x, y


def myopic_train(x: np.ndarray, y: np.ndarray, cfg: MyopicConfig | None = None) -> MyopicScorer:
    cfg = cfg or MyopicConfig()
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        warnings.warn("click labels contain a single class", RuntimeWarning, stacklevel=2)
    scorer = MyopicScorer.build(x.shape[1], cfg)
    opt = Adam(scorer.net.params(), learning_rate=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            _, grads = scorer.loss_and_grads(x[idx], y[idx])
            opt.step([g / idx.size for g in grads])
    return scorer


@dataclass
class DqnConfig:
    hidden: tuple = (64, 64)
    gamma: float = 0.9
    learning_rate: float = 1e-3
    batch_size: int = 64
    replay_capacity: int = 50_000
    train_every: int = 4
    grad_steps: int = 1
    sync_period: int = 100
    loops: int = 200
    episodes_per_loop: int = 5
    decay_steps: int | None = None
    expected_episode_length: int = 10
    trajectories_per_user: int = 30
    reward_weights: tuple = (1.0, 0.0)  # (clicks, purchases)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"], d["reward_weights"] = list(self.hidden), list(self.reward_weights)
        return d

    def epsilon(self, t: int) -> float:
        total = self.decay_steps or max(
            1, int(0.8 * self.loops * self.episodes_per_loop * self.expected_episode_length))
        return max(0.0, 1.0 - t / total)


class DqnAgent:
    def __init__(self, input_dim: int, cfg: DqnConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        sizes = [input_dim, *cfg.hidden, 1]
        self.q_net = DenseNet.build(sizes, ["relu"] * len(cfg.hidden) + ["identity"], rng)
        self.target_net = self.q_net.copy()
        self.optimizer = Adam(self.q_net.params(), learning_rate=cfg.learning_rate)
        self.replay: deque = deque(maxlen=cfg.replay_capacity)
        self.updates = 0

    def q_values(self, state_features, action_matrix, net: DenseNet | None = None) -> np.ndarray:
        return (net or self.q_net)(pair_inputs(state_features, action_matrix))[:, 0]

    def sync(self) -> None:
        for dst, src in zip(self.target_net.params(), self.q_net.params()):
            dst[...] = src

    def td_targets(self, batch, action_matrix: np.ndarray) -> np.ndarray:
        """Double-DQN targets: online net picks a', target net evaluates it."""
        gamma = self.cfg.gamma
        y = np.array([b[2] for b in batch], dtype=np.float64)
        if gamma == 0.0:
            return y
        for j, (_, _, r, s2, done, cands2) in enumerate(batch):
            if done or cands2 is None:
                continue
            a2 = action_matrix[cands2]
            best = int(np.argmax(self.q_values(s2, a2)))
            y[j] = r + gamma * self.q_values(s2, a2[best:best + 1], self.target_net)[0]
        return y

    def loss_and_grads(self, x, y) -> tuple[float, list[np.ndarray]]:
        q, tape = self.q_net.forward_train(x)
        resid = q[:, 0] - y
        grads, _ = self.q_net.backward(resid[:, None], tape)
        return 0.5 * float(resid @ resid), grads

    def update(self, rng: np.random.Generator, action_matrix: np.ndarray) -> float | None:
        if len(self.replay) < self.cfg.batch_size:
            return None
        idx = rng.integers(len(self.replay), size=self.cfg.batch_size)
        batch = [self.replay[i] for i in idx]
        y = self.td_targets(batch, action_matrix)
        x = np.stack([np.concatenate([b[0], b[1]]) for b in batch])
        loss, grads = self.loss_and_grads(x, y)
        self.optimizer.step([g / len(batch) for g in grads])
        self.updates += 1
        if self.updates % self.cfg.sync_period == 0:
            self.sync()
        return loss / len(batch)


def dqn_train(sim: Simulator, cfg: DqnConfig, user_seeds: Sequence[int],
              agent: DqnAgent | None = None) -> tuple[DqnAgent, list[dict]]:
    """Epsilon-greedy (over items) online training on delivered scalar reward."""
    from .agent import UserPool

    agent = agent or DqnAgent(sim.state_dim + sim.action_dim, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    w = np.asarray(cfg.reward_weights, dtype=np.float64)
    pool = UserPool(user_seeds, cfg.trajectories_per_user)
    A = sim.action_matrix
    t = 0
    metrics = []
    episodes = 0
    for loop in range(cfg.loops):
        rewards, clicks, depth, losses = [], 0, 0, []
        eps = cfg.epsilon(t)
        for _ in range(cfg.episodes_per_loop):
            nxt = pool.take()
            if nxt is None:
                break
            user, k = nxt
            state, s = sim.reset(user, k)
            cands = sim.candidates(state)
            ep_reward = 0.0
            while not state.terminated:
                if rng.random() < cfg.epsilon(t):
                    item = int(cands[rng.integers(len(cands))])
                else:
                    item = greedy_pick(cands, agent.q_values(s, A[cands]))
                out, state = sim.step(state, item)
                r = float(w @ out.delivered_reward)
                ep_reward += float(w @ out.generated_reward)
                clicks += out.clicked
                depth += 1
                next_cands = None if out.exited else sim.candidates(state)
                agent.replay.append((s, A[item], r, out.next_state_features, out.exited,
                                     next_cands))
                s, cands = out.next_state_features, next_cands
                t += 1
                if t % cfg.train_every == 0:
                    for _ in range(cfg.grad_steps):
                        loss = agent.update(rng, A)
                        if loss is not None:
                            losses.append(loss)
            rewards.append(ep_reward)
            episodes += 1
        if not rewards:
            break
        metrics.append({"loop": loop, "episodes": episodes, "epsilon": eps,
                        "mean_reward": float(np.mean(rewards)), "ctr": clicks / depth,
                        "depth": depth / len(rewards),
                        "main_loss": float(np.mean(losses)) if losses else float("nan"),
                        "aux_loss": float("nan")})
    return agent, metrics


class ScorePolicy:
    """Greedy rollout callback over any ``score(state, action_matrix)``."""

    def __init__(self, score_fn, action_matrix: np.ndarray):
        self.score_fn = score_fn
        self.action_matrix = action_matrix

    def __call__(self, state_features, candidates, goal) -> int:
        return greedy_pick(candidates, self.score_fn(state_features, self.action_matrix[candidates]))


def policy_of(baseline, action_matrix: np.ndarray) -> ScorePolicy:
    if isinstance(baseline, MyopicScorer):
        return ScorePolicy(baseline.score, action_matrix)
    if isinstance(baseline, DqnAgent):
        return ScorePolicy(baseline.q_values, action_matrix)
    raise TypeError(f"no policy for {type(baseline).__name__}")


def save_baseline(path, baseline, seed: int | None = None) -> None:
    if isinstance(baseline, MyopicScorer):
        nn.save_checkpoint(path, {"kind": "myopic"}, {"net": baseline.net}, seed=seed)
    else:
        nn.save_checkpoint(path, {"kind": "dqn", "config": baseline.cfg.to_dict()},
                           {"q_net": baseline.q_net, "target_net": baseline.target_net},
                           optimizer=baseline.optimizer, seed=seed)
