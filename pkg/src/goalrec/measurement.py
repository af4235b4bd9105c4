"""Trajectories, measurement vectors and goals.

A measurement summarises a trajectory segment as a fixed-length vector:

====  ==========================================================
idx   component
====  ==========================================================
0     discounted click count, gamma^0 at the segment start
1     discounted purchase count
2     step count (browsing depth)
3     click ratio, clicks / steps
4     exit indicator, 1 if the segment ends with the user leaving
5..   mean embedding of clicked items (zeros when nothing clicked)
====  ==========================================================

A goal is a unit vector in the same space; the return of a segment under a
goal is the plain dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nn import ConfigurationError, UsageError

SCALAR_COMPONENTS = ("clicks", "purchases", "depth", "click_ratio", "exit")
NORM_EPS = 1e-9


@dataclass
class StepRecord:
    state_features: np.ndarray
    action_features: np.ndarray
    item_id: int
    clicked: bool
    purchased: bool
    exited: bool
    item_embedding: np.ndarray
    delivered_reward: np.ndarray = field(default_factory=lambda: np.zeros(2))
    candidates: np.ndarray | None = None


@dataclass
class Trajectory:
    steps: list[StepRecord]
    behavior_goal: np.ndarray
    terminal: bool = True
    user_id: int = 0
    episode_id: int = 0

    def __post_init__(self):
        if not self.steps:
            raise ConfigurationError("a trajectory needs at least one step")
        if any(s.exited for s in self.steps[:-1]):
            raise ConfigurationError("only the last step may be an exit")
        self._cache = None

    def __len__(self):
        return len(self.steps)

    def arrays(self):
        """Per-step click, purchase, exit flags and item embeddings, cached."""
        if self._cache is None:
            self._cache = (
                np.array([s.clicked for s in self.steps], dtype=np.float64),
                np.array([s.purchased for s in self.steps], dtype=np.float64),
                np.array([s.exited for s in self.steps], dtype=np.float64),
                np.stack([s.item_embedding for s in self.steps]).astype(np.float64),
            )
        return self._cache

    @property
    def n_clicks(self) -> int:
        return int(sum(s.clicked for s in self.steps))

    @property
    def n_purchases(self) -> int:
        return int(sum(s.purchased for s in self.steps))


@dataclass(frozen=True)
class MeasurementSpec:
    gamma: float
    d_e: int

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.d_e < 0:
            raise ConfigurationError("embedding dimension must be non-negative")

    @property
    def dim(self) -> int:
        return len(SCALAR_COMPONENTS) + self.d_e

    @property
    def layout(self) -> dict[str, tuple[int, int]]:
        """Component name -> half-open index range."""
        out = {name: (k, k + 1) for k, name in enumerate(SCALAR_COMPONENTS)}
        out["click_embedding"] = (len(SCALAR_COMPONENTS), self.dim)
        return out

    def index(self, name: str) -> int:
        lo, hi = self.layout[name]
        if hi - lo != 1:
            raise ConfigurationError(f"component {name!r} is not a scalar")
        return lo

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "d_e": self.d_e, "dim": self.dim,
                "layout": {k: list(v) for k, v in self.layout.items()}}


def compute_measurement(traj: Trajectory, from_step: int, to_step: int | None,
                        spec: MeasurementSpec) -> np.ndarray:
    """Measurement of ``traj.steps[from_step..=to_step]``; ``None`` means the end."""
    n = len(traj)
    if to_step is None:
        to_step = n - 1
    if not (0 <= from_step <= to_step < n):
        raise UsageError(f"empty or out-of-range segment [{from_step}, {to_step}] of {n} steps")
    clicks, buys, exits, emb = traj.arrays()
    c = clicks[from_step:to_step + 1]
    p = buys[from_step:to_step + 1]
    disc = spec.gamma ** np.arange(c.size)
    m = np.zeros(spec.dim)
    m[0] = disc @ c
    m[1] = disc @ p
    m[2] = c.size
    n_clicks = c.sum()
    m[3] = n_clicks / c.size
    m[4] = exits[to_step]
    if n_clicks > 0 and spec.d_e:
        m[5:] = (c @ emb[from_step:to_step + 1]) / n_clicks
    return m


def suffix_measurements(traj: Trajectory, spec: MeasurementSpec) -> np.ndarray:
    """Measurements of every suffix ``steps[i:]``, shape (len, D).

    Row i is bit-identical to ``compute_measurement(traj, i, None, spec)``.
    """
    return np.stack([compute_measurement(traj, i, None, spec) for i in range(len(traj))])


def return_U(m, g) -> float:
    """Linear return of measurement ``m`` under goal ``g``."""
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if m.shape != g.shape:
        raise ConfigurationError(f"measurement shape {m.shape} != goal shape {g.shape}")
    return float(m @ g)


@dataclass(frozen=True)
class GoalSetting:
    """A unit goal plus the norm of the raw weights it was built from."""

    vector: np.ndarray
    scale: float
    weights: Mapping[str, float]

    def unnormalize(self, value: float) -> float:
        return value * self.scale


def goal_for_reward_setting(weights: Mapping[str, float], spec: MeasurementSpec) -> GoalSetting:
    """Build the unit goal for a named-component weighting.

    ``click_embedding`` may be given as a vector of length ``d_e``.
    """
    raw = np.zeros(spec.dim)
    layout = spec.layout
    for name, w in weights.items():
        if name not in layout:
            raise ConfigurationError(f"unknown measurement component {name!r}")
        lo, hi = layout[name]
        raw[lo:hi] = w
    scale = float(np.linalg.norm(raw))
    if scale == 0.0:
        raise ConfigurationError("a reward setting needs at least one nonzero weight")
    return GoalSetting(raw / scale, scale, dict(weights))


def hindsight_goal(m_achieved) -> np.ndarray | None:
    """Unit vector maximising g . m, i.e. m / |m|; None for a (near) zero m."""
    m = np.asarray(m_achieved, dtype=np.float64)
    norm = math.sqrt(m.dot(m))  # same value np.linalg.norm returns for a vector
    if norm <= NORM_EPS:
        return None
    return m / norm


def random_unit_goal(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def stack_measurements(trajs: Sequence[Trajectory], spec: MeasurementSpec) -> np.ndarray:
    """Whole-trajectory measurements, one row per trajectory."""
    return np.stack([compute_measurement(t, 0, None, spec) for t in trajs])
