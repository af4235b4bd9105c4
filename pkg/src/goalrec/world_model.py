"""Goal-conditioned measurement predictor with a value/advantage split.

Three towers embed the state, the candidate item and the goal. A value head
sees (state, goal) and an advantage head sees (state, goal, item); their
outputs are summed into the predicted future measurement, and the score of
an item is the goal's dot product with that prediction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import Adam, ConfigurationError, DenseNet, UncertaintyLossState, UsageError

NET_NAMES = ("state_tower", "action_tower", "goal_tower", "value_head", "advantage_head")


@dataclass
class WorldModelConfig:
    hidden: int = 32
    state_layers: tuple = (64, 64)
    action_layers: tuple = (32, 32)
    goal_layers: tuple = (32,)
    head_layers: tuple = (64,)
    tower_output: str = "relu"
    lambda_aux: float = 0.5
    learning_rate: float = 1e-3
    log_var_learning_rate: float = 1e-2
    # A component that is constant in the data (exit, on whole-suffix targets)
    # has zero residual, so its log-variance would run off to -inf and swamp
    # the loss; the floor keeps its weight bounded.
    log_var_min: float | None = -2.0

    def __post_init__(self):
        for name in ("state_layers", "action_layers", "goal_layers", "head_layers"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.hidden < 1 or self.lambda_aux < 0:
            raise ConfigurationError("hidden must be positive and lambda_aux non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    goals: np.ndarray
    targets: np.ndarray
    hindsight: np.ndarray = field(default=None)

    def __len__(self):
        return self.states.shape[0]


def unit_rows(goals: np.ndarray) -> np.ndarray:
    """Goals condition the model by direction only; zero rows pass through."""
    norm = np.linalg.norm(goals, axis=-1, keepdims=True)
    return np.divide(goals, norm, out=np.zeros_like(goals), where=norm > 0)


def _tower(sizes, rng, output="relu"):
    return DenseNet.build(sizes, ["relu"] * (len(sizes) - 2) + [output], rng)


def _head(sizes, rng):
    return DenseNet.build(sizes, ["relu"] * (len(sizes) - 2) + ["identity"], rng)


class WorldModel:
    def __init__(self, state_dim: int, action_dim: int, measurement_dim: int,
                 config: WorldModelConfig | None = None, seed: int = 0,
                 nets: dict | None = None):
        self.config = config or WorldModelConfig()
        self.state_dim, self.action_dim, self.dim = state_dim, action_dim, measurement_dim
        self.seed = seed
        c, h = self.config, self.config.hidden
        if nets is None:
            rng = np.random.default_rng(seed)
            nets = {
                "state_tower": _tower([state_dim, *c.state_layers, h], rng, c.tower_output),
                "action_tower": _tower([action_dim, *c.action_layers, h], rng, c.tower_output),
                "goal_tower": _tower([measurement_dim, *c.goal_layers, h], rng, c.tower_output),
                "value_head": _head([2 * h, *c.head_layers, measurement_dim], rng),
                "advantage_head": _head([3 * h, *c.head_layers, measurement_dim], rng),
            }
        self.nets = nets
        self._check_dims()
        self.loss_state = UncertaintyLossState.zeros(measurement_dim)
        # fixed affine output map: prediction = shift + scale * raw head sum
        self.target_shift = np.zeros(measurement_dim)
        self.target_scale = np.ones(measurement_dim)
        self.normalized = False
        self._build_optimizers()

    def _check_dims(self):
        n, h = self.nets, self.config.hidden
        if n["state_tower"].input_dim != self.state_dim or \
                n["action_tower"].input_dim != self.action_dim or \
                n["goal_tower"].input_dim != self.dim:
            raise ConfigurationError("tower input dims do not match the feature dims")
        if any(n[k].output_dim != h for k in NET_NAMES[:3]):
            raise ConfigurationError("towers must share the hidden width")
        if n["value_head"].input_dim != 2 * h or n["advantage_head"].input_dim != 3 * h:
            raise ConfigurationError("head input widths must be 2h and 3h")
        if n["value_head"].output_dim != self.dim or n["advantage_head"].output_dim != self.dim:
            raise ConfigurationError("both heads must output the measurement dimension")

    def _build_optimizers(self):
        c = self.config
        self.optimizer = Adam(self.net_params(), learning_rate=c.learning_rate)
        self.log_var_optimizer = Adam([self.loss_state.log_var],
                                      learning_rate=c.log_var_learning_rate)

    @property
    def log_var(self) -> np.ndarray:
        return self.loss_state.log_var

    def net_params(self) -> list[np.ndarray]:
        out = []
        for name in NET_NAMES:
            out.extend(self.nets[name].params())
        return out

    def params(self) -> list[np.ndarray]:
        return self.net_params() + [self.loss_state.log_var]

    def param_names(self) -> list[str]:
        out = []
        for name in NET_NAMES:
            out.extend(self.nets[name].param_names(f"{name}."))
        return out + ["log_var"]

    def fit_target_normalization(self, targets: np.ndarray) -> None:
        """Set the output affine map from target statistics (before training)."""
        targets = np.atleast_2d(targets)
        self.target_shift = targets.mean(axis=0)
        sd = targets.std(axis=0)
        self.target_scale = np.where(sd > 1e-6, sd, 1.0)
        self.normalized = True

    def copy(self) -> "WorldModel":
        wm = WorldModel(self.state_dim, self.action_dim, self.dim, self.config, self.seed,
                        nets={k: v.copy() for k, v in self.nets.items()})
        wm.loss_state.log_var[:] = self.loss_state.log_var
        wm.target_shift = self.target_shift.copy()
        wm.target_scale = self.target_scale.copy()
        wm.normalized = self.normalized
        return wm

    # -- inference ---------------------------------------------------------

    def _check(self, s, a, g):
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim \
                or g.shape[-1] != self.dim:
            raise ConfigurationError(
                f"expected widths ({self.state_dim}, {self.action_dim}, {self.dim}), got "
                f"({s.shape[-1]}, {a.shape[-1]}, {g.shape[-1]})")

    def heads(self, states, actions, goals) -> tuple[np.ndarray, np.ndarray]:
        """Value and advantage outputs in measurement units, row-aligned."""
        s, a, g = (np.atleast_2d(np.asarray(x, dtype=np.float64))
                   for x in (states, actions, goals))
        self._check(s, a, g)
        n = self.nets
        hs, ha, hg = n["state_tower"](s), n["action_tower"](a), n["goal_tower"](unit_rows(g))
        v = n["value_head"](np.hstack([hs, hg]))
        adv = n["advantage_head"](np.hstack([hs, hg, ha]))
        return self.target_shift + self.target_scale * v, self.target_scale * adv

    def predict(self, states, actions, goals) -> np.ndarray:
        v, adv = self.heads(states, actions, goals)
        return v + adv

    def predict_measurement(self, state_features, action_features, goal) -> np.ndarray:
        return self.predict(state_features, action_features, goal)[0]

    def score_action(self, state_features, action_features, goal) -> float:
        goal = np.asarray(goal, dtype=np.float64)
        return float(goal @ self.predict_measurement(state_features, action_features, goal))

    def predict_candidates(self, state_features, action_matrix, goal) -> np.ndarray:
        """Predicted measurements for one state and goal over many items, (K, D)."""
        s = np.asarray(state_features, dtype=np.float64)[None, :]
        g = np.asarray(goal, dtype=np.float64)[None, :]
        a = np.atleast_2d(np.asarray(action_matrix, dtype=np.float64))
        self._check(s, a, g)
        n = self.nets
        hs, hg = n["state_tower"](s), n["goal_tower"](unit_rows(g))
        ha = n["action_tower"](a)
        v = n["value_head"](np.hstack([hs, hg]))
        k = a.shape[0]
        adv = n["advantage_head"](np.hstack([np.repeat(hs, k, 0), np.repeat(hg, k, 0), ha]))
        return self.target_shift + self.target_scale * (v + adv)

    def score_candidates(self, state_features, action_matrix, goal) -> np.ndarray:
        return self.predict_candidates(state_features, action_matrix, goal) @ np.asarray(goal)

    def select_action(self, state_features, candidate_ids, action_matrix, goal) -> int:
        """Highest-scoring candidate; ties go to the smallest item id."""
        candidate_ids = np.asarray(candidate_ids)
        if candidate_ids.size == 0:
            raise UsageError("select_action needs at least one candidate")
        q = self.score_candidates(state_features, action_matrix, goal)
        best = q == q.max()
        return int(candidate_ids[best].min())

    # -- training ----------------------------------------------------------

    def loss_and_grads(self, batch: Batch) -> tuple[float, float, list[np.ndarray]]:
        """Main and auxiliary losses (summed over the batch) and gradients of
        ``main + lambda_aux * aux`` in ``params()`` order."""
        n, h, lam = self.nets, self.config.hidden, self.config.lambda_aux
        hs, ts = n["state_tower"].forward_train(batch.states)
        ha, ta = n["action_tower"].forward_train(batch.actions)
        hg, tg = n["goal_tower"].forward_train(unit_rows(batch.goals))
        v_raw, tv = n["value_head"].forward_train(np.hstack([hs, hg]))
        a_raw, tadv = n["advantage_head"].forward_train(np.hstack([hs, hg, ha]))
        scale = self.target_scale
        v = self.target_shift + scale * v_raw
        pred = v + scale * a_raw
        lv = self.loss_state.log_var
        main, d_pred, d_lv_main = nn.uncertainty_loss(pred, batch.targets, lv)
        aux, d_v_aux, d_lv_aux = nn.uncertainty_loss(v, batch.targets, lv)
        d_v_raw = (d_pred + lam * d_v_aux) * scale
        d_a_raw = d_pred * scale
        g_v, d_vin = n["value_head"].backward(d_v_raw, tv)
        g_a, d_ain = n["advantage_head"].backward(d_a_raw, tadv)
        g_s, _ = n["state_tower"].backward(d_vin[:, :h] + d_ain[:, :h], ts)
        g_g, _ = n["goal_tower"].backward(d_vin[:, h:] + d_ain[:, h:2 * h], tg)
        g_act, _ = n["action_tower"].backward(d_ain[:, 2 * h:], ta)
        grads = g_s + g_act + g_g + g_v + g_a + [d_lv_main + lam * d_lv_aux]
        return main, aux, grads

    def train_batch(self, batch: Batch) -> tuple[float, float, bool]:
        """One Adam step on ``main + lambda_aux * aux``.

        Returns per-sample ``(main, aux, applied)``; ``applied`` is False when
        the loss or a gradient was non-finite and the step was skipped.
        """
        if len(batch) == 0:
            raise UsageError("empty training batch")
        if batch.targets.shape[1] != self.dim:
            raise ConfigurationError("target width differs from measurement dimension")
        main, aux, grads = self.loss_and_grads(batch)
        nb = len(batch)
        if not (np.isfinite(main) and np.isfinite(aux)):
            return main / nb, aux / nb, False
        if not all(np.all(np.isfinite(g)) for g in grads):
            return main / nb, aux / nb, False
        self.optimizer.step(grads[:-1])
        self.log_var_optimizer.step(grads[-1:])
        if self.config.log_var_min is not None:
            np.maximum(self.log_var, self.config.log_var_min, out=self.log_var)
        return main / nb, aux / nb, True

    def mean_advantage(self, states, actions, goals) -> np.ndarray:
        """Per-component mean of the advantage head, a monitored statistic."""
        _, adv = self.heads(states, actions, goals)
        return adv.mean(axis=0)

    # -- persistence -------------------------------------------------------

    def architecture(self) -> dict:
        return {"kind": "goalrec_world_model", "state_dim": self.state_dim,
                "action_dim": self.action_dim, "measurement_dim": self.dim,
                "config": self.config.to_dict(),
                "target_shift": self.target_shift.tolist(),
                "target_scale": self.target_scale.tolist(),
                "normalized": self.normalized}

    def save(self, path, include_optimizer: bool = True) -> None:
        nn.save_checkpoint(path, self.architecture(), self.nets, self.log_var,
                           self.optimizer if include_optimizer else None, self.seed)

    @classmethod
    def load(cls, path) -> "WorldModel":
        doc = nn.load_checkpoint(path)
        arch = doc["architecture"]
        if arch.get("kind") != "goalrec_world_model":
            raise ConfigurationError("checkpoint is not a world model")
        wm = cls(arch["state_dim"], arch["action_dim"], arch["measurement_dim"],
                 WorldModelConfig(**arch["config"]), doc["seed"] or 0, nets=doc["nets"])
        wm.loss_state.log_var[:] = doc["log_var"]
        wm.target_shift = np.array(arch["target_shift"])
        wm.target_scale = np.array(arch["target_scale"])
        wm.normalized = arch.get("normalized", False)
        if doc["adam"] is not None:
            wm.optimizer.load_dict(doc["adam"])
        return wm
