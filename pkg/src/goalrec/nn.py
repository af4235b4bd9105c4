"""Dense networks, Adam and the uncertainty-weighted regression loss.

Everything here is float64 numpy. Networks accept a single input vector or a
batch of row vectors; gradients are accumulated over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "sigmoid", "identity")


class ConfigurationError(ValueError):
    """Raised for dimension or configuration mismatches."""


class UsageError(RuntimeError):
    """Raised when an operation is called in an invalid order or state."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, out, kind):
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("layer weight/bias shapes disagree")


@dataclass
class Tape:
    """Activations cached by a training forward pass."""

    inputs: list
    pre: list
    outputs: list
    batched: bool


class DenseNet:
    """A stack of fully connected layers."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ConfigurationError("a network needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ConfigurationError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )
        self.layers = list(layers)

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str] | str,
              rng: np.random.Generator) -> "DenseNet":
        """He-uniform init for relu layers, Xavier-uniform otherwise."""
        if len(sizes) < 2:
            raise ConfigurationError("sizes must list input and output dims")
        n_layers = len(sizes) - 1
        if isinstance(activations, str):
            activations = [activations] * n_layers
        if len(activations) != n_layers:
            raise ConfigurationError("one activation per layer required")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [l.weight.shape[0] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for k in range(len(self.layers)):
            names.extend((f"{prefix}W{k}", f"{prefix}b{k}"))
        return names

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise ConfigurationError(
                f"expected input of width {self.input_dim}, got shape {x.shape}"
            )
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        h = x
        for layer in self.layers:
            h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        return h

    __call__ = forward

    def forward_train(self, x) -> tuple[np.ndarray, Tape]:
        x = self._check_input(x)
        batched = x.ndim == 2
        h = x if batched else x[None, :]
        tape = Tape([], [], [], batched)
        for layer in self.layers:
            tape.inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            h = _activate(z, layer.activation)
            tape.pre.append(z)
            tape.outputs.append(h)
        return (h if batched else h[0]), tape

    def backward(self, upstream, tape: Tape | None) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (parameter gradients in ``params()`` order, input gradient)."""
        if tape is None or len(tape.inputs) != len(self.layers):
            raise UsageError("backward called without cached activations from forward_train")
        g = np.asarray(upstream, dtype=np.float64)
        if not tape.batched:
            g = g[None, :]
        grads: list[np.ndarray] = []
        for layer, x, z, out in zip(reversed(self.layers), reversed(tape.inputs),
                                    reversed(tape.pre), reversed(tape.outputs)):
            gz = g * _activation_grad(z, out, layer.activation)
            grads.append(gz.sum(axis=0))
            grads.append(gz.T @ x)
            g = gz @ layer.weight
        grads.reverse()
        return grads, (g if tape.batched else g[0])

    def describe(self) -> dict:
        return {"sizes": self.sizes, "activations": self.activations}

    def flat(self) -> list[list[float]]:
        return [p.ravel().tolist() for p in self.params()]

    @classmethod
    def from_flat(cls, descriptor: dict, arrays: Sequence[Sequence[float]]) -> "DenseNet":
        sizes, acts = descriptor["sizes"], descriptor["activations"]
        if len(arrays) != 2 * len(acts):
            raise ConfigurationError("parameter array count does not match descriptor")
        layers = []
        for k, act in enumerate(acts):
            w = np.array(arrays[2 * k], dtype=np.float64).reshape(sizes[k + 1], sizes[k])
            b = np.array(arrays[2 * k + 1], dtype=np.float64)
            layers.append(Layer(w, b, act))
        return cls(layers)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_num: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], learning_rate=1e-3, beta1=0.9,
                 beta2=0.999, epsilon_num=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon_num, 0,
                               [np.zeros_like(p) for p in self.params],
                               [np.zeros_like(p) for p in self.params])
        self.rejected = 0

    def step(self, grads: Sequence[np.ndarray]) -> bool:
        """Apply one update. Returns False (and leaves everything untouched)
        when any gradient is non-finite."""
        if len(grads) != len(self.params):
            raise ConfigurationError("gradient list does not match parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ConfigurationError(f"gradient shape {g.shape} != parameter {p.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.rejected += 1
            return False
        s = self.state
        s.step_count += 1
        t = s.step_count
        c1 = 1.0 - s.beta1 ** t
        c2 = 1.0 - s.beta2 ** t
        for p, g, m, v in zip(self.params, grads, s.first_moment, s.second_moment):
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p -= s.learning_rate * (m / c1) / (np.sqrt(v / c2) + s.epsilon_num)
        return True

    def to_dict(self) -> dict:
        s = self.state
        return {"learning_rate": s.learning_rate, "beta1": s.beta1, "beta2": s.beta2,
                "epsilon_num": s.epsilon_num, "step_count": s.step_count,
                "first_moment": [m.ravel().tolist() for m in s.first_moment],
                "second_moment": [v.ravel().tolist() for v in s.second_moment]}

    def load_dict(self, d: dict) -> None:
        s = self.state
        s.learning_rate, s.beta1, s.beta2 = d["learning_rate"], d["beta1"], d["beta2"]
        s.epsilon_num, s.step_count = d["epsilon_num"], d["step_count"]
        s.first_moment = [np.array(a, dtype=np.float64).reshape(p.shape)
                          for a, p in zip(d["first_moment"], self.params)]
        s.second_moment = [np.array(a, dtype=np.float64).reshape(p.shape)
                           for a, p in zip(d["second_moment"], self.params)]


@dataclass
class UncertaintyLossState:
    log_var: np.ndarray

    @classmethod
    def zeros(cls, heads: int) -> "UncertaintyLossState":
        return cls(np.zeros(heads))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(-self.log_var)


def uncertainty_loss(predictions, targets, log_var):
    """Summed squared error per head weighted by exp(-log_var), plus log_var.

    loss = sum_i sum_j exp(-s_j) (p_ij - t_ij)^2 + s_j

    Returns ``(loss, d loss / d predictions, d loss / d log_var)``.
    """
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    log_var = np.asarray(log_var, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.shape[0] < 1 or log_var.shape != (p.shape[1],):
        raise ConfigurationError("need N >= 1 and one log-variance per head")
    n = p.shape[0]
    resid = p - t
    w = np.exp(-log_var)
    sq = resid * resid
    loss = float(np.sum(sq * w) + n * np.sum(log_var))
    d_pred = 2.0 * resid * w
    d_log_var = n - np.sum(sq, axis=0) * w
    return loss, d_pred, d_log_var


@dataclass
class GradCheckReport:
    blocks: dict  # name -> max relative error
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.blocks.values()) if self.blocks else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name:>24s}  {err:.3e}  {'ok' if err <= self.tolerance else 'FAIL'}"
               for name, err in self.blocks.items()]
        out.append(f"{'max':>24s}  {self.max_error:.3e}  {'PASS' if self.passed else 'FAIL'}")
        return out


def gradient_check(loss_and_grads: Callable[[], tuple[float, list[np.ndarray]]],
                   params: Sequence[np.ndarray], names: Sequence[str] | None = None,
                   tolerance: float = 1e-4, h: float = 1e-5,
                   max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads`` evaluates the loss at the current values of ``params``
    (which are perturbed in place) and returns the analytic gradients in the
    same order. The per-block error is ``|a - n|_inf / max(|a|_inf, |n|_inf)``.
    ``max_entries`` limits the number of probed entries per block.
    """
    names = list(names) if names is not None else [f"p{k}" for k in range(len(params))]
    _, analytic = loss_and_grads()
    analytic = [g.copy() for g in analytic]
    blocks = {}
    for name, p, a in zip(names, params, analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for n, k in enumerate(idx):
            old = flat[k]
            flat[k] = old + h
            lp, _ = loss_and_grads()
            flat[k] = old - h
            lm, _ = loss_and_grads()
            flat[k] = old
            num[n] = (lp - lm) / (2.0 * h)
        ana = a.reshape(-1)[idx]
        scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0))
        diff = np.max(np.abs(ana - num), initial=0.0)
        blocks[name] = 0.0 if scale == 0.0 else float(diff / scale)
    return GradCheckReport(blocks, tolerance)


def nudge_off_kinks(net: DenseNet, x: np.ndarray, margin: float = 1e-3,
                    rng: np.random.Generator | None = None, max_tries: int = 100) -> np.ndarray:
    """Perturb ``x`` until no relu pre-activation lies within ``margin`` of zero."""
    rng = rng or np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    for _ in range(max_tries):
        _, tape = net.forward_train(x)
        close = any(np.any(np.abs(z) < margin)
                    for z, l in zip(tape.pre, net.layers) if l.activation == "relu")
        if not close:
            return x
        x = x + rng.normal(scale=10 * margin, size=x.shape)
    return x


def save_checkpoint(path, architecture: dict, nets: dict[str, DenseNet],
                    log_var: np.ndarray | None = None, optimizer: Adam | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    """Write a versioned JSON checkpoint. Floats are written with ``repr``
    precision so a load round-trips bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": architecture,
        "nets": {name: {"descriptor": net.describe(), "params": net.flat()}
                 for name, net in nets.items()},
        "log_var": None if log_var is None else np.asarray(log_var).tolist(),
        "adam": None if optimizer is None else optimizer.to_dict(),
        "seed": seed,
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('format_version')}")
    doc["nets"] = {name: DenseNet.from_flat(d["descriptor"], d["params"])
                   for name, d in doc["nets"].items()}
    if doc["log_var"] is not None:
        doc["log_var"] = np.array(doc["log_var"], dtype=np.float64)
    return doc
