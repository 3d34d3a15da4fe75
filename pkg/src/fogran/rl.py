"""Deep Q-learning pieces written directly in numpy (float64 throughout).

The network is a plain multilayer perceptron with ReLU hidden layers and a
linear output head. Gradients are hand-derived backprop of the mean squared
TD error, restricted to the taken-action output of each sample.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "fogran-qnetwork"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- network

@dataclass
class QNetwork:
    layer_dims: tuple
    weights: list       # weights[i] has shape (layer_dims[i], layer_dims[i+1])
    biases: list

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "QNetwork":
        """Glorot-uniform weights, zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"bad layer dims {dims}")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "QNetwork":
        dims = tuple(int(d) for d in layer_dims)
        return cls(dims, [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                   [np.zeros(b) for b in dims[1:]])

    def copy(self) -> "QNetwork":
        return QNetwork(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def same_as(self, other: "QNetwork") -> bool:
        return self.layer_dims == other.layer_dims and all(
            np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


def _check_input(net: QNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.layer_dims[0] or x.ndim > 2:
        raise ValueError(f"input of shape {x.shape} does not fit layer dims {net.layer_dims}")
    return x


def forward(net: QNetwork, x) -> np.ndarray:
    """Q-values for one state vector (1-D) or a batch of them (2-D)."""
    a = _check_input(net, x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            a = np.maximum(a, 0.0)
    return a


def _forward_trace(net: QNetwork, x: np.ndarray):
    acts = [x]
    pre = []
    last = len(net.weights) - 1
    a = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < last else z
        acts.append(a)
    return acts, pre


def td_loss(net: QNetwork, states, actions, targets) -> float:
    q = forward(net, np.atleast_2d(states))
    idx = np.asarray(actions, dtype=np.int64)
    resid = q[np.arange(len(idx)), idx] - np.asarray(targets, dtype=np.float64)
    return float(np.mean(resid ** 2))


def gradients(net: QNetwork, states, actions, targets):
    """Gradients of mean((Q(s, a) - y)^2) over the batch.

    Returns ``(grads, loss)`` where ``grads`` is laid out like ``net.params()``.
    """
    x = _check_input(net, np.atleast_2d(states))
    idx = np.asarray(actions, dtype=np.int64)
    y = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts, pre = _forward_trace(net, x)
    rows = np.arange(n)
    resid = acts[-1][rows, idx] - y
    # only the taken-action output carries error
    delta = np.zeros_like(acts[-1])
    delta[rows, idx] = 2.0 * resid / n

    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (pre[i - 1] > 0)
    return grads, float(np.mean(resid ** 2))


# --------------------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: list
    v: list
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: QNetwork, learning_rate: float = 1e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], 0, learning_rate, **kw)


def adam_step(net: QNetwork, grads: list, opt: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``net`` and ``opt``."""
    params = net.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match the network")
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# --------------------------------------------------------------------------- replay

@dataclass(frozen=True)
class Transition:
    state_vec: np.ndarray
    action_index: int
    reward: float
    next_state_vec: np.ndarray
    terminal: bool


class ReplayMemory:
    """Fixed-capacity FIFO ring; once full, each push overwrites the oldest record."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: Transition) -> None:
        i = self.cursor
        self.states[i] = tr.state_vec
        self.actions[i] = tr.action_index
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state_vec
        self.terminals[i] = tr.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size > self.size:
            raise ValueError(f"memory holds {self.size} records, batch needs {batch_size}")
        return rng.choice(self.size, size=batch_size, replace=False)

    def batch(self, idx):
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.terminals[idx])

    def records(self) -> list:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                           self.next_states[i].copy(), bool(self.terminals[i])) for i in order]


# --------------------------------------------------------------------------- exploration

@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.01
    anneal_steps: int = 3000

    def __call__(self, t: int) -> float:
        frac = min(max(t, 0), self.anneal_steps) / self.anneal_steps
        return self.start - (self.start - self.end) * frac


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(q))


def select_action(net: QNetwork, state_vec, t: int, sched: EpsilonSchedule,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy choice. One uniform draw per call keeps the RNG stream aligned."""
    n = net.layer_dims[-1]
    if rng.random() < sched(t):
        return int(rng.integers(n))
    return greedy(forward(net, state_vec))


def td_targets(rewards, next_states, terminals, target_net: QNetwork, gamma: float,
               actions=None) -> np.ndarray:
    """r + gamma * max_a' Q_target(s', a'), or just r on terminal samples.

    Passing ``actions`` bootstraps on the taken action instead of the max.
    """
    r = np.asarray(rewards, dtype=np.float64)
    q_next = forward(target_net, np.atleast_2d(next_states))
    if actions is None:
        boot = q_next.max(axis=1)
    else:
        boot = q_next[np.arange(len(r)), np.asarray(actions, dtype=np.int64)]
    return np.where(np.asarray(terminals, dtype=bool), r, r + gamma * boot)


# --------------------------------------------------------------------------- agent

@dataclass
class DQNAgent:
    net: QNetwork
    target: QNetwork
    opt: AdamState
    gamma: float = 0.99
    batch_size: int = 32
    train_every: int = 3
    target_sync_every: int = 480
    target_uses_taken_action: bool = False
    updates: int = 0
    syncs: int = 0

    @classmethod
    def create(cls, layer_dims, rng, learning_rate=1e-4, **kw) -> "DQNAgent":
        net = QNetwork.initialize(layer_dims, rng)
        return cls(net, net.copy(), AdamState.for_network(net, learning_rate), **kw)

    @classmethod
    def from_network(cls, net: QNetwork, learning_rate=1e-4, **kw) -> "DQNAgent":
        """Fresh optimiser, target synced to ``net`` (used for transfer)."""
        net = net.copy()
        return cls(net, net.copy(), AdamState.for_network(net, learning_rate), **kw)

    def train_step(self, memory: ReplayMemory, rng: np.random.Generator) -> float:
        """One minibatch update; returns the MSE of the batch before the update."""
        idx = memory.sample_indices(self.batch_size, rng)
        s, a, r, s2, term = memory.batch(idx)
        y = td_targets(r, s2, term, self.target, self.gamma,
                       actions=a if self.target_uses_taken_action else None)
        grads, loss = gradients(self.net, s, a, y)
        adam_step(self.net, grads, self.opt)
        self.updates += 1
        return loss

    def sync_target(self) -> None:
        self.target = self.net.copy()
        self.syncs += 1

    def after_step(self, global_step: int, memory: ReplayMemory,
                   rng: np.random.Generator) -> Optional[float]:
        """Apply the step-counted training and target-sync cadences."""
        loss = None
        if (global_step + 1) % self.train_every == 0:
            loss = self.train_step(memory, rng)
        if (global_step + 1) % self.target_sync_every == 0:
            self.sync_target()
        return loss


# --------------------------------------------------------------------------- tabular

@dataclass
class QTable:
    num_actions: int
    learning_rate: float = 0.1
    gamma: float = 0.99
    table: dict = field(default_factory=dict)

    def values(self, key) -> np.ndarray:
        row = self.table.get(key)
        return np.zeros(self.num_actions) if row is None else row

    def get(self, key, action: int) -> float:
        return float(self.values(key)[action])

    def greedy(self, key) -> int:
        return greedy(self.values(key))


def q_learning_update(table: QTable, s, a: int, r: float, s_next, terminal: bool = False) -> float:
    """Q(s,a) <- (1-lr) Q(s,a) + lr (r + gamma max_a' Q(s',a')). Returns the new value."""
    row = table.table.get(s)
    if row is None:
        row = table.table[s] = np.zeros(table.num_actions)
    boot = 0.0 if terminal else float(np.max(table.values(s_next)))
    row[a] = (1.0 - table.learning_rate) * row[a] + table.learning_rate * (r + table.gamma * boot)
    return float(row[a])


def select_action_tabular(table: QTable, key, t: int, sched: EpsilonSchedule,
                          rng: np.random.Generator) -> int:
    if rng.random() < sched(t):
        return int(rng.integers(table.num_actions))
    return table.greedy(key)


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    net: QNetwork
    adam: Optional[AdamState] = None
    fingerprint: Optional[str] = None


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(path, net: QNetwork, opt: Optional[AdamState] = None,
                 fingerprint: Optional[str] = None) -> None:
    """JSON checkpoint; floats are written with repr so they round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(net.layer_dims),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "fingerprint": fingerprint,
    }
    if opt is not None:
        doc["adam"] = {
            "step_count": opt.step_count, "learning_rate": opt.learning_rate,
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "m": [x.tolist() for x in opt.m], "v": [x.tolist() for x in opt.v],
        }
    _atomic_write(path, json.dumps(doc, allow_nan=False) + "\n")


def _array(data, shape, what: str) -> np.ndarray:
    try:
        arr = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{what}: not numeric") from exc
    if arr.shape != tuple(shape):
        raise CheckpointError(f"{what}: shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise CheckpointError(f"{what}: non-finite values")
    return arr


def load_weights(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a Q-network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        dims = tuple(int(d) for d in doc["layer_dims"])
        shapes = list(zip(dims[:-1], dims[1:]))
        if len(doc["weights"]) != len(shapes) or len(doc["biases"]) != len(shapes):
            raise CheckpointError(f"{path}: layer count does not match layer_dims")
        weights = [_array(w, s, f"weights[{i}]") for i, (w, s) in enumerate(zip(doc["weights"], shapes))]
        biases = [_array(b, (s[1],), f"biases[{i}]") for i, (b, s) in enumerate(zip(doc["biases"], shapes))]
        net = QNetwork(dims, weights, biases)
        adam = None
        if doc.get("adam") is not None:
            a = doc["adam"]
            pshapes = [p.shape for p in net.params()]
            adam = AdamState(
                m=[_array(x, s, "adam.m") for x, s in zip(a["m"], pshapes)],
                v=[_array(x, s, "adam.v") for x, s in zip(a["v"], pshapes)],
                step_count=int(a["step_count"]), learning_rate=float(a["learning_rate"]),
                beta1=float(a["beta1"]), beta2=float(a["beta2"]), eps=float(a["eps"]))
            if len(adam.m) != len(pshapes) or len(adam.v) != len(pshapes):
                raise CheckpointError(f"{path}: optimiser state does not match the network")
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing or malformed field ({exc})") from exc
    return Checkpoint(net, adam, doc.get("fingerprint"))
