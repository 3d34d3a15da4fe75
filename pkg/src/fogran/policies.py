"""Controllers that share the environment's step contract.

Each policy maps ``(state, t, rng)`` to a full action index. Greedy learned
policies never touch ``rng``; the random policy draws one integer per step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ScenarioConfig
from .env import ControlAction, SystemState, decode_action, encode_action, encode_state, state_index
from .rl import EpsilonSchedule, QNetwork, QTable, forward, greedy, select_action

KINDS = ("drl", "drl_cran_only", "q_learning", "d2d_always", "random")


def d2d_always_action(t: int, num_processors: int, num_ue: int) -> ControlAction:
    """Round-robin sweep: processor t mod N off, UE t mod M to D2D."""
    return ControlAction(t % num_processors, False, t % num_ue, True)


def random_action(rng: np.random.Generator, num_processors: int, num_ue: int) -> ControlAction:
    return decode_action(int(rng.integers(4 * num_processors * num_ue)), num_processors, num_ue)


def cran_only_actions(num_processors: int) -> int:
    return 2 * num_processors


def cran_only_to_action(j: int) -> ControlAction:
    """Restricted index j = 2*processor + target; the UE part is a no-op (UE 0 stays C-RAN)."""
    return ControlAction(int(j) // 2, bool(int(j) % 2), 0, False)


def cran_only_action(net: QNetwork, state_vec, t: int, sched: EpsilonSchedule,
                     rng: np.random.Generator) -> ControlAction:
    return cran_only_to_action(select_action(net, state_vec, t, sched, rng))


@dataclass
class Policy:
    kind: str
    num_processors: int
    num_ue: int
    net: Optional[QNetwork] = None
    table: Optional[QTable] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in ("drl", "drl_cran_only") and self.net is None:
            raise ValueError(f"{self.kind} policy needs a network")
        if self.kind == "q_learning" and self.table is None:
            raise ValueError("q_learning policy needs a table")

    def control(self, state: SystemState, t: int, rng: np.random.Generator) -> ControlAction:
        N, M = self.num_processors, self.num_ue
        if self.kind == "drl":
            return decode_action(greedy(forward(self.net, encode_state(state))), N, M)
        if self.kind == "drl_cran_only":
            return cran_only_to_action(greedy(forward(self.net, encode_state(state))))
        if self.kind == "q_learning":
            return decode_action(self.table.greedy(state_index(state)), N, M)
        if self.kind == "d2d_always":
            return d2d_always_action(t, N, M)
        return random_action(rng, N, M)

    def __call__(self, state: SystemState, t: int, rng: np.random.Generator) -> int:
        return encode_action(self.control(state, t, rng), self.num_ue)

    @property
    def stationary(self) -> bool:
        """True when the action depends on the state only (no step index, no RNG)."""
        return self.kind in ("drl", "drl_cran_only", "q_learning")


def make_policy(kind: str, cfg: ScenarioConfig, net=None, table=None) -> Policy:
    return Policy(kind, cfg.num_processors, cfg.num_ue, net=net, table=table)
