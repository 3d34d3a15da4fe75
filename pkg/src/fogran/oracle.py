"""Exact reference computations for small instances.

The tabular model is assembled from the primitive pieces (action effect,
cache outcome enumeration, precoder, QoS check, protection, energy) rather
than by calling the environment's step, so that the two can be compared.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import (SystemState, apply_action, check_qos, decode_action, protecting_operation,
                  state_from_index, state_index, system_energy)

DEFAULT_STATE_CAP = 4096


@dataclass
class TabularMdp:
    P: np.ndarray                   # (S, A, S) transition probabilities
    R: np.ndarray                   # (S, A) expected one-step reward
    states: Optional[list] = None   # index -> SystemState, MSB-first binary order
    # (state_idx, action, cache tuple) -> (next_state_idx, reward)
    outcomes: dict = field(default_factory=dict)

    @property
    def num_states(self) -> int:
        return self.P.shape[0]

    @property
    def num_actions(self) -> int:
        return self.P.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError(f"P has shape {self.P.shape}, R has shape {self.R.shape}")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=atol, rtol=0):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")


@dataclass
class ValueFunction:
    V: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float
    residuals: list


def cache_outcomes(rho):
    """Every cache vector with its probability under independent Bernoulli(rho_m)."""
    rho = np.asarray(rho, dtype=float)
    out = []
    for bits in itertools.product((False, True), repeat=len(rho)):
        b = np.array(bits)
        p = float(np.prod(np.where(b, rho, 1.0 - rho)))
        out.append((tuple(bits), p))
    return out


def _settle(state: SystemState, ch, cfg, precoder):
    """Reward and next state for a post-transition state (precode, protect, account)."""
    sol = precoder.optimize(state)
    bad = check_qos(state, sol, ch, cfg)
    if bad:
        state = protecting_operation(state, bad)
        sol = precoder.optimize(state)
    if state.cran and not sol.feasible:
        return state, -cfg.penalty_w
    return state, -system_energy(state, sol, cfg, bool(bad)).total_w


def build_tabular_mdp(cfg, ch, precoder, state_cap: int = DEFAULT_STATE_CAP) -> TabularMdp:
    N, M = cfg.num_processors, cfg.num_ue
    S = 2 ** (N + 2 * M)
    if S > state_cap:
        raise ValueError(f"{S} states exceed the cap of {state_cap}")
    A = cfg.num_actions
    states = [state_from_index(i, N, M) for i in range(S)]
    caches = cache_outcomes(cfg.rho)
    actions = [decode_action(a, N, M) for a in range(A)]
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    settled = {}
    outcomes = {}
    for si, s in enumerate(states):
        for a, act in enumerate(actions):
            moved = apply_action(s, act)
            for cache, p in caches:
                post = SystemState(moved.processor_on, moved.ue_mode, cache)
                if post not in settled:
                    settled[post] = _settle(post, ch, cfg, precoder)
                nxt, r = settled[post]
                ni = state_index(nxt)
                outcomes[(si, a, cache)] = (ni, r)
                P[si, a, ni] += p
                R[si, a] += p * r
    mdp = TabularMdp(P, R, states, outcomes)
    mdp.validate()
    return mdp


def value_iteration(mdp: TabularMdp, gamma: float, tol: float = 1e-8,
                    max_iters: int = 1_000_000) -> ValueFunction:
    """Bellman optimality backups until the sup-norm change is at most ``tol``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    V = np.zeros(mdp.num_states)
    residuals = []
    for it in range(1, max_iters + 1):
        Q = mdp.R + gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        res = float(np.max(np.abs(V_new - V)))
        residuals.append(res)
        V = V_new
        if res <= tol:
            break
    Q = mdp.R + gamma * mdp.P @ V
    # argmax picks the lowest index among ties
    return ValueFunction(V, np.argmax(Q, axis=1), it, residuals[-1], residuals)


def policy_value(mdp: TabularMdp, policy, gamma: float) -> np.ndarray:
    """Exact discounted value of a stationary deterministic policy (linear solve)."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    pi = np.asarray(policy, dtype=np.int64)
    rows = np.arange(mdp.num_states)
    P_pi = mdp.P[rows, pi]
    r_pi = mdp.R[rows, pi]
    return np.linalg.solve(np.eye(mdp.num_states) - gamma * P_pi, r_pi)


def finite_horizon_value(mdp: TabularMdp, policy, gamma: float, horizon: int) -> np.ndarray:
    """Expected sum_{t<horizon} gamma^t r_t under a stationary policy."""
    pi = np.asarray(policy, dtype=np.int64)
    rows = np.arange(mdp.num_states)
    P_pi = mdp.P[rows, pi]
    r_pi = mdp.R[rows, pi]
    V = np.zeros(mdp.num_states)
    for _ in range(horizon):
        V = r_pi + gamma * P_pi @ V
    return V


def single_link_optimum(g: float, sinr_target: float, noise_power: float) -> float:
    """Minimum transmit power for one interference-free link: gamma * sigma^2 / g."""
    if not g > 0:
        raise ValueError(f"channel gain must be positive, got {g}")
    return sinr_target * noise_power / g


def dump_value_csv(vf: ValueFunction, mdp: TabularMdp, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_index", "processor_on", "ue_mode", "cache", "value", "greedy_action"])
        for i in range(mdp.num_states):
            s = mdp.states[i] if mdp.states else None
            bits = ("", "", "") if s is None else (
                "".join("1" if b else "0" for b in s.processor_on),
                "".join("1" if b else "0" for b in s.ue_mode),
                "".join("1" if b else "0" for b in s.cache))
            w.writerow([i, *bits, repr(float(vf.V[i])), int(vf.policy[i])])
