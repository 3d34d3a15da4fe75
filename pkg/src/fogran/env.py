"""F-RAN environment: geometry, channels, rates, energy, cache dynamics and the step rule."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ScenarioConfig
from .precoder import Precoder, PrecodingSolution, cran_sinr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topology:
    rrh_positions: np.ndarray     # (K, 2) meters
    ue_positions: np.ndarray      # (M, 2)
    d2d_tx_positions: np.ndarray  # (M, 2), transmitter paired with each UE


@dataclass(frozen=True)
class ChannelSet:
    h: np.ndarray        # (M, K, L) complex, antenna l of RRH k -> UE m
    g_d2d: np.ndarray    # (M,) power gain of each UE's own D2D link
    g_cross: np.ndarray  # (M, M) power gain from UE m''s transmitter to UE m; diagonal = g_d2d


@dataclass(frozen=True)
class SystemState:
    processor_on: tuple
    ue_mode: tuple       # True = D2D
    cache: tuple

    @property
    def cran(self) -> tuple:
        return tuple(m for m, d2d in enumerate(self.ue_mode) if not d2d)

    @property
    def d2d(self) -> tuple:
        return tuple(m for m, d2d in enumerate(self.ue_mode) if d2d)


@dataclass(frozen=True)
class ControlAction:
    processor_index: int
    processor_target: bool
    ue_index: int
    ue_target_mode: bool


@dataclass(frozen=True)
class EnergyBreakdown:
    processor_w: float
    fronthaul_w: float
    wireless_w: float
    total_w: float
    protecting_triggered: bool = False
    penalized: bool = False


def initial_state(cfg: ScenarioConfig) -> SystemState:
    """All processors on, every UE in C-RAN mode, every cache False."""
    return SystemState((True,) * cfg.num_processors, (False,) * cfg.num_ue, (False,) * cfg.num_ue)


# ---------------------------------------------------------------- geometry

def _point_in_disk(rng, radius: float) -> np.ndarray:
    if radius == 0:
        return np.zeros(2)
    while True:
        p = rng.uniform(-radius, radius, size=2)
        if p @ p <= radius * radius:
            return p


def rrh_layout(num_rrh: int, spacing: float) -> np.ndarray:
    """Regular polygon centred on the origin with side ``spacing``.

    For up to three RRHs every pair sits exactly ``spacing`` apart.
    """
    if num_rrh == 1:
        return np.zeros((1, 2))
    radius = spacing / (2.0 * np.sin(np.pi / num_rrh))
    ang = np.pi / 2 + 2 * np.pi * np.arange(num_rrh) / num_rrh
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate_topology(cfg: ScenarioConfig, seed) -> Topology:
    rng = np.random.default_rng(seed)
    rrh = rrh_layout(cfg.num_rrh, cfg.rrh_spacing)
    centre = rrh.mean(axis=0)
    ues = np.array([centre + _point_in_disk(rng, cfg.ue_disk_radius) for _ in range(cfg.num_ue)])
    tx = np.array([u + _point_in_disk(rng, cfg.d2d_max_distance) for u in ues])
    return Topology(rrh, ues, tx)


# ---------------------------------------------------------------- channels

def link_coefficient(distance, shadow_db, r):
    """Complex gain with |.|^2 = distance^-2 * 10^(shadow_db/10) * |r|^2."""
    return np.asarray(r) * 10.0 ** (np.asarray(shadow_db) / 20.0) / np.asarray(distance)


def sample_channels(topo: Topology, cfg: ScenarioConfig, seed) -> ChannelSet:
    rng = np.random.default_rng(seed)
    M, K, L = cfg.num_ue, cfg.num_rrh, cfg.antennas_per_rrh
    d_rrh = np.linalg.norm(topo.ue_positions[:, None, :] - topo.rrh_positions[None, :, :], axis=2)
    d_ue = np.linalg.norm(topo.ue_positions[:, None, :] - topo.d2d_tx_positions[None, :, :], axis=2)
    if np.any(d_rrh == 0) or np.any(d_ue == 0):
        raise ValueError("co-located transmitter and receiver: zero link distance")
    shadow = rng.normal(0.0, cfg.shadow_std_db, size=(M, K))
    r = (rng.normal(size=(M, K, L)) + 1j * rng.normal(size=(M, K, L))) / np.sqrt(2.0)
    h = link_coefficient(d_rrh[:, :, None], shadow[:, :, None], r)
    g_cross = d_ue ** -2.0
    return ChannelSet(h=h, g_d2d=np.diag(g_cross).copy(), g_cross=g_cross)


# ---------------------------------------------------------------- rates

def cran_rate(m: int, state: SystemState, sol: PrecodingSolution, ch: ChannelSet,
              cfg: ScenarioConfig) -> float:
    if state.ue_mode[m]:
        raise ValueError(f"UE {m} is in D2D mode")
    M = ch.h.shape[0]
    sinr = cran_sinr(sol.v.reshape(M, -1), ch.h.reshape(M, -1), state.cran, cfg.noise_power)
    return float(np.log2(1.0 + sinr[m]))


def d2d_sinr(state: SystemState, ch: ChannelSet, cfg: ScenarioConfig) -> np.ndarray:
    """SINR of every D2D-mode UE (0 for C-RAN UEs)."""
    on = np.array(state.ue_mode, dtype=bool)
    p = cfg.p_d2d * on
    signal = p * ch.g_d2d
    interference = ch.g_cross @ p - signal
    return np.where(on, signal / (interference + cfg.noise_power), 0.0)


def d2d_rate(m: int, state: SystemState, ch: ChannelSet, cfg: ScenarioConfig) -> float:
    if not state.ue_mode[m]:
        raise ValueError(f"UE {m} is in C-RAN mode")
    return float(np.log2(1.0 + d2d_sinr(state, ch, cfg)[m]))


def computing_load(state: SystemState, sol: PrecodingSolution, cfg: ScenarioConfig) -> float:
    """Cloud load: beta * sum of C-RAN rates + alpha * nonzero precoding coefficients."""
    cran = list(state.cran)
    if not cran:
        return 0.0
    rates = float(np.sum(sol.rates[cran]))
    nnz = int(np.count_nonzero(np.abs(sol.v[cran]) > 0))
    return cfg.beta * rates + cfg.alpha * nnz


def system_energy(state: SystemState, sol: Optional[PrecodingSolution], cfg: ScenarioConfig,
                  protecting_triggered: bool = False) -> EnergyBreakdown:
    processor = float(sum(p for p, on in zip(cfg.processor_power, state.processor_on) if on))
    cran = list(state.cran)
    fronthaul = cfg.p_fronthaul * len(cran)
    rrh_tx = 0.0 if sol is None or not cran else float(np.sum(np.abs(sol.v[cran]) ** 2))
    wireless = rrh_tx / cfg.eta_rrh + len(state.d2d) * cfg.p_d2d / cfg.eta_ue
    return EnergyBreakdown(processor, fronthaul, wireless, processor + fronthaul + wireless,
                           protecting_triggered)


# ---------------------------------------------------------------- dynamics

def transition_cache(state: SystemState, cfg: ScenarioConfig, rng) -> SystemState:
    """Each cache becomes True with probability rho_m, independent of its current value."""
    draws = rng.random(cfg.num_ue) < np.asarray(cfg.rho)
    return SystemState(state.processor_on, state.ue_mode, tuple(bool(x) for x in draws))


def apply_action(state: SystemState, a: ControlAction) -> SystemState:
    N, M = len(state.processor_on), len(state.ue_mode)
    if not 0 <= a.processor_index < N or not 0 <= a.ue_index < M:
        raise IndexError(f"action {a} out of range for N={N}, M={M}")
    proc = list(state.processor_on)
    proc[a.processor_index] = bool(a.processor_target)
    mode = list(state.ue_mode)
    mode[a.ue_index] = bool(a.ue_target_mode)
    return SystemState(tuple(proc), tuple(mode), state.cache)


def check_qos(state: SystemState, sol: PrecodingSolution, ch: ChannelSet,
              cfg: ScenarioConfig) -> set:
    violators = set()
    if state.cran and not sol.feasible:
        violators.update(state.cran)
    if state.d2d:
        sinr = d2d_sinr(state, ch, cfg)
        for m in state.d2d:
            if not state.cache[m] or sinr[m] < cfg.sinr_target:
                violators.add(m)
    return violators


def protecting_operation(state: SystemState, violators) -> SystemState:
    """Turn every processor on and move violating D2D UEs back to C-RAN."""
    if not violators:
        return state
    mode = tuple(False if m in violators else d2d for m, d2d in enumerate(state.ue_mode))
    return SystemState((True,) * len(state.processor_on), mode, state.cache)


def resolve(state: SystemState, ch: ChannelSet, cfg: ScenarioConfig, precoder: Precoder):
    """Precode, check QoS, protect if needed and account energy for a post-transition state.

    Returns ``(next_state, reward, info, solution)``.
    """
    sol = precoder.optimize(state)
    violators = check_qos(state, sol, ch, cfg)
    triggered = bool(violators)
    if triggered:
        state = protecting_operation(state, violators)
        sol = precoder.optimize(state)
    if state.cran and not sol.feasible:
        logger.warning("precoding infeasible even after protection for C-RAN set %s", state.cran)
        info = system_energy(state, None, cfg, triggered)
        info = EnergyBreakdown(info.processor_w, info.fronthaul_w, info.wireless_w,
                               info.total_w, triggered, penalized=True)
        return state, -cfg.penalty_w, info, sol
    info = system_energy(state, sol, cfg, triggered)
    return state, -info.total_w, info, sol


def step(state: SystemState, a: ControlAction, ch: ChannelSet, cfg: ScenarioConfig, rng,
         precoder: Optional[Precoder] = None):
    """apply_action -> cache transition -> precoding -> QoS check/protection -> energy."""
    precoder = precoder or Precoder(ch, cfg)
    s = transition_cache(apply_action(state, a), cfg, rng)
    nxt, reward, info, _ = resolve(s, ch, cfg, precoder)
    return nxt, reward, info


# ---------------------------------------------------------------- encodings

def encode_state(state: SystemState) -> np.ndarray:
    return np.array(state.processor_on + state.ue_mode + state.cache, dtype=float)


def decode_state(vec, num_processors: int, num_ue: int) -> SystemState:
    bits = tuple(bool(round(float(x))) for x in vec)
    if len(bits) != num_processors + 2 * num_ue:
        raise ValueError("state vector has the wrong length")
    N, M = num_processors, num_ue
    return SystemState(bits[:N], bits[N:N + M], bits[N + M:])


def state_index(state: SystemState) -> int:
    """Binary counting over the encoded layout, first entry most significant."""
    idx = 0
    for bit in state.processor_on + state.ue_mode + state.cache:
        idx = (idx << 1) | int(bit)
    return idx


def state_from_index(idx: int, num_processors: int, num_ue: int) -> SystemState:
    D = num_processors + 2 * num_ue
    bits = [(idx >> (D - 1 - i)) & 1 for i in range(D)]
    return decode_state(bits, num_processors, num_ue)


def encode_action(a: ControlAction, num_ue: int) -> int:
    return (a.processor_index * 2 + int(a.processor_target)) * 2 * num_ue + \
        (a.ue_index * 2 + int(a.ue_target_mode))


def decode_action(idx: int, num_processors: int, num_ue: int) -> ControlAction:
    if not 0 <= idx < 4 * num_processors * num_ue:
        raise IndexError(f"action index {idx} out of range")
    proc, ue = divmod(int(idx), 2 * num_ue)
    return ControlAction(proc // 2, bool(proc % 2), ue // 2, bool(ue % 2))


class FranEnv:
    """Stateful wrapper: one scenario, one frozen channel set, memoised outcomes.

    The outcome of a step depends only on the post-transition state, so it is
    cached; the RNG stream consumed per step is identical with or without the
    cache.
    """

    def __init__(self, cfg: ScenarioConfig, channels: ChannelSet,
                 precoder: Optional[Precoder] = None):
        self.cfg = cfg
        self.channels = channels
        self.precoder = precoder if precoder is not None else Precoder(channels, cfg)
        self._outcomes: dict = {}
        self._actions = [decode_action(i, cfg.num_processors, cfg.num_ue)
                         for i in range(cfg.num_actions)]
        self._rho = np.asarray(cfg.rho)

    @classmethod
    def from_seeds(cls, cfg: ScenarioConfig, topology_seed, channel_seed) -> "FranEnv":
        topo = generate_topology(cfg, topology_seed)
        return cls(cfg, sample_channels(topo, cfg, channel_seed))

    def reset(self) -> SystemState:
        return initial_state(self.cfg)

    def action(self, index: int) -> ControlAction:
        return self._actions[index]

    def outcome(self, state: SystemState):
        """(next_state, reward, info) for a post-transition state."""
        out = self._outcomes.get(state)
        if out is None:
            nxt, reward, info, _ = resolve(state, self.channels, self.cfg, self.precoder)
            out = (nxt, reward, info)
            self._outcomes[state] = out
        return out

    def step(self, state: SystemState, action, rng):
        a = self._actions[action] if isinstance(action, (int, np.integer)) else action
        s = apply_action(state, a)
        cache = tuple(bool(x) for x in rng.random(self.cfg.num_ue) < self._rho)
        return self.outcome(SystemState(s.processor_on, s.ue_mode, cache))
