"""Scenario and run configuration.

Both configs load from a flat JSON object. Scenario keys and run keys may
share one file; :func:`load_run_config` routes each key to the right
dataclass and rejects anything it does not recognise.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np


class ConfigError(ValueError):
    pass


def _as_tuple(value, n: int, name: str) -> tuple:
    if np.isscalar(value):
        return tuple(float(value) for _ in range(n))
    out = tuple(float(v) for v in value)
    if len(out) != n:
        raise ConfigError(f"{name} needs {n} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    num_rrh: int = 3
    antennas_per_rrh: int = 2
    num_ue: int = 4
    num_processors: int = 6
    rrh_spacing: float = 800.0
    ue_disk_radius: float = 100.0
    d2d_max_distance: float = 20.0
    noise_power: float = 1e-13
    p_max: float = 1.5
    p_d2d: float = 0.1
    sinr_target_db: float = 5.0
    eta_rrh: float = 1.0 / 40.0
    eta_ue: float = 1.0 / 20.0
    p_fronthaul: float = 5.0
    processor_power: tuple = (21.6, 6.4, 5.0, 8.0, 12.5, 12.5)
    processor_capacity: tuple = (6.0, 4.0, 1.0, 2.0, 5.0, 5.0)
    beta: float = 1.0
    alpha: float = 0.5
    # scalar or one entry per UE
    rho: Any = 0.9
    steps_per_epoch: int = 30
    shadow_std_db: float = 8.0
    # precoder knobs
    xi: float = 1e-6
    zero_threshold: float = 1e-2
    max_iters: int = 50
    power_rtol: float = 1e-6
    penalty_w: float = 200.0
    redraw_channels: bool = False

    def __post_init__(self):
        # normalise sequences so the config stays hashable
        object.__setattr__(self, "rho", _as_tuple(self.rho, self.num_ue, "rho"))
        object.__setattr__(self, "processor_power",
                           _as_tuple(self.processor_power, self.num_processors, "processor_power"))
        object.__setattr__(self, "processor_capacity",
                           _as_tuple(self.processor_capacity, self.num_processors, "processor_capacity"))
        self.validate()

    def validate(self) -> None:
        if self.num_rrh < 1 or self.antennas_per_rrh < 1:
            raise ConfigError("need at least one RRH antenna")
        if self.num_ue < 1 or self.num_processors < 1:
            raise ConfigError("need at least one UE and one processor")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        positive = dict(noise_power=self.noise_power, p_max=self.p_max,
                        eta_rrh=self.eta_rrh, eta_ue=self.eta_ue,
                        p_fronthaul=self.p_fronthaul, xi=self.xi,
                        zero_threshold=self.zero_threshold)
        for name, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{name} must be strictly positive, got {val}")
        if self.p_d2d < 0:
            raise ConfigError("p_d2d must be nonnegative")
        if any(p <= 0 for p in self.processor_power) or any(c <= 0 for c in self.processor_capacity):
            raise ConfigError("processor powers and capacities must be strictly positive")
        if any(not 0.0 <= r <= 1.0 for r in self.rho):
            raise ConfigError(f"rho entries must lie in [0, 1], got {self.rho}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if self.rrh_spacing < 0 or self.ue_disk_radius < 0 or self.d2d_max_distance < 0:
            raise ConfigError("geometry lengths must be nonnegative")

    @property
    def sinr_target(self) -> float:
        return 10.0 ** (self.sinr_target_db / 10.0)

    @property
    def min_rate(self) -> float:
        return float(np.log2(1.0 + self.sinr_target))

    @property
    def num_antennas(self) -> int:
        return self.num_rrh * self.antennas_per_rrh

    @property
    def num_actions(self) -> int:
        return 2 * self.num_processors * 2 * self.num_ue

    @property
    def state_dim(self) -> int:
        return self.num_processors + 2 * self.num_ue

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("rho", "processor_power", "processor_capacity"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    epochs: int = 32000
    warmup_steps: int = 1000
    train_every: int = 3
    target_sync_every: int = 480
    batch_size: int = 32
    gamma: float = 0.99
    learning_rate: float = 1e-4
    memory_capacity: int = 5000
    hidden: tuple = (24, 24)
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_anneal_steps: int = 3000
    q_learning_rate: float = 0.1
    # bootstrap on the taken action instead of the max over next actions
    target_uses_taken_action: bool = False
    # treat the last step of an epoch as terminal instead of a time-limit cut
    epoch_end_terminal: bool = False
    # rewards are multiplied by this before they enter replay memory / the Q-table
    reward_scale: float = 0.01
    # greedy validation every this many epochs; the best snapshot becomes the checkpoint (0: keep the last)
    select_every: int = 500
    select_episodes: int = 300
    seed: int = 0
    topology_seed: Optional[int] = None
    channel_seed: Optional[int] = None
    train_seed: Optional[int] = None
    eval_seed: Optional[int] = None
    eval_episodes: int = 10000
    smoothing_window: int = 500
    record_timing: bool = False
    mode: str = "train"
    out_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.scenario, dict):
            object.__setattr__(self, "scenario", ScenarioConfig(**self.scenario))
        if self.warmup_steps < self.batch_size:
            raise ConfigError("warmup_steps must be at least batch_size")
        for name in ("train_every", "target_sync_every", "batch_size", "eps_anneal_steps",
                     "memory_capacity", "epochs", "eval_episodes", "smoothing_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.select_every < 0 or self.select_episodes <= 0:
            raise ConfigError("select_every must be >= 0 and select_episodes positive")
        if not self.reward_scale > 0:
            raise ConfigError("reward_scale must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.mode not in ("train", "eval", "transfer", "sweep", "vi-check"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def seeds(self) -> dict:
        """Resolve the four RNG seeds, deriving unset ones from the master seed."""
        children = np.random.SeedSequence(self.seed).generate_state(4, dtype=np.uint64)
        names = ("topology_seed", "channel_seed", "train_seed", "eval_seed")
        return {n: int(getattr(self, n)) if getattr(self, n) is not None else int(c)
                for n, c in zip(names, children)}

    def replace(self, **changes) -> "RunConfig":
        scen = {k: changes.pop(k) for k in list(changes) if k in _SCENARIO_KEYS}
        cfg = dataclasses.replace(self, **changes)
        if scen:
            cfg = dataclasses.replace(cfg, scenario=cfg.scenario.replace(**scen))
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "scenario"}
        d["hidden"] = list(self.hidden)
        d.update(self.scenario.to_dict())
        return d

    def fingerprint(self) -> str:
        """Hash of everything that shapes the learned model (not paths or mode)."""
        d = self.to_dict()
        for k in ("mode", "out_dir", "eval_episodes", "eval_seed", "record_timing"):
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"scenario"}


def run_config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - _SCENARIO_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    scen = ScenarioConfig(**{k: v for k, v in d.items() if k in _SCENARIO_KEYS})
    return RunConfig(scenario=scen, **{k: v for k, v in d.items() if k in _RUN_KEYS})


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return run_config_from_dict(d)


def save_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def reduced_scenario(**overrides) -> ScenarioConfig:
    """Small instance (2 processors, 2 UEs) that the tabular oracle can enumerate."""
    base = dict(num_ue=2, num_processors=2, processor_power=(21.6, 12.5),
                processor_capacity=(6.0, 5.0), rho=0.8)
    base.update(overrides)
    return ScenarioConfig(**base)


def parse_rho_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]
