"""Training, evaluation, rho sweeps and transfer runs, plus their file outputs."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import RunConfig, ScenarioConfig, save_run_config
from .env import (FranEnv, encode_action, encode_state, generate_topology, initial_state,
                  sample_channels, state_from_index, state_index)
from .oracle import build_tabular_mdp, dump_value_csv, value_iteration
from .policies import Policy, cran_only_actions, cran_only_to_action, make_policy
from .precoder import Precoder
from .rl import (DQNAgent, EpsilonSchedule, QNetwork, QTable, ReplayMemory, Transition,
                 load_weights, q_learning_update, save_weights, select_action,
                 select_action_tabular)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "discounted_reward", "mean_power_w", "protections",
                  "epsilon", "loss", "seconds")
LEARNERS = ("drl", "drl_cran_only", "q_learning")


@dataclass
class MetricsRow:
    epoch: int
    discounted_reward: float
    mean_power_w: float
    protections: int
    epsilon: float
    loss: float
    seconds: float

    def as_list(self) -> list:
        return [self.epoch, self.discounted_reward, self.mean_power_w, self.protections,
                self.epsilon, self.loss, self.seconds]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def emit_metrics(rows, path) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("no metrics rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(x) for x in r.as_list()])


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [MetricsRow(int(r[0]), float(r[1]), float(r[2]), int(r[3]), float(r[4]),
                           float(r[5]), float(r[6])) for r in rd]


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    x = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    n = np.arange(1, len(x) + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_manifest(out: Path, cfg: RunConfig, **extra) -> None:
    doc = {"version": __version__, "fingerprint": cfg.fingerprint(), "seeds": cfg.seeds(),
           "config": cfg.to_dict()}
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- environments

class ChannelCache:
    """Shares topology, channels and precoder solutions across configs with the same radio setup.

    Precoding depends on channels and radio parameters only, never on rho, so
    runs that differ only in caching probabilities reuse one precoder.
    """

    def __init__(self):
        self._store = {}

    def env(self, cfg: RunConfig) -> FranEnv:
        seeds = cfg.seeds()
        radio = cfg.scenario.replace(rho=0.0).to_dict()
        key = (json.dumps(radio, sort_keys=True), seeds["topology_seed"], seeds["channel_seed"])
        if key not in self._store:
            topo = generate_topology(cfg.scenario, seeds["topology_seed"])
            ch = sample_channels(topo, cfg.scenario, seeds["channel_seed"])
            self._store[key] = (topo, ch, Precoder(ch, cfg.scenario))
        topo, ch, precoder = self._store[key]
        return FranEnv(cfg.scenario, ch, precoder)


def make_env(cfg: RunConfig, cache: Optional[ChannelCache] = None) -> FranEnv:
    return (cache or ChannelCache()).env(cfg)


def _redrawn_env(cfg: RunConfig, epoch: int) -> FranEnv:
    seeds = cfg.seeds()
    topo = generate_topology(cfg.scenario, seeds["topology_seed"])
    ch = sample_channels(topo, cfg.scenario, [seeds["channel_seed"], epoch])
    return FranEnv(cfg.scenario, ch)


# --------------------------------------------------------------------------- training

@dataclass
class TrainingResult:
    kind: str
    rows: list
    agent: Optional[DQNAgent] = None
    table: Optional[QTable] = None
    memory: Optional[ReplayMemory] = None
    env: Optional[FranEnv] = None
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    step_log: list = field(default_factory=list)
    # network picked by validation (None: the agent's current network)
    net: Optional[QNetwork] = None
    selected_epoch: Optional[int] = None
    selection: list = field(default_factory=list)    # (epoch, validation reward)

    def policy(self) -> Policy:
        sc = self.env.cfg
        if self.kind == "q_learning":
            return make_policy("q_learning", sc, table=self.table)
        return make_policy(self.kind, sc, net=self.net if self.net is not None else self.agent.net)


def _copy_table(t: QTable) -> QTable:
    return QTable(t.num_actions, t.learning_rate, t.gamma, {k: v.copy() for k, v in t.table.items()})


def layer_dims(cfg: RunConfig, kind: str = "drl") -> tuple:
    sc = cfg.scenario
    out = cran_only_actions(sc.num_processors) if kind == "drl_cran_only" else sc.num_actions
    return (sc.state_dim, *cfg.hidden, out)


def run_training(cfg: RunConfig, out_dir=None, kind: str = "drl", env: Optional[FranEnv] = None,
                 init_net=None, log_steps: bool = False, progress_every: int = 0,
                 on_epoch: Optional[Callable] = None) -> TrainingResult:
    """Random warm-up, then ``cfg.epochs`` epochs of epsilon-greedy learning from the initial state.

    ``kind`` selects the learner: the full DQN, the processor-only DQN, or the
    tabular Q-learning baseline. ``init_net`` seeds the DQN weights (transfer).
    ``on_epoch(epoch, result)`` is called after every epoch with the partial result;
    it must not change the learner.
    """
    if kind not in LEARNERS:
        raise ValueError(f"unknown learner {kind!r}")
    out = _prepare_out(out_dir) if out_dir is not None else None
    sc = cfg.scenario
    env = env or make_env(cfg)
    rng = np.random.default_rng(cfg.seeds()["train_seed"])
    sched = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_anneal_steps)
    T, gamma = sc.steps_per_epoch, cfg.gamma
    N, M = sc.num_processors, sc.num_ue
    cran_only = kind == "drl_cran_only"

    agent = table = memory = None
    if kind == "q_learning":
        table = QTable(sc.num_actions, cfg.q_learning_rate, gamma)
    else:
        kw = dict(gamma=gamma, batch_size=cfg.batch_size, train_every=cfg.train_every,
                  target_sync_every=cfg.target_sync_every,
                  target_uses_taken_action=cfg.target_uses_taken_action)
        if init_net is not None:
            if tuple(init_net.layer_dims) != layer_dims(cfg, kind):
                raise ValueError(f"checkpoint layer dims {init_net.layer_dims} do not match "
                                 f"{layer_dims(cfg, kind)}")
            agent = DQNAgent.from_network(init_net, cfg.learning_rate, **kw)
        else:
            agent = DQNAgent.create(layer_dims(cfg, kind), rng, cfg.learning_rate, **kw)
        memory = ReplayMemory(cfg.memory_capacity, sc.state_dim)

    def full_index(a: int) -> int:
        return encode_action(cran_only_to_action(a), M) if cran_only else a

    def record(s, a, r, s2, last):
        # the process itself never ends; the epoch boundary only truncates it
        terminal = last and cfg.epoch_end_terminal
        r = r * cfg.reward_scale
        if table is not None:
            q_learning_update(table, state_index(s), a, r, state_index(s2), terminal)
        else:
            memory.push(Transition(encode_state(s), a, r, encode_state(s2), terminal))

    # warm-up: uniformly random actions in the real environment, T-step epochs
    n_random = 2 * N if cran_only else sc.num_actions
    s = env.reset()
    for i in range(cfg.warmup_steps):
        t = i % T
        if t == 0:
            s = env.reset()
        a = int(rng.integers(n_random))
        s2, r, _ = env.step(s, full_index(a), rng)
        record(s, a, r, s2, t == T - 1)
        s = s2

    rows, step_log = [], []
    g = 0
    select_seed = [cfg.seeds()["train_seed"], 1]
    best, selection = None, []
    loss_ema = math.nan
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        if sc.redraw_channels:
            env = _redrawn_env(cfg, epoch)
        s = env.reset()
        disc, charged, prot, losses = 0.0, 0.0, 0, []
        for t in range(T):
            if table is not None:
                a = select_action_tabular(table, state_index(s), g, sched, rng)
            else:
                a = select_action(agent.net, encode_state(s), g, sched, rng)
            s2, r, info = env.step(s, full_index(a), rng)
            record(s, a, r, s2, t == T - 1)
            if agent is not None:
                loss = agent.after_step(g, memory, rng)
                if loss is not None:
                    losses.append(loss)
            disc += gamma ** t * r
            charged -= r
            prot += int(info.protecting_triggered)
            if log_steps:
                step_log.append((epoch, t, full_index(a), r, info.total_w,
                                 info.protecting_triggered, info.penalized))
            s = s2
            g += 1
        if losses:
            m = float(np.mean(losses))
            loss_ema = m if math.isnan(loss_ema) else 0.99 * loss_ema + 0.01 * m
        secs = time.perf_counter() - t0 if cfg.record_timing else 0.0
        rows.append(MetricsRow(epoch, disc, charged / T, prot, sched(g), loss_ema, secs))
        if cfg.select_every and (epoch + 1) % cfg.select_every == 0:
            # same validation epochs for every snapshot, so scores are directly comparable
            now = TrainingResult(kind, rows, agent, table, memory, env).policy()
            score = evaluate_policy(env, now, cfg.select_episodes, select_seed, gamma).mean
            selection.append((epoch, score))
            if best is None or score > best[0]:
                best = (score, epoch, agent.net.copy() if agent is not None else _copy_table(table))
        if on_epoch is not None:
            on_epoch(epoch, TrainingResult(kind, rows, agent, table, memory, env))
        if progress_every and (epoch + 1) % progress_every == 0:
            logger.info("%s epoch %d: smoothed reward %.2f", kind, epoch + 1,
                        float(np.mean([r.discounted_reward for r in rows[-progress_every:]])))

    res = TrainingResult(kind, rows, agent, table, memory, env, step_log=step_log,
                         selection=selection)
    picked = best is not None and best[1] != cfg.epochs - 1
    if picked:
        res.selected_epoch = best[1]
        if agent is not None:
            res.net = best[2]
        else:
            res.table = best[2]
    if out is not None:
        res.metrics_path = out / "metrics.csv"
        emit_metrics(rows, res.metrics_path)
        if agent is not None:
            res.checkpoint_path = out / "checkpoint.json"
            # the optimiser state only belongs with the last weights
            if picked:
                save_weights(res.checkpoint_path, res.net, None, cfg.fingerprint())
            else:
                save_weights(res.checkpoint_path, agent.net, agent.opt, cfg.fingerprint())
            save_weights(out / "last_checkpoint.json", agent.net, agent.opt, cfg.fingerprint())
        else:
            res.checkpoint_path = out / "q_table.json"
            save_q_table(res.checkpoint_path, res.table)
        if selection:
            with open(out / "selection.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "validation_reward"])
                w.writerows([e, _fmt(v)] for e, v in selection)
        save_run_config(cfg, out / "config.json")
        write_manifest(out, cfg, kind=kind, transfer=init_net is not None,
                       selected_epoch=res.selected_epoch)
    return res


def save_q_table(path, table: QTable) -> None:
    doc = {"num_actions": table.num_actions, "learning_rate": table.learning_rate,
           "gamma": table.gamma,
           "table": {str(k): v.tolist() for k, v in sorted(table.table.items())}}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_q_table(path) -> QTable:
    doc = json.loads(Path(path).read_text())
    t = QTable(int(doc["num_actions"]), float(doc["learning_rate"]), float(doc["gamma"]))
    t.table = {int(k): np.asarray(v, dtype=float) for k, v in doc["table"].items()}
    return t


# --------------------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    returns: np.ndarray         # per-epoch discounted reward
    powers: np.ndarray          # per-epoch mean charged power (W)
    protections: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def se(self) -> float:
        return float(np.std(self.returns, ddof=1) / np.sqrt(len(self.returns)))

    @property
    def ci95(self) -> tuple:
        return (self.mean - 1.96 * self.se, self.mean + 1.96 * self.se)

    @property
    def mean_power(self) -> float:
        return float(np.mean(self.powers))

    @property
    def power_se(self) -> float:
        return float(np.std(self.powers, ddof=1) / np.sqrt(len(self.powers)))

    @property
    def power_ci95(self) -> tuple:
        return (self.mean_power - 1.96 * self.power_se, self.mean_power + 1.96 * self.power_se)

    def summary(self) -> dict:
        lo, hi = self.ci95
        plo, phi = self.power_ci95
        return {"episodes": int(len(self.returns)), "mean_discounted_reward": self.mean,
                "se": self.se, "ci95_low": lo, "ci95_high": hi,
                "mean_power_w": self.mean_power, "power_ci95_low": plo, "power_ci95_high": phi,
                "protections_per_epoch": float(np.mean(self.protections))}


def evaluate_policy(env: FranEnv, policy: Policy, episodes: int, seed, gamma: float,
                    steps: Optional[int] = None) -> EvalResult:
    """Run ``episodes`` epochs from the initial state in lockstep.

    States are tracked as integer indices; the policy and the environment's
    memoised outcome are queried once per distinct state per step.
    """
    sc = env.cfg
    N, M = sc.num_processors, sc.num_ue
    D = sc.state_dim
    T = steps or sc.steps_per_epoch
    rng = np.random.default_rng(seed)
    rho = np.asarray(sc.rho)
    shifts = np.arange(D - 1, -1, -1)
    weights = (1 << shifts).astype(np.int64)

    idx = np.full(episodes, state_index(initial_state(sc)), dtype=np.int64)
    disc = np.zeros(episodes)
    charged = np.zeros(episodes)
    prot = np.zeros(episodes, dtype=np.int64)
    outcome = {}
    for t in range(T):
        if policy.stationary:
            uniq, inv = np.unique(idx, return_inverse=True)
            acts = np.array([policy(state_from_index(int(i), N, M), t, None) for i in uniq])[inv]
        elif policy.kind == "random":
            acts = rng.integers(sc.num_actions, size=episodes)
        else:
            acts = np.full(episodes, policy(None, t, None))
        bits = (idx[:, None] >> shifts) & 1
        # decode action index: (proc*2 + target) * 2M + (ue*2 + mode)
        pa, ua = np.divmod(acts, 2 * M)
        rows = np.arange(episodes)
        bits[rows, pa // 2] = pa % 2
        bits[rows, N + ua // 2] = ua % 2
        bits[:, N + M:] = rng.random((episodes, M)) < rho
        post = bits @ weights
        uniq, inv = np.unique(post, return_inverse=True)
        res = []
        for i in uniq:
            i = int(i)
            if i not in outcome:
                nxt, r, info = env.outcome(state_from_index(i, N, M))
                outcome[i] = (state_index(nxt), r, info.protecting_triggered)
            res.append(outcome[i])
        nxt_idx = np.array([x[0] for x in res])[inv]
        r = np.array([x[1] for x in res])[inv]
        p = np.array([x[2] for x in res], dtype=np.int64)[inv]
        disc += gamma ** t * r
        charged -= r
        prot += p
        idx = nxt_idx
    return EvalResult(disc, charged / T, prot)


def static_cran_power(env: FranEnv) -> float:
    """Per-step power of the all-on, all-C-RAN configuration (caches do not matter)."""
    _, r, _ = env.outcome(initial_state(env.cfg))
    return -r


def write_eval(out: Path, res: EvalResult, extra: Optional[dict] = None) -> dict:
    with open(out / "eval_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "discounted_reward", "mean_power_w", "protections"])
        for i, (d, p, k) in enumerate(zip(res.returns, res.powers, res.protections)):
            w.writerow([i, _fmt(d), _fmt(p), int(k)])
    summary = res.summary()
    summary.update(extra or {})
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_evaluation(checkpoint, cfg: RunConfig, out_dir=None, episodes: Optional[int] = None,
                   kind: str = "drl", env: Optional[FranEnv] = None) -> dict:
    """Greedy evaluation over a dedicated seed stream.

    ``kind`` may also be a non-learning baseline ("random", "d2d_always"), in
    which case ``checkpoint`` is ignored.
    """
    out = _prepare_out(out_dir) if out_dir is not None else None
    env = env or make_env(cfg)
    extra = {"kind": kind}
    if kind in ("drl", "drl_cran_only"):
        ck = load_weights(checkpoint)
        if ck.fingerprint is not None and ck.fingerprint != cfg.fingerprint():
            msg = f"checkpoint fingerprint {ck.fingerprint} differs from config {cfg.fingerprint()}"
            warnings.warn(msg)
            extra["fingerprint_warning"] = msg
        policy = make_policy(kind, cfg.scenario, net=ck.net)
    elif kind == "q_learning":
        policy = make_policy(kind, cfg.scenario, table=load_q_table(checkpoint))
    else:
        policy = make_policy(kind, cfg.scenario)
    res = evaluate_policy(env, policy, episodes or cfg.eval_episodes, cfg.seeds()["eval_seed"],
                          cfg.gamma)
    extra["static_cran_power_w"] = static_cran_power(env)
    if out is not None:
        return write_eval(out, res, extra)
    summary = res.summary()
    summary.update(extra)
    return summary


# --------------------------------------------------------------------------- sweeps and transfer

def run_sweep(cfg: RunConfig, rhos, out_dir, cache: Optional[ChannelCache] = None) -> list:
    """Train and evaluate one model per rho, all on the same topology and channels."""
    rhos = list(rhos)
    if len(rhos) < 2:
        raise ValueError("a sweep needs at least two rho values")
    out = _prepare_out(out_dir)
    cache = cache or ChannelCache()
    table = []
    for rho in rhos:
        sub = cfg.replace(rho=rho)
        tag = "rho_" + "_".join(f"{x:g}" for x in sub.scenario.rho)
        env = cache.env(sub)
        res = run_training(sub, out / tag, env=env)
        ev = evaluate_policy(env, res.policy(), sub.eval_episodes, sub.seeds()["eval_seed"], sub.gamma)
        summary = write_eval(out / tag, ev)
        summary["rho"] = list(sub.scenario.rho)
        table.append(summary)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "mean_discounted_reward", "ci95_low", "ci95_high", "mean_power_w",
                    "power_ci95_low", "power_ci95_high"])
        for row in table:
            w.writerow([" ".join(f"{x:g}" for x in row["rho"])] +
                       [_fmt(row[k]) for k in ("mean_discounted_reward", "ci95_low", "ci95_high",
                                               "mean_power_w", "power_ci95_low", "power_ci95_high")])
    return table


def run_transfer(source_checkpoint, cfg: RunConfig, out_dir=None,
                 env: Optional[FranEnv] = None) -> TrainingResult:
    """Initialise online and target networks from a checkpoint and keep training.

    The optimiser, replay memory and exploration schedule start fresh, so the
    metrics line up row for row with a from-scratch run.
    """
    ck = load_weights(source_checkpoint)
    return run_training(cfg, out_dir, kind="drl", env=env, init_net=ck.net)


def run_vi_check(cfg: RunConfig, out_dir=None) -> dict:
    """Value iteration on an enumerable scenario; optional CSV of V and the greedy policy."""
    env = make_env(cfg)
    mdp = build_tabular_mdp(cfg.scenario, env.channels, env.precoder)
    vf = value_iteration(mdp, cfg.gamma)
    s0 = state_index(initial_state(cfg.scenario))
    summary = {"states": mdp.num_states, "actions": mdp.num_actions, "iterations": vf.iterations,
               "residual": vf.residual, "value_s0": float(vf.V[s0]),
               "greedy_action_s0": int(vf.policy[s0])}
    if out_dir is not None:
        out = _prepare_out(out_dir)
        dump_value_csv(vf, mdp, out / "value_function.csv")
        (out / "vi_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
