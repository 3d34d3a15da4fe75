"""Sparse precoding under QoS, per-RRH power and cloud computing constraints.

The non-convex power-minimisation problem is handled by iterating a convex
surrogate: SINR constraints become second-order cones after a phase
rotation, and the l0 count in the computing constraint is replaced by a
reweighted l1 norm. Each surrogate is a small SOCP solved with Clarabel.

Complex coefficients are split into real/imaginary pairs and rescaled so
that the solver sees O(1) numbers even though the physical powers are of
order 1e-8 W.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"

# slack used when validating a solver answer on the normalised rows
ROW_TOL = 1e-7
# constraints are tightened by this relative margin before solving
TIGHTEN = 1e-8


@dataclass
class PrecodingSolution:
    v: np.ndarray                 # (M, K, L) complex, zero rows for UEs not in C-RAN mode
    cran: tuple
    rates: np.ndarray             # (M,) bits/s/Hz, zero outside the C-RAN set
    sinr: np.ndarray              # (M,)
    rrh_power: np.ndarray         # (K,) watts
    total_tx_power: float
    computing_load: float
    nnz: int
    capacity: float
    iterations: int = 0
    converged: bool = False
    status: str = OPTIMAL
    objective_history: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class ReweightState:
    theta: np.ndarray
    xi: float
    zero_mask: np.ndarray


@dataclass
class SocpInstance:
    """One convex subproblem for the UEs in ``cran``.

    ``h`` holds the network-wide channel rows of those UEs, shape
    (len(cran), K*L). ``theta``/``budget`` describe the reweighted-l1
    computing row; ``theta=None`` drops that row entirely.
    """
    h: np.ndarray
    noise_power: float
    sinr_target: float
    p_max: float
    num_rrh: int
    antennas_per_rrh: int
    zero_mask: np.ndarray
    theta: Optional[np.ndarray] = None
    budget: float = np.inf

    def to_dict(self) -> dict:
        return {
            "h_real": self.h.real.tolist(), "h_imag": self.h.imag.tolist(),
            "noise_power": self.noise_power, "sinr_target": self.sinr_target,
            "p_max": self.p_max, "num_rrh": self.num_rrh,
            "antennas_per_rrh": self.antennas_per_rrh,
            "zero_mask": self.zero_mask.astype(int).tolist(),
            "theta": None if self.theta is None else self.theta.tolist(),
            "budget": None if not np.isfinite(self.budget) else self.budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SocpInstance":
        theta = d.get("theta")
        budget = d.get("budget")
        return cls(h=np.asarray(d["h_real"]) + 1j * np.asarray(d["h_imag"]),
                   noise_power=d["noise_power"], sinr_target=d["sinr_target"],
                   p_max=d["p_max"], num_rrh=d["num_rrh"],
                   antennas_per_rrh=d["antennas_per_rrh"],
                   zero_mask=np.asarray(d["zero_mask"], dtype=bool),
                   theta=None if theta is None else np.asarray(theta, dtype=float),
                   budget=np.inf if budget is None else float(budget))


@dataclass
class SocpSolution:
    v: np.ndarray          # (len(cran), K*L) complex
    objective: float       # sum of squared magnitudes, watts
    status: str
    solver_status: str = ""


def _settings() -> clarabel.DefaultSettings:
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = 1e-10
    s.tol_gap_rel = 1e-10
    s.tol_feas = 1e-10
    s.max_iter = 200
    return s


def solve_subproblem(inst: SocpInstance) -> SocpSolution:
    """Solve one convex surrogate; never raises on solver trouble."""
    nu, n = inst.h.shape
    if inst.sinr_target <= 0:
        raise ValueError("sinr_target must be positive")
    if nu == 0:
        return SocpSolution(np.zeros((0, n), complex), 0.0, OPTIMAL)
    if inst.theta is not None and not inst.budget >= 0:
        return SocpSolution(np.zeros((nu, n), complex), np.nan, INFEASIBLE, "negative budget")

    # unknown complex coefficients, masked ones are removed outright
    active = np.argwhere(~inst.zero_mask)          # rows of (ue, antenna)
    p = len(active)
    for j in range(nu):
        if not np.any(active[:, 0] == j):
            return SocpSolution(np.zeros((nu, n), complex), np.nan, INFEASIBLE, "ue fully masked")

    sigma = np.sqrt(inst.noise_power)
    hnorm = np.linalg.norm(inst.h, axis=1).max()
    if hnorm <= 0:
        return SocpSolution(np.zeros((nu, n), complex), np.nan, INFEASIBLE, "zero channel")
    kappa = sigma / hnorm                      # v = kappa * y
    hb = inst.h / hnorm                        # h^H v / sigma == hb^H y
    hr, hi = hb.real, hb.imag

    with_l1 = inst.theta is not None
    nv = 2 * p + (p if with_l1 else 0)

    # linear maps y -> Re/Im(hb_j^H y_{j'}) for every (j, j')
    re_map = np.zeros((nu, nu, nv))
    im_map = np.zeros((nu, nu, nv))
    for i, (jp, a) in enumerate(active):
        re_map[:, jp, 2 * i] = hr[:, a]
        re_map[:, jp, 2 * i + 1] = hi[:, a]
        im_map[:, jp, 2 * i] = -hi[:, a]
        im_map[:, jp, 2 * i + 1] = hr[:, a]

    rows, rhs, cones = [], [], []
    # (e2) Im(h_j^H v_j) = 0
    for j in range(nu):
        rows.append(im_map[j, j][None, :])
        rhs.append(np.zeros(1))
    cones.append(clarabel.ZeroConeT(nu))

    if with_l1:
        # (e4) sum theta |v| <= budget, u_i >= |y_i| in the cones below
        w = np.zeros(nv)
        w[2 * p:] = inst.theta[active[:, 0], active[:, 1]] * kappa
        scale = max(w.max(), 1.0)
        rows.append(w[None, :] / scale)
        rhs.append(np.array([inst.budget * (1.0 - TIGHTEN) / scale]))
        cones.append(clarabel.NonnegativeConeT(1))

    # (e1) ||[h_j^H v_j', ..., sigma]|| <= sqrt(1 + 1/gamma) Re(h_j^H v_j)
    gamma = inst.sinr_target * (1.0 + TIGHTEN)
    c = np.sqrt(1.0 + 1.0 / gamma)
    for j in range(nu):
        block = [-c * re_map[j, j][None, :]]
        for jp in range(nu):
            block.append(-re_map[j, jp][None, :])
            block.append(-im_map[j, jp][None, :])
        block.append(np.zeros((1, nv)))
        rows.append(np.vstack(block))
        b = np.zeros(2 * nu + 2)
        b[-1] = 1.0
        rhs.append(b)
        cones.append(clarabel.SecondOrderConeT(2 * nu + 2))

    # (e3) per-RRH power cap
    cap = np.sqrt(inst.p_max * (1.0 - TIGHTEN)) / kappa
    rrh_of = active[:, 1] // inst.antennas_per_rrh
    for k in range(inst.num_rrh):
        idx = np.flatnonzero(rrh_of == k)
        if len(idx) == 0:
            continue
        blk = np.zeros((1 + 2 * len(idx), nv))
        for r, i in enumerate(idx):
            blk[1 + 2 * r, 2 * i] = -1.0
            blk[2 + 2 * r, 2 * i + 1] = -1.0
        rows.append(blk)
        b = np.zeros(1 + 2 * len(idx))
        b[0] = cap
        rhs.append(b)
        cones.append(clarabel.SecondOrderConeT(1 + 2 * len(idx)))

    if with_l1:
        for i in range(p):
            blk = np.zeros((3, nv))
            blk[0, 2 * p + i] = -1.0
            blk[1, 2 * i] = -1.0
            blk[2, 2 * i + 1] = -1.0
            rows.append(blk)
            rhs.append(np.zeros(3))
            cones.append(clarabel.SecondOrderConeT(3))

    A = sp.csc_matrix(np.vstack(rows))
    b = np.concatenate(rhs)
    pdiag = np.zeros(nv)
    pdiag[:2 * p] = 2.0
    P = sp.csc_matrix(sp.diags(pdiag))
    q = np.zeros(nv)

    try:
        res = clarabel.DefaultSolver(P, q, A, b, cones, _settings()).solve()
    except Exception as exc:  # solver-side panics surface as status
        logger.warning("clarabel raised: %s", exc)
        return SocpSolution(np.zeros((nu, n), complex), np.nan, NUMERICAL_FAILURE, repr(exc))

    sstat = str(res.status)
    if "Infeasible" in sstat and "Dual" not in sstat:
        return SocpSolution(np.zeros((nu, n), complex), np.nan, INFEASIBLE, sstat)
    y = np.asarray(res.x)
    v = np.zeros((nu, n), complex)
    v[active[:, 0], active[:, 1]] = kappa * (y[0:2 * p:2] + 1j * y[1:2 * p:2])
    obj = float(np.sum(np.abs(v) ** 2))
    if sstat not in ("Solved", "AlmostSolved") or not np.all(np.isfinite(y)):
        return SocpSolution(v, obj, NUMERICAL_FAILURE, sstat)
    if max(subproblem_residuals(inst, v).values()) > ROW_TOL:
        return SocpSolution(v, obj, NUMERICAL_FAILURE, sstat + " (residual check)")
    return SocpSolution(v, obj, OPTIMAL, sstat)


def subproblem_residuals(inst: SocpInstance, v: np.ndarray) -> dict:
    """Worst violation of each constraint family on the normalised rows (0 = satisfied)."""
    sigma = np.sqrt(inst.noise_power)
    g = inst.h.conj() @ v.T / sigma                # g[j, j'] = h_j^H v_j' / sigma
    c = np.sqrt(1.0 + 1.0 / inst.sinr_target)
    diag = np.diag(g)
    lhs = np.sqrt(np.sum(np.abs(g) ** 2, axis=1) + 1.0)
    scale = max(1.0, float(np.max(lhs)))
    e1 = float(np.max(lhs - c * diag.real) / scale)
    e2 = float(np.max(np.abs(diag.imag)) / scale)
    per_rrh = rrh_powers(v, inst.num_rrh, inst.antennas_per_rrh)
    e3 = float(np.max(per_rrh - inst.p_max) / inst.p_max)
    e5 = float(np.max(np.abs(v[inst.zero_mask]), initial=0.0))
    out = {"e1": max(e1, 0.0), "e2": e2, "e3": max(e3, 0.0), "e5": e5}
    if inst.theta is not None:
        used = float(np.sum(inst.theta * np.abs(v)))
        out["e4"] = max(used - inst.budget, 0.0) / max(1.0, abs(inst.budget))
    return out


def rrh_powers(v: np.ndarray, num_rrh: int, antennas_per_rrh: int) -> np.ndarray:
    """Per-RRH transmit power from stacked (users, K*L) or (users, K, L) coefficients."""
    v = np.asarray(v).reshape(v.shape[0], num_rrh, antennas_per_rrh)
    return np.sum(np.abs(v) ** 2, axis=(0, 2))


def cran_sinr(v: np.ndarray, h: np.ndarray, cran: Sequence[int], noise_power: float) -> np.ndarray:
    """SINR of every UE for flattened precoders ``v`` and channels ``h`` (both (M, K*L)).

    Only UEs in ``cran`` transmit or are scored; other entries are 0.
    """
    M = h.shape[0]
    out = np.zeros(M)
    if not len(cran):
        return out
    cr = np.asarray(cran)
    g = np.abs(h[cr].conj() @ v[cr].T) ** 2        # g[i, j] = |h_i^H v_j|^2
    desired = np.diag(g)
    interference = g.sum(axis=1) - desired
    out[cr] = desired / (interference + noise_power)
    return out


def update_weights(v: np.ndarray, xi: float) -> np.ndarray:
    """Reweighting rule theta = 1 / (|v| + xi)."""
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    return 1.0 / (np.abs(v) + xi)


def threshold_zeros(v: np.ndarray, mask: np.ndarray, threshold: float) -> np.ndarray:
    """Grow the zero mask with every coefficient strictly below ``threshold`` in magnitude."""
    return mask | (np.abs(v) < threshold)


class Precoder:
    """Algorithm-1 driver bound to one channel realisation.

    Results depend only on the C-RAN set and the active computing capacity,
    so they are memoised on that pair.
    """

    def __init__(self, channels, cfg, dump_dir: Optional[str] = None):
        self.cfg = cfg
        self.h = channels.h.reshape(channels.h.shape[0], -1)
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self._cache: dict = {}
        self._dumps = 0

    def coefficient_scale(self, cran) -> float:
        """Natural magnitude of precoding coefficients: sigma / max ||h_m|| over ``cran``.

        The reweighting offset and zeroing threshold are applied to
        coefficients measured in this unit, so ``cfg.xi`` stays small
        relative to the coefficients whatever the path loss.
        """
        return float(np.sqrt(self.cfg.noise_power) / np.linalg.norm(self.h[list(cran)], axis=1).max())

    def capacity(self, processor_on) -> float:
        return float(sum(d for d, on in zip(self.cfg.processor_capacity, processor_on) if on))

    def optimize(self, state) -> PrecodingSolution:
        cran = tuple(m for m, d2d in enumerate(state.ue_mode) if not d2d)
        return self.solve(cran, self.capacity(state.processor_on))

    def solve(self, cran: tuple, capacity: float) -> PrecodingSolution:
        key = (cran, round(capacity, 9))
        sol = self._cache.get(key)
        if sol is None:
            sol = self._run(cran, capacity)
            self._cache[key] = sol
        return sol

    def _instance(self, cran, mask, theta=None, budget=np.inf) -> SocpInstance:
        cfg = self.cfg
        inst = SocpInstance(h=self.h[list(cran)], noise_power=cfg.noise_power,
                            sinr_target=cfg.sinr_target, p_max=cfg.p_max,
                            num_rrh=cfg.num_rrh, antennas_per_rrh=cfg.antennas_per_rrh,
                            zero_mask=mask, theta=theta, budget=budget)
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            path = self.dump_dir / f"socp_{self._dumps:05d}.json"
            path.write_text(json.dumps(inst.to_dict()))
            self._dumps += 1
        return inst

    def init_precoding(self, cran: tuple) -> PrecodingSolution:
        """Stage 1: QoS/power-constrained minimum-power precoding, no computing row."""
        n = self.h.shape[1]
        if not cran:
            return self._package(np.zeros((0, n), complex), cran, np.inf, OPTIMAL, 0, True)
        res = solve_subproblem(self._instance(cran, np.zeros((len(cran), n), bool)))
        return self._package(res.v, cran, np.inf, res.status, 0, res.status == OPTIMAL)

    def _run(self, cran: tuple, capacity: float) -> PrecodingSolution:
        cfg = self.cfg
        n = self.h.shape[1]
        if not cran:
            return self._package(np.zeros((0, n), complex), cran, capacity, OPTIMAL, 0, True)

        init = self.init_precoding(cran)
        if not init.feasible:
            return self._package(np.zeros((len(cran), n), complex), cran, capacity,
                                 init.status, 0, False)
        v = init.v.reshape(init.v.shape[0], -1)[list(cran)]
        rates = init.rates[list(cran)]
        unit = self.coefficient_scale(cran)
        xi, tau = cfg.xi * unit, cfg.zero_threshold * unit
        theta = update_weights(v, xi)
        mask = np.zeros_like(v, dtype=bool)
        prev_power = float(np.sum(np.abs(v) ** 2))
        history = []

        for it in range(1, cfg.max_iters + 1):
            rate_load = cfg.beta * float(np.sum(rates))
            if cfg.alpha > 0:
                budget = (capacity - rate_load) / cfg.alpha
                inst = self._instance(cran, mask.copy(), theta, budget)
            else:
                if rate_load > capacity:
                    return self._package(v, cran, capacity, INFEASIBLE, it, False, history)
                inst = self._instance(cran, mask.copy())
            res = solve_subproblem(inst)
            if res.status != OPTIMAL:
                logger.debug("subproblem %d for %s at %.1f MOPTS: %s", it, cran, capacity,
                             res.solver_status)
                return self._package(v, cran, capacity, res.status, it, False, history)

            v = res.v
            power = res.objective
            history.append(power)
            new_mask = threshold_zeros(v, mask, tau)
            grew = bool(np.any(new_mask & ~mask))
            mask = new_mask
            v = np.where(mask, 0.0, v)
            sinr = cran_sinr(v, self.h[list(cran)], range(len(cran)), cfg.noise_power)
            rates = np.log2(1.0 + sinr)
            theta = update_weights(v, xi)
            sol = self._package(v, cran, capacity, OPTIMAL, it, False, history)
            settled = abs(power - prev_power) <= cfg.power_rtol * max(power, 1e-12)
            prev_power = power
            if settled and not grew and _meets_constraints(sol, cfg):
                sol.converged = True
                return sol

        sol.status = OPTIMAL if _meets_constraints(sol, cfg) else INFEASIBLE
        return sol

    def _package(self, v_rows, cran, capacity, status, iterations, converged,
                 history=None) -> PrecodingSolution:
        cfg = self.cfg
        M, n = self.h.shape
        full = np.zeros((M, n), complex)
        if len(cran) and v_rows.size:
            full[list(cran)] = v_rows
        sinr = cran_sinr(full, self.h, cran, cfg.noise_power)
        rates = np.log2(1.0 + sinr)
        nnz = int(np.count_nonzero(full))
        load = cfg.beta * float(rates.sum()) + cfg.alpha * nnz
        return PrecodingSolution(
            v=full.reshape(M, cfg.num_rrh, cfg.antennas_per_rrh), cran=tuple(cran),
            rates=rates, sinr=sinr,
            rrh_power=rrh_powers(full, cfg.num_rrh, cfg.antennas_per_rrh),
            total_tx_power=float(np.sum(np.abs(full) ** 2)), computing_load=load,
            nnz=nnz, capacity=capacity, iterations=iterations, converged=converged,
            status=status, objective_history=list(history or []))


def _meets_constraints(sol: PrecodingSolution, cfg) -> bool:
    if not sol.cran:
        return True
    cr = list(sol.cran)
    sinr_ok = np.all(sol.sinr[cr] >= cfg.sinr_target * (1.0 - 1e-6))
    power_ok = np.all(sol.rrh_power <= cfg.p_max + 1e-9)
    load_ok = sol.computing_load <= sol.capacity + 1e-6
    return bool(sinr_ok and power_ok and load_ok)


def optimize(state, channels, cfg) -> PrecodingSolution:
    """One-shot reweighted-l1 precoding without memoisation."""
    return Precoder(channels, cfg).optimize(state)


def init_precoding(cran, channels, cfg) -> PrecodingSolution:
    return Precoder(channels, cfg).init_precoding(tuple(cran))
