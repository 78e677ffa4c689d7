"""Receding-horizon maximum-distance strategy.

The current stint is planned lap by lap (per-lap charge-time budgets on the
piecewise-affine lap maps); the rest of the race is planned stint by stint
(lifted quadratic stint-time model). Non-driven laps come first in the lap
vector and non-driven stints first in the stint vector, so the in-lap is
always lap ``n_laps`` and the final stint is always stint ``n_stops``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .mip import BINARY, LinearModel, MipSolution, solve_convex, solve_mip
from .mip.bnb import EPS_T_CHARGE, CutDomainError
from .models import (MapSet, charge_time_to_energy, eval_final_stint_time, eval_lap_time,
                     eval_stint_time, final_stint_tangent_cut, stint_tangent_cut)

log = logging.getLogger(__name__)

ACTIVITY_TOL = 1e-4


class BuildError(ValueError):
    """Measurement or configuration inconsistent with the race horizon."""


@dataclass(frozen=True)
class RaceConfig:
    """Race-level constants for one strategy solve.

    ``n_laps_max`` and ``big_m`` default to values derived from the maps.
    """

    t_race: float
    s_lap: float
    n_stops: int = 1
    n_laps: int = 1
    n_laps_max: float | None = None
    big_m: float | None = None

    def __post_init__(self):
        if not (self.t_race > 0 and self.s_lap > 0):
            raise BuildError("t_race and s_lap must be positive")
        if int(self.n_laps) < 1 or int(self.n_stops) < 1:
            raise BuildError("n_laps and n_stops must be at least 1")
        if self.n_laps_max is not None and not self.n_laps_max > 0:
            raise BuildError("n_laps_max must be positive")
        if self.big_m is not None and not self.big_m > 0:
            raise BuildError("big_m must be positive")

    def replace(self, **kw) -> "RaceConfig":
        d = asdict(self)
        d.update(kw)
        return RaceConfig(**d)


@dataclass(frozen=True)
class EgoMeasurement:
    t_meas: float
    t_fc_meas: float
    lap: int = 0
    position: float = 0.0
    ms: int = 1


@dataclass
class StrategyPlan:
    """Solved plan; lap arrays have ``n_laps`` entries, stint arrays ``n_stops``."""

    status: str
    objective: float
    dt_charge: np.ndarray
    b_lap: np.ndarray
    t_lap: np.ndarray
    t_fc: np.ndarray
    n_laps_stint: np.ndarray
    t_charge_stint: np.ndarray
    b_pit: np.ndarray
    t_stint: np.ndarray
    t_charge_current: float
    t_entry: float
    t_tot: np.ndarray
    t_lap_ref: np.ndarray
    e_b_ref: np.ndarray
    t_meas: float
    t_fc_meas: float
    s_lap: float
    message: str = ""
    nodes: int = 0
    cuts: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @property
    def n_laps(self) -> int:
        return len(self.b_lap)

    @property
    def driven_laps(self) -> int:
        return int(np.sum(self.b_lap))

    @property
    def first_driven(self) -> int | None:
        """0-based index of the next lap to drive, or None."""
        idx = np.flatnonzero(self.b_lap)
        return int(idx[0]) if idx.size else None

    @property
    def pits_after_current(self) -> bool:
        return bool(self.b_pit[-1])

    @property
    def driven_stints(self) -> list[int]:
        return [i for i in range(len(self.b_pit)) if self.b_pit[i]]

    def binaries(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return tuple(int(v) for v in self.b_lap), tuple(int(v) for v in self.b_pit)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyPlan":
        kw = dict(d)
        for k in ("dt_charge", "t_lap", "t_fc", "n_laps_stint", "t_charge_stint", "t_stint", "t_tot",
                  "t_lap_ref", "e_b_ref"):
            kw[k] = np.asarray(kw[k], dtype=float)
        for k in ("b_lap", "b_pit"):
            kw[k] = np.asarray(kw[k], dtype=int)
        return cls(**kw)


# ---------------------------------------------------------------------------
# Convex constraints handled by outer approximation
# ---------------------------------------------------------------------------


@dataclass
class StintCutGenerator:
    """``t_stint >= stint(N, t_charge) - M (1 - b_pit)``."""

    name: str
    stm: object
    i_n: int
    i_t: int
    i_s: int
    i_b: int
    big_m: float
    model: LinearModel

    def violation(self, x):
        t = x[self.i_t]
        if t <= 0:
            return math.inf
        return eval_stint_time(self.stm, max(x[self.i_n], 0.0), t) - self.big_m * (1 - x[self.i_b]) - x[self.i_s]

    def cut(self, x):
        t = x[self.i_t]
        if t <= 0:
            raise CutDomainError(f"{self.name}: t_charge {t} not positive", self.i_t, EPS_T_CHARGE)
        a_n, a_t, b = stint_tangent_cut(self.stm, max(x[self.i_n], 0.0), t)
        return self.model.make_row({self.i_s: 1.0, self.i_n: -a_n, self.i_t: -a_t, self.i_b: -self.big_m},
                                   ">=", b - self.big_m, f"oa_{self.name}")


@dataclass
class FinalStintCutGenerator:
    """``t_stint >= D . [N^2, N, 1] - M (1 - b_pit)``."""

    name: str
    stm: object
    i_n: int
    i_s: int
    i_b: int
    big_m: float
    model: LinearModel

    def violation(self, x):
        return eval_final_stint_time(self.stm, max(x[self.i_n], 0.0)) - self.big_m * (1 - x[self.i_b]) - x[self.i_s]

    def cut(self, x):
        a_n, b = final_stint_tangent_cut(self.stm, max(x[self.i_n], 0.0))
        return self.model.make_row({self.i_s: 1.0, self.i_n: -a_n, self.i_b: -self.big_m},
                                   ">=", b - self.big_m, f"oa_{self.name}")


@dataclass
class PerspectiveStintCutGenerator:
    """Valid strengthening of the gated stint constraint.

    ``t_stint >= v^T Q v / t + offset*b - q22*eps*(1 - b)`` with
    ``v = [b, t, N]``. Exact when ``b = 1``; when ``b = 0`` the stint length
    is 0 and ``t`` is pinned to ``eps``, so the right side is 0.
    """

    name: str
    stm: object
    i_n: int
    i_t: int
    i_s: int
    i_b: int
    eps: float
    model: LinearModel

    def _parts(self, x):
        b, t, n = x[self.i_b], x[self.i_t], x[self.i_n]
        v = np.array([b, t, n])
        qv = self.stm.q_s @ v
        return v, qv, t

    def violation(self, x):
        v, qv, t = self._parts(x)
        if t <= 0:
            return math.inf
        corr = self.stm.q_s[1, 1] * self.eps
        b = v[0]
        return float(v @ qv) / t + self.stm.offset * b - corr * (1 - b) - x[self.i_s]

    def cut(self, x):
        v, qv, t = self._parts(x)
        if t <= 0:
            raise CutDomainError(f"{self.name}: t_charge {t} not positive", self.i_t, EPS_T_CHARGE)
        g_b = 2 * qv[0] / t
        g_t = 2 * qv[1] / t - float(v @ qv) / t ** 2
        g_n = 2 * qv[2] / t
        corr = self.stm.q_s[1, 1] * self.eps
        return self.model.make_row({self.i_s: 1.0, self.i_b: -(g_b + self.stm.offset + corr),
                                    self.i_t: -g_t, self.i_n: -g_n}, ">=", -corr, f"persp_{self.name}")


@dataclass
class PerspectiveFinalCutGenerator:
    """Valid strengthening ``t_stint >= (D0 N^2 + D1 N b + D2 b^2) / b``."""

    name: str
    stm: object
    i_n: int
    i_s: int
    i_b: int
    model: LinearModel

    def _g(self, n, b):
        d = self.stm.d_sf
        return (d[0] * n * n + d[1] * n * b + d[2] * b * b) / b

    def violation(self, x):
        b, n = x[self.i_b], max(x[self.i_n], 0.0)
        if b <= 1e-12:
            return -x[self.i_s] if n <= 1e-12 else math.inf
        return self._g(n, b) - x[self.i_s]

    def cut(self, x):
        d = self.stm.d_sf
        b, n = max(x[self.i_b], 1e-9), max(x[self.i_n], 0.0)
        g_n = (2 * d[0] * n + d[1] * b) / b
        g_b = d[2] - d[0] * n * n / b ** 2
        return self.model.make_row({self.i_s: 1.0, self.i_n: -g_n, self.i_b: -g_b}, ">=", 0.0,
                                   f"persp_{self.name}")


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------


def _in_lap_offset(maps: MapSet) -> float:
    lo, hi = maps.base.domain
    grid = np.linspace(lo, hi, 201)
    return float(max(0.0, np.min(eval_lap_time(maps.inlap, grid) - eval_lap_time(maps.base, grid))))


def _max_lap_time(maps: MapSet) -> float:
    lo = maps.base.domain[0]
    return float(max(eval_lap_time(maps.inlap, lo), eval_lap_time(maps.base, lo)))


def build_problem(meas: EgoMeasurement, cfg: RaceConfig, maps: MapSet, force_inlap: bool = False,
                  allow_immediate_stop: bool = True, allow_stops: bool = True) -> LinearModel:
    """Mixed-binary model of the maximum-distance problem.

    With ``force_inlap`` the horizon is one lap, that lap is driven and
    ends in the pit lane. ``allow_immediate_stop=False`` requires a driven
    in-lap before the next stop; ``allow_stops=False`` fixes every pit
    binary to zero, so the current stint is the last one.
    """
    tcmax = maps.t_charge_max
    t_rem = cfg.t_race - meas.t_meas
    if t_rem < 0:
        raise BuildError(f"t_meas={meas.t_meas} exceeds t_race={cfg.t_race}")
    if not -1e-9 <= meas.t_fc_meas <= tcmax + 1e-9:
        raise BuildError(f"t_fc_meas={meas.t_fc_meas} outside [0, {tcmax}]")
    t_fc0 = min(max(meas.t_fc_meas, 0.0), tcmax)
    n = 1 if force_inlap else int(cfg.n_laps)
    n_st = int(cfg.n_stops)
    stm = maps.stint
    n_max = float(cfg.n_laps_max if cfg.n_laps_max is not None else stm.n_laps_max)
    d_lo, d_hi = maps.base.domain
    max_lap = _max_lap_time(maps)
    c0max = float(max(np.max(maps.base.pieces[:, 1]), np.max(maps.inlap.pieces[:, 1])))
    m_lap = float(cfg.big_m) if cfg.big_m is not None else 10.0 * max(max_lap, c0max)
    f_empty = min(eval_stint_time(stm, 0.0, EPS_T_CHARGE), eval_stint_time(stm, 0.0, tcmax))
    m_stint = m_lap + max(0.0, f_empty)
    m_final = m_lap + max(0.0, eval_final_stint_time(stm, 0.0))
    t_in = _in_lap_offset(maps)

    mdl = LinearModel()
    mdl.big_m = {"lap": m_lap, "stint": m_stint, "final": m_final, "t_charge_max": tcmax}
    b_lap = [mdl.add_var(f"b_lap[{j}]", 0, 1, BINARY) for j in range(1, n + 1)]
    dtc = [mdl.add_var(f"dtc[{j}]", 0.0, d_hi) for j in range(1, n + 1)]
    t_lap = [mdl.add_var(f"t_lap[{j}]", 0.0, max_lap + 1.0) for j in range(1, n + 1)]
    t_fc = [mdl.add_var(f"t_fc[{j}]", 0.0, tcmax) for j in range(1, n + 2)]
    b_pit = [mdl.add_var(f"b_pit[{i}]", 0, 1 if allow_stops else 0, BINARY) for i in range(1, n_st + 1)]
    t_chg0 = mdl.add_var("t_chg0", 0.0, tcmax)
    t_entry = mdl.add_var("t_entry", 0.0, max(t_in, 0.0) + 1.0)
    ts_ub = max(t_rem, 0.0) + 1.0
    t_tot = [mdl.add_var(f"t_tot[{i}]", 0.0, max(t_rem, 0.0)) for i in range(1, n_st + 2)]
    n_laps_v, tc_v, ts_v, tu_v = [], [], [], []
    for i in range(1, n_st + 1):
        n_laps_v.append(mdl.add_var(f"N[{i}]", 0.0, n_max))
        ts_v.append(mdl.add_var(f"ts[{i}]", 0.0, ts_ub))
        if i < n_st:
            tc_v.append(mdl.add_var(f"tc[{i}]", EPS_T_CHARGE, tcmax))
            tu_v.append(mdl.add_var(f"tu[{i}]", 0.0, tcmax))

    # current stint, lap basis
    for j in range(n):
        mdl.add_constr({dtc[j]: 1.0, b_lap[j]: -d_hi}, "<=", 0.0, f"dtc_hi[{j + 1}]")
        mdl.add_constr({dtc[j]: 1.0, b_lap[j]: -d_lo}, ">=", 0.0, f"dtc_lo[{j + 1}]")
        for k, (c1, c0) in enumerate(maps.base.pieces):
            mdl.add_constr({t_lap[j]: 1.0, dtc[j]: -c1, b_lap[j]: -m_lap}, ">=", c0 - m_lap,
                           f"lap_base[{j + 1},{k + 1}]")
        for k, (c1, c0) in enumerate(maps.base.pieces):
            row = {t_lap[j]: 1.0, dtc[j]: -c1, b_lap[j]: -c0}
            if j == n - 1 and t_in > 0:
                row[b_lap[j]] -= t_in
                row[b_pit[-1]] = -t_in
            mdl.add_constr(row, ">=", -t_in if (j == n - 1 and t_in > 0) else 0.0, f"lap_hull[{j + 1},{k + 1}]")
        mdl.add_constr({t_fc[j + 1]: 1.0, t_fc[j]: -1.0, dtc[j]: -1.0}, "==", 0.0, f"t_fc_rec[{j + 1}]")
        if j + 1 < n:
            mdl.add_constr({b_lap[j + 1]: 1.0, b_lap[j]: -1.0}, ">=", 0.0, f"b_lap_order[{j + 1}]")
    for k, (c1, c0) in enumerate(maps.inlap.pieces):
        mdl.add_constr({t_lap[n - 1]: 1.0, dtc[n - 1]: -c1, b_lap[n - 1]: -m_lap, b_pit[-1]: -m_lap},
                       ">=", c0 - 2 * m_lap, f"lap_in[{k + 1}]")
    mdl.add_constr({t_fc[0]: 1.0}, "==", t_fc0, "t_fc_init")
    # charging after the current stint only if another stint follows
    mdl.add_constr({t_chg0: 1.0, t_fc[n]: -1.0, b_pit[-1]: -tcmax}, ">=", -tcmax, "charge_current")
    mdl.add_constr({t_entry: 1.0, b_pit[-1]: -t_in, b_lap[n - 1]: t_in}, ">=", 0.0, "pit_entry")
    if not allow_immediate_stop:
        mdl.add_constr({b_pit[-1]: 1.0, b_lap[n - 1]: -1.0}, "<=", 0.0, "no_immediate_stop")
    link = {t_tot[0]: 1.0, t_chg0: -1.0, t_entry: -1.0}
    for j in range(n):
        link[t_lap[j]] = -1.0
    mdl.add_constr(link, "==", 0.0, "t_tot_link")

    # future stints, stint basis
    for i in range(n_st):
        last = i == n_st - 1
        mdl.add_constr({n_laps_v[i]: 1.0, b_pit[i]: -n_max}, "<=", 0.0, f"N_gate[{i + 1}]")
        if i + 1 < n_st:
            mdl.add_constr({b_pit[i + 1]: 1.0, b_pit[i]: -1.0}, ">=", 0.0, f"b_pit_order[{i + 1}]")
        if last:
            mdl.add_constr({t_tot[i + 1]: 1.0, t_tot[i]: -1.0, ts_v[i]: -1.0}, "==", 0.0, f"t_tot_rec[{i + 1}]")
            mdl.add_constr({n_laps_v[i]: 1.0}, "<=", tcmax / d_lo, f"N_final_energy[{i + 1}]")
            mdl.add_generator(FinalStintCutGenerator(f"final_stint[{i + 1}]", stm, n_laps_v[i], ts_v[i],
                                                     b_pit[i], m_final, mdl))
            d = stm.d_sf
            if d[0] >= 0 and d[2] >= 0 and d[1] ** 2 <= 4 * d[0] * d[2]:
                mdl.add_generator(PerspectiveFinalCutGenerator(f"final_stint[{i + 1}]", stm, n_laps_v[i],
                                                               ts_v[i], b_pit[i], mdl))
        else:
            mdl.add_constr({t_tot[i + 1]: 1.0, t_tot[i]: -1.0, ts_v[i]: -1.0, tu_v[i]: -1.0}, "==", 0.0,
                           f"t_tot_rec[{i + 1}]")
            mdl.add_constr({tu_v[i]: 1.0, tc_v[i]: -1.0, b_pit[i]: -tcmax}, ">=", -tcmax, f"charge_used[{i + 1}]")
            mdl.add_constr({tc_v[i]: 1.0, n_laps_v[i]: -d_lo}, ">=", 0.0, f"tc_lo[{i + 1}]")
            mdl.add_constr({tc_v[i]: 1.0, n_laps_v[i]: -d_hi, b_pit[i]: tcmax}, "<=", tcmax, f"tc_hi[{i + 1}]")
            mdl.add_generator(StintCutGenerator(f"stint[{i + 1}]", stm, n_laps_v[i], tc_v[i], ts_v[i],
                                                b_pit[i], m_stint, mdl))
            # a skipped stint pins its charge time at eps so the perspective row is valid
            mdl.add_constr({tc_v[i]: 1.0, b_pit[i]: -(tcmax - EPS_T_CHARGE)}, "<=", EPS_T_CHARGE, f"tc_gate[{i + 1}]")
            mdl.add_generator(PerspectiveStintCutGenerator(f"stint[{i + 1}]", stm, n_laps_v[i], tc_v[i],
                                                           ts_v[i], b_pit[i], EPS_T_CHARGE, mdl))

    obj = {j: cfg.s_lap for j in b_lap}
    for j in n_laps_v:
        obj[j] = cfg.s_lap
    mdl.set_objective(obj, "max")
    if force_inlap:
        mdl = mdl.with_bounds({b_lap[0]: (1, 1), b_pit[-1]: (1, 1)})
    return mdl


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------


_TIME_VARS = ("t_lap", "ts", "tu", "t_chg0", "t_entry")
_POLISH_SLACK = (1e-9, 1e-7, 1e-6)


def _polish(model: LinearModel, sol: MipSolution) -> MipSolution:
    """Binaries fixed, distance held at the optimum, total time minimised.

    Makes every lap and stint-time constraint active at the returned point.
    """
    lb, ub = model.bounds()
    for j in model.binaries:
        lb[j] = ub[j] = round(sol.x[j])
    obj = sol.objective
    cost = {j: 1.0 for j, name in enumerate(model.names()) if name.split("[")[0] in _TIME_VARS}
    # The B&B point satisfies the cuts to FEAS_TOL only, so the floor may need slack.
    for rel in _POLISH_SLACK:
        pm = model.copy()
        pm.add_constr(dict(model.objective), ">=", obj - rel * max(1.0, abs(obj)), "distance_floor")
        pm.set_objective(cost, "min")
        res, _ = solve_convex(pm, lb, ub, [], max_rounds=500, tol=1e-8)
        if res.status == "optimal":
            break
    if res.status != "optimal":
        log.warning("polish step ended with status %s; keeping branch-and-bound point", res.status)
        return sol
    x = res.x
    for j in model.binaries:
        x[j] = float(round(x[j]))
    return MipSolution("optimal", x, float(model.objective_vector() @ x), sol.nodes, sol.cuts,
                       sol.wall_time + res.wall_time, sol.lp_iterations + res.lp_iterations, sol.bound)


def _extract(model: LinearModel, sol: MipSolution, meas: EgoMeasurement, cfg: RaceConfig,
             maps: MapSet) -> StrategyPlan:
    names = model.names()
    x = sol.x

    def series(prefix):
        return np.array([x[j] for j, nm in enumerate(names) if nm.startswith(prefix + "[")])

    b_lap = np.rint(series("b_lap")).astype(int)
    b_pit = np.rint(series("b_pit")).astype(int)
    dtc = np.where(b_lap == 1, series("dtc"), 0.0)
    t_fc = float(meas.t_fc_meas) + np.concatenate([[0.0], np.cumsum(dtc)])
    n_st = len(b_pit)
    tc = np.full(n_st, maps.t_charge_max)
    tc[:-1] = series("tc")
    n_l = np.where(b_pit == 1, np.maximum(series("N"), 0.0), 0.0)
    tc = np.where(b_pit == 1, tc, EPS_T_CHARGE)
    ts = np.where(b_pit == 1, series("ts"), 0.0)
    plan = StrategyPlan(
        status="optimal", objective=float(sol.objective), dt_charge=dtc, b_lap=b_lap,
        t_lap=np.where(b_lap == 1, series("t_lap"), 0.0), t_fc=t_fc, n_laps_stint=n_l,
        t_charge_stint=tc, b_pit=b_pit, t_stint=ts, t_charge_current=float(x[model.var("t_chg0")]),
        t_entry=float(x[model.var("t_entry")]), t_tot=series("t_tot"), t_lap_ref=np.zeros(len(b_lap)),
        e_b_ref=np.zeros(len(b_lap)), t_meas=float(meas.t_meas), t_fc_meas=float(meas.t_fc_meas),
        s_lap=float(cfg.s_lap), nodes=sol.nodes, cuts=sol.cuts, wall_time=sol.wall_time)
    plan.t_lap_ref, plan.e_b_ref = plan_references(plan, maps)
    return plan


def infeasible_plan(meas: EgoMeasurement, cfg: RaceConfig, maps: MapSet, message: str,
                    n_laps: int | None = None) -> StrategyPlan:
    """Coast-to-pit fallback: nothing driven, zero references."""
    n = int(n_laps or cfg.n_laps)
    s = int(cfg.n_stops)
    z = np.zeros(n)
    e0 = charge_time_to_energy(maps.charge, min(max(meas.t_fc_meas, 0.0), maps.t_charge_max))
    return StrategyPlan("infeasible", 0.0, z.copy(), np.zeros(n, dtype=int), z.copy(),
                        np.full(n + 1, float(meas.t_fc_meas)), np.zeros(s), np.full(s, EPS_T_CHARGE),
                        np.zeros(s, dtype=int), np.zeros(s), 0.0, 0.0, np.zeros(s + 1), z.copy(),
                        np.full(n, e0), float(meas.t_meas), float(meas.t_fc_meas), float(cfg.s_lap),
                        message=message)


def solve_strategy(meas: EgoMeasurement, cfg: RaceConfig, maps: MapSet, force_inlap: bool = False,
                   node_limit: int = 20000, round_stints: bool = False,
                   allow_immediate_stop: bool = True, allow_stops: bool = True) -> StrategyPlan:
    """Globally optimal plan (within solver tolerances) for the current state.

    ``round_stints`` floors the non-final stint lengths and re-solves with
    them fixed; the rounding loss is stored in ``plan.extra``.
    """
    model = build_problem(meas, cfg, maps, force_inlap, allow_immediate_stop, allow_stops)
    sol = solve_mip(model, node_limit=node_limit)
    if sol.status != "optimal":
        t_rem = cfg.t_race - meas.t_meas
        msg = (f"{sol.status}: no plan satisfies t_tot <= t_race - t_meas = {t_rem:.6g} s"
               f" with t_fc_meas = {meas.t_fc_meas:.6g} s")
        log.info("strategy solve %s", msg)
        return infeasible_plan(meas, cfg, maps, msg, 1 if force_inlap else cfg.n_laps)
    sol = _polish(model, sol)
    plan = _extract(model, sol, meas, cfg, maps)
    if round_stints:
        plan = _round_stints(model, sol, plan, meas, cfg, maps, node_limit)
    return plan


def _round_stints(model, sol, plan, meas, cfg, maps, node_limit):
    fixed = {}
    for i in range(len(plan.b_pit) - 1):
        j = model.var(f"N[{i + 1}]")
        v = math.floor(sol.x[j] + 1e-6)
        fixed[j] = (v, v)
    if not fixed:
        plan.extra["rounding_gap"] = 0.0
        return plan
    rm = model.with_bounds(fixed)
    rs = solve_mip(rm, node_limit=node_limit)
    if rs.status != "optimal":
        plan.extra["rounding_gap"] = float("nan")
        return plan
    rs = _polish(rm, rs)
    rounded = _extract(rm, rs, meas, cfg, maps)
    rounded.extra["rounding_gap"] = plan.objective - rounded.objective
    return rounded


def solve_forced_inlap(meas: EgoMeasurement, cfg: RaceConfig, maps: MapSet, node_limit: int = 20000) -> StrategyPlan:
    """Best plan when the lap now starting must end in the pit lane."""
    return solve_strategy(meas, cfg, maps, force_inlap=True, node_limit=node_limit)


def solve_final_stint(meas: EgoMeasurement, cfg: RaceConfig, maps: MapSet) -> StrategyPlan:
    """Plan for the last stint once it is under way.

    No stop is left, so the remaining laps share the remaining charge time
    evenly (optimal for a convex lap map) and the lap count N solves
    N * L(t_c / N) = t_race - t_meas. N is fractional: the last lap is
    still in progress at the flag.
    """
    t_rem = max(cfg.t_race - meas.t_meas, 0.0)
    tc = max(maps.t_charge_max - meas.t_fc_meas, 0.0)
    d_lo, d_hi = maps.base.domain
    n_hi = tc / d_lo
    if n_hi <= 0.0 or t_rem <= 0.0:
        return infeasible_plan(meas, cfg, maps, "final stint: no charge or time left", 1)

    def budget(n):
        return min(d_hi, tc / n)

    def elapsed(n):
        return n * float(eval_lap_time(maps.base, budget(n)))

    if elapsed(n_hi) <= t_rem:
        n_laps = n_hi
    else:
        lo, hi = 0.0, n_hi
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if elapsed(mid) <= t_rem:
                lo = mid
            else:
                hi = mid
        n_laps = lo
    if n_laps <= 1e-9:
        return infeasible_plan(meas, cfg, maps, "final stint: no lap can be started", 1)
    n = max(1, int(math.ceil(n_laps - 1e-9)))
    d = budget(n_laps)
    t_lap = float(eval_lap_time(maps.base, d))
    dtc = np.full(n, d)
    s = int(cfg.n_stops)
    plan = StrategyPlan(
        status="optimal", objective=float(cfg.s_lap * n_laps), dt_charge=dtc, b_lap=np.ones(n, dtype=int),
        t_lap=np.full(n, t_lap), t_fc=float(meas.t_fc_meas) + np.concatenate([[0.0], np.cumsum(dtc)]),
        n_laps_stint=np.zeros(s), t_charge_stint=np.full(s, EPS_T_CHARGE), b_pit=np.zeros(s, dtype=int),
        t_stint=np.zeros(s), t_charge_current=0.0, t_entry=0.0,
        t_tot=np.concatenate([[n_laps * t_lap], np.zeros(s)]), t_lap_ref=np.zeros(n), e_b_ref=np.zeros(n),
        t_meas=float(meas.t_meas), t_fc_meas=float(meas.t_fc_meas), s_lap=float(cfg.s_lap),
        extra={"mode": "final-stint", "n_laps": n_laps})
    plan.t_lap_ref, plan.e_b_ref = plan_references(plan, maps)
    return plan


def plan_references(plan: StrategyPlan, maps: MapSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-lap lap-time reference and end-of-lap battery-energy reference."""
    n = len(plan.b_lap)
    t_ref = np.zeros(n)
    e_ref = np.zeros(n)
    tcmax = maps.t_charge_max
    for j in range(n):
        if plan.b_lap[j]:
            lap_map = maps.inlap if (j == n - 1 and plan.b_pit[-1]) else maps.base
            t_ref[j] = eval_lap_time(lap_map, plan.dt_charge[j])
        e_ref[j] = charge_time_to_energy(maps.charge, min(max(plan.t_fc[j + 1], 0.0), tcmax))
    return t_ref, e_ref


def lap_activity_residual(plan: StrategyPlan, maps: MapSet) -> float:
    """Largest gap between planned lap times and the map at the planned budget."""
    t_ref, _ = plan_references(plan, maps)
    mask = plan.b_lap == 1
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(plan.t_lap[mask] - t_ref[mask])))


def stint_activity_residual(plan: StrategyPlan, maps: MapSet) -> float:
    """Same check for driven future stints against the stint-time model."""
    worst = 0.0
    last = len(plan.b_pit) - 1
    for i in plan.driven_stints:
        if i == last:
            f = eval_final_stint_time(maps.stint, plan.n_laps_stint[i])
        else:
            f = eval_stint_time(maps.stint, plan.n_laps_stint[i], plan.t_charge_stint[i])
        worst = max(worst, abs(plan.t_stint[i] - f))
    return worst


def advance_measurement(plan: StrategyPlan, meas: EgoMeasurement) -> EgoMeasurement:
    """State after driving the next planned lap exactly as planned."""
    j = plan.first_driven
    if j is None:
        raise ValueError("plan has no driven lap")
    return EgoMeasurement(meas.t_meas + float(plan.t_lap_ref[j]), float(plan.t_fc[j + 1]),
                          meas.lap + 1, 0.0, 1)
