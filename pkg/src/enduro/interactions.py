"""Mini-sector interaction decisions.

At each mini-sector (MS) boundary the ego car may be about to pass a car
ahead (Attack), be passed by a car behind (Defend) or rejoin from the pit
lane next to a competitor (PitExit). Every available action gets a time
penalty; the cheapest one is taken.

Gap convention: ``dt_p`` is the predicted lead of the ego car over the
competitor at the end of the MS under free-flow plans, so it is positive
when the ego car virtually passes a car ahead and negative when a follower
virtually passes the ego car. The desired gap ``dt_d(dE)`` is ``dt_p`` plus
the MS time the ego gains by spending ``dE`` joules on top of its plan.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models import (ChargeModel, DomainError, LapTimeMap, MsTradeoffCurve, energy_to_charge_time,
                     eval_lap_time)

ATTACK, DEFEND, PIT_EXIT = "Attack", "Defend", "PitExit"
KINDS = (ATTACK, DEFEND, PIT_EXIT)

OVERTAKE = "Overtake"
STAY_BEHIND = "StayBehind"
BOX = "Box"
BLOCK = "Block"
LET_THROUGH = "LetThrough"
SHORT_PIT_STOP = "ShortPitStop"
OUTLAP_OVERTAKE = "OutlapOvertake"
NO_ACTION = "NoAction"

# lower rank wins exact ties
TIE_RANK = {STAY_BEHIND: 0, LET_THROUGH: 0, OVERTAKE: 1, BLOCK: 1, OUTLAP_OVERTAKE: 1,
            BOX: 2, SHORT_PIT_STOP: 2, NO_ACTION: 3}

ACTION_SETS = {ATTACK: (OVERTAKE, STAY_BEHIND, BOX), DEFEND: (BLOCK, LET_THROUGH, BOX),
               PIT_EXIT: (SHORT_PIT_STOP, OUTLAP_OVERTAKE)}

P_FLOOR = 1e-3
GRID_POINTS = 101
GOLDEN_TOL = 1e-3  # J


# ---------------------------------------------------------------------------
# Track and probability data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MiniSector:
    index: int
    start: float
    end: float
    share: float


def make_mini_sectors(shares: Sequence[float], bounds: Sequence[float] | None = None) -> list[MiniSector]:
    """Contiguous mini-sectors from time shares (and optional lap-fraction bounds).

    Without ``bounds`` the lap-fraction boundaries follow the cumulative shares.
    """
    w = np.asarray(shares, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("at least one mini-sector share is required")
    if np.any(w <= 0):
        raise ValueError("mini-sector shares must be positive")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"mini-sector shares must sum to 1, got {w.sum():.12g}")
    if bounds is None:
        edges = np.concatenate([[0.0], np.cumsum(w)])
        edges[-1] = 1.0
    else:
        edges = np.asarray(bounds, dtype=float)
        if edges.shape != (w.size + 1,) or edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
            raise ValueError("mini-sector bounds must increase from 0 to 1 with one more entry than shares")
    return [MiniSector(m + 1, float(edges[m]), float(edges[m + 1]), float(w[m])) for m in range(w.size)]


@dataclass(frozen=True)
class ProbabilityModel:
    """Overtake/defend success probabilities tabulated per MS over the desired gap.

    Rows of ``p_ov``/``p_def`` belong to MS 1..n_ms; values between grid
    points are interpolated linearly and held constant beyond the ends.
    """

    grid: np.ndarray
    p_ov: np.ndarray
    p_def: np.ndarray
    p_floor: float = P_FLOOR

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        ov = np.atleast_2d(np.asarray(self.p_ov, dtype=float))
        df = np.atleast_2d(np.asarray(self.p_def, dtype=float))
        if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) <= 0):
            raise ValueError("probability grid must be strictly increasing")
        for name, tab in (("p_ov", ov), ("p_def", df)):
            if tab.shape[1] != g.size:
                raise ValueError(f"{name} rows must have one value per grid point")
            if np.any(~np.isfinite(tab)) or np.any(tab < 0) or np.any(tab > 1):
                raise ValueError(f"{name} values must lie in [0, 1]")
        if ov.shape[0] != df.shape[0]:
            raise ValueError("p_ov and p_def must cover the same mini-sectors")
        if np.any(np.diff(ov, axis=1) < 0):
            raise ValueError("p_ov must be non-decreasing in the desired gap")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "p_ov", ov)
        object.__setattr__(self, "p_def", df)

    @property
    def n_ms(self) -> int:
        return self.p_ov.shape[0]

    def _lookup(self, tab, dt_d, m):
        if not 1 <= m <= tab.shape[0]:
            raise IndexError(f"mini-sector {m} outside 1..{tab.shape[0]}")
        p = float(np.interp(dt_d, self.grid, tab[m - 1]))
        return min(max(p, self.p_floor), 1.0)

    def p_overtake(self, dt_d: float, m: int) -> float:
        return self._lookup(self.p_ov, dt_d, m)

    def p_defend(self, dt_d: float, m: int) -> float:
        return self._lookup(self.p_def, dt_d, m)

    @classmethod
    def constant(cls, p_ov: float, p_def: float | None = None, n_ms: int = 9) -> "ProbabilityModel":
        p_def = p_ov if p_def is None else p_def
        return cls(np.array([0.0]), np.full((n_ms, 1), p_ov), np.full((n_ms, 1), p_def))

    @classmethod
    def logistic(cls, n_ms: int = 9, ov_scale: Sequence[float] | None = None, width: float = 0.3,
                 center_ov: float = 0.3, center_def: float = 0.0, grid: np.ndarray | None = None
                 ) -> "ProbabilityModel":
        """Logistic curves in the desired gap, scaled per MS (overtaking-friendly sectors near 1)."""
        g = np.linspace(-2.0, 3.0, 51) if grid is None else np.asarray(grid, dtype=float)
        scale = np.ones(n_ms) if ov_scale is None else np.asarray(ov_scale, dtype=float)
        if scale.shape != (n_ms,) or np.any(scale <= 0) or np.any(scale > 1):
            raise ValueError("ov_scale needs one value in (0, 1] per mini-sector")
        ov = scale[:, None] / (1.0 + np.exp(-(g[None, :] - center_ov) / width))
        # a defender does better where attacking is hard
        df = 1.0 - (1.0 - 1.0 / (1.0 + np.exp(-(g[None, :] - center_def) / width))) * scale[:, None]
        return cls(g, ov, df)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ms", "dt_d", "p_ov", "p_def"])
            for m in range(self.n_ms):
                for k, x in enumerate(self.grid):
                    w.writerow([m + 1, repr(float(x)), repr(float(self.p_ov[m, k])),
                                repr(float(self.p_def[m, k]))])

    @classmethod
    def from_csv(cls, path, p_floor: float = P_FLOOR) -> "ProbabilityModel":
        rows: dict[int, list] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"ms", "dt_d", "p_ov", "p_def"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing probability columns {sorted(missing)}")
            for line, r in enumerate(reader, start=2):
                try:
                    rows.setdefault(int(r["ms"]), []).append((float(r["dt_d"]), float(r["p_ov"]),
                                                              float(r["p_def"])))
                except ValueError as exc:
                    raise ValueError(f"{path}:{line}: {exc}") from None
        if not rows:
            raise ValueError(f"{path}: no probability rows")
        ms = sorted(rows)
        if ms != list(range(1, len(ms) + 1)):
            raise ValueError(f"{path}: mini-sectors must be numbered 1..n without gaps")
        grids = [tuple(x for x, _, _ in sorted(rows[m])) for m in ms]
        if any(gr != grids[0] for gr in grids):
            raise ValueError(f"{path}: every mini-sector must use the same dt_d grid")
        ov = np.array([[p for _, p, _ in sorted(rows[m])] for m in ms])
        df = np.array([[p for _, _, p in sorted(rows[m])] for m in ms])
        return cls(np.array(grids[0]), ov, df, p_floor)


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChargeSensitivity:
    """Extra charge time caused by spending ``dE`` joules more than planned.

    Negative ``dE`` (energy saved) gives a negative value. The energy state
    is clamped to the battery window.
    """

    charge: ChargeModel
    energy: float

    def __call__(self, de: float) -> float:
        cm = self.charge
        e0 = min(max(self.energy, cm.e_min), cm.e_max)
        e1 = min(max(e0 - de, cm.e_min), cm.e_max)
        return energy_to_charge_time(cm, e1) - energy_to_charge_time(cm, e0)


def _zero(_de: float) -> float:
    return 0.0


@dataclass(frozen=True)
class InteractionContext:
    """Everything a penalty needs for one interaction in MS ``m``."""

    kind: str
    m: int
    dt_p: float
    dt_p_next: float = 0.0
    t_gap_min: float = 0.5
    t_rl: float = 0.0
    t_buff_sb: float = 0.0
    probs: ProbabilityModel | None = None
    curve: MsTradeoffCurve | None = None
    charge_delta: Callable[[float], float] = _zero
    # energy window searched per action (J)
    de_max: float | None = None
    de_sb_min: float = 0.0
    de_lt_min: float = 0.0
    # let-through horizon
    t_target: tuple = ()
    t_ms_plan: tuple = ()
    reinteraction: bool = True
    # pit exit
    lap_map: LapTimeMap | None = None
    dt_charge_bar: tuple = ()
    t_lap_bar: tuple = ()
    dt_charge_sp: float = 0.0
    competitor: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if not self.t_gap_min > 0:
            raise ValueError("t_gap_min must be positive")
        if self.t_rl < 0:
            raise ValueError("t_rl must be non-negative")
        if len(self.t_target) != len(self.t_ms_plan):
            raise ValueError("t_target and t_ms_plan must have the same length")
        if len(self.dt_charge_bar) != len(self.t_lap_bar):
            raise ValueError("dt_charge_bar and t_lap_bar must have the same length")

    def dt_d(self, de: float) -> float:
        if self.curve is None or de == 0.0:
            return self.dt_p
        return self.dt_p - self.curve(de)

    def _probs(self) -> ProbabilityModel:
        if self.probs is None:
            raise ValueError("context has no probability model")
        return self.probs


# ---------------------------------------------------------------------------
# Penalties
# ---------------------------------------------------------------------------


def penalty_overtake(ctx: InteractionContext, de: float) -> float:
    """Expected time penalty of attempting the pass with ``de`` J extra energy."""
    dt_d = ctx.dt_d(de)
    p = ctx._probs().p_overtake(dt_d, ctx.m)
    cost = ctx.charge_delta(de) + ctx.t_rl
    gain = (dt_d - ctx.dt_p) * p
    loss = (ctx.dt_p + ctx.t_gap_min) * (1.0 - p)
    return (cost - gain + loss) / p


def penalty_stay_behind(ctx: InteractionContext, de: float) -> float:
    return ctx.charge_delta(de) + ctx.dt_p + ctx.t_gap_min + ctx.t_buff_sb + ctx.dt_p_next


def penalty_block(ctx: InteractionContext, de: float) -> float:
    dt_d = ctx.dt_d(de)
    p = ctx._probs().p_defend(dt_d, ctx.m)
    cost = ctx.charge_delta(de) + ctx.t_rl
    gain = dt_d * p
    loss = max(ctx.dt_p + ctx.t_gap_min, 0.0) * (1.0 - p)
    return (cost - gain + loss) / p


def penalty_let_through(ctx: InteractionContext, de: float) -> float:
    """Head loss plus the cost of following the competitor for the next MSs.

    The saved energy ``de`` is spread evenly over the horizon.
    """
    k = len(ctx.t_target)
    total = max(ctx.t_gap_min + ctx.dt_p, 0.0)
    for target, plan in zip(ctx.t_target, ctx.t_ms_plan):
        total += target - plan + ctx.charge_delta(de / k)
    return total


def penalty_short_pitstop(ctx: InteractionContext) -> float:
    """Lap-time cost of spreading a charge shortfall over the coming stint.

    Infinite when a reduced lap budget leaves the lap-map domain.
    """
    n = len(ctx.dt_charge_bar)
    if ctx.dt_charge_sp == 0.0 or n == 0:
        return 0.0
    if ctx.lap_map is None:
        raise ValueError("short pit stop needs a lap map")
    cut = ctx.dt_charge_sp / n
    total = 0.0
    for d, t_ref in zip(ctx.dt_charge_bar, ctx.t_lap_bar):
        try:
            total += eval_lap_time(ctx.lap_map, d - cut) - t_ref
        except DomainError:
            return math.inf
    return total


def update_sb_buffer(buffer: float, decision: "Decision") -> float:
    """Accumulated stay-behind loss; a negative penalty (net energy gain) adds nothing."""
    if decision.action == STAY_BEHIND:
        return buffer + max(decision.penalty, 0.0)
    return 0.0


# ---------------------------------------------------------------------------
# Energy optimisation and action choice
# ---------------------------------------------------------------------------

_ENERGY_PENALTIES = {OVERTAKE: penalty_overtake, OUTLAP_OVERTAKE: penalty_overtake, BLOCK: penalty_block,
                     STAY_BEHIND: penalty_stay_behind, LET_THROUGH: penalty_let_through}


def energy_window(action: str, ctx: InteractionContext, curve: MsTradeoffCurve | None = None):
    """Interval of energy deviations searched for ``action``."""
    curve = curve if curve is not None else ctx.curve
    if action in (OVERTAKE, OUTLAP_OVERTAKE, BLOCK):
        hi = ctx.de_max if ctx.de_max is not None else (curve.domain[1] if curve is not None else 0.0)
        if curve is not None:
            hi = min(hi, curve.domain[1])
        return 0.0, max(0.0, hi)
    if action == STAY_BEHIND:
        lo = ctx.de_sb_min
    elif action == LET_THROUGH:
        lo = ctx.de_lt_min
    else:
        return 0.0, 0.0
    if curve is not None:
        lo = max(lo, curve.domain[0])
    return min(0.0, lo), 0.0


def _golden(f, a, b, tol):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def optimize_penalty(action: str, ctx: InteractionContext, curve: MsTradeoffCurve | None = None
                     ) -> tuple[float, float]:
    """Best energy deviation and penalty for ``action``.

    A 101-point grid over the action's energy window locates the best
    bracket; golden-section search refines it to ``GOLDEN_TOL``. The result
    is never worse than the best grid point.
    """
    if curve is not None and curve is not ctx.curve:
        ctx = _with(ctx, curve=curve)
    func = _ENERGY_PENALTIES.get(action)
    if func is None:
        raise ValueError(f"{action} has no energy-dependent penalty")
    lo, hi = energy_window(action, ctx)
    if not hi > lo:
        return 0.0, func(ctx, 0.0)
    grid = np.linspace(lo, hi, GRID_POINTS)
    vals = np.array([func(ctx, float(x)) for x in grid])
    k = int(np.argmin(vals))
    best_x, best_v = float(grid[k]), float(vals[k])
    a, b = float(grid[max(k - 1, 0)]), float(grid[min(k + 1, GRID_POINTS - 1)])
    x, v = _golden(lambda e: func(ctx, e), a, b, GOLDEN_TOL)
    if v < best_v:
        best_x, best_v = x, v
    return best_x, best_v


def _with(ctx: InteractionContext, **kw) -> InteractionContext:
    from dataclasses import replace
    return replace(ctx, **kw)


@dataclass
class Decision:
    kind: str
    action: str
    de: float
    penalty: float
    table: dict = field(default_factory=dict)
    energies: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "action": self.action, "de": self.de, "penalty": self.penalty,
                "table": dict(self.table), "energies": dict(self.energies), "note": self.note}


def choose_action(kind: str, table: dict, energies: dict | None = None) -> Decision:
    """Cheapest action of ``table``; exact ties go to the lower ``TIE_RANK``."""
    if kind not in KINDS:
        raise ValueError(f"unknown interaction kind {kind!r}")
    allowed = set(ACTION_SETS[kind])
    bad = set(table) - allowed
    if bad:
        raise ValueError(f"actions {sorted(bad)} not available for {kind}")
    finite = {a: p for a, p in table.items() if not math.isnan(p)}
    if not finite:
        raise ValueError("empty action table")
    action = min(finite, key=lambda a: (finite[a], TIE_RANK[a], a))
    energies = energies or {}
    return Decision(kind, action, float(energies.get(action, 0.0)), float(finite[action]), dict(table),
                    dict(energies))


def decide(ctx: InteractionContext, box_penalty: float | None = None,
           short_pit_available: bool = True) -> Decision:
    """Penalty table for the context's interaction kind and its cheapest action.

    ``box_penalty`` of None leaves Box out (not in the final MS or forced
    solve infeasible). A Defend with no re-interaction in the let-through
    horizon lets the competitor pass outright.
    """
    table, energies = {}, {}
    if ctx.kind == ATTACK:
        for a in (OVERTAKE, STAY_BEHIND):
            energies[a], table[a] = optimize_penalty(a, ctx)
    elif ctx.kind == DEFEND:
        for a in (BLOCK, LET_THROUGH):
            energies[a], table[a] = optimize_penalty(a, ctx)
        if not ctx.reinteraction:
            dec = choose_action(DEFEND, {LET_THROUGH: table[LET_THROUGH]}, energies)
            dec.table = table
            dec.note = "no re-interaction within the let-through horizon"
            return dec
    else:
        energies[OUTLAP_OVERTAKE], table[OUTLAP_OVERTAKE] = optimize_penalty(OUTLAP_OVERTAKE, ctx)
        if short_pit_available:
            sp = penalty_short_pitstop(ctx)
            if math.isfinite(sp):
                table[SHORT_PIT_STOP] = sp
                energies[SHORT_PIT_STOP] = 0.0
    if box_penalty is not None and ctx.kind in (ATTACK, DEFEND) and math.isfinite(box_penalty):
        table[BOX] = float(box_penalty)
        energies[BOX] = 0.0
    return choose_action(ctx.kind, table, energies)


def baseline_decision(ctx: InteractionContext) -> Decision:
    """Always-attack comparison policy: Overtake, Block or out-lap overtake."""
    action = {ATTACK: OVERTAKE, DEFEND: BLOCK, PIT_EXIT: OUTLAP_OVERTAKE}[ctx.kind]
    de, pen = optimize_penalty(action, ctx)
    return Decision(ctx.kind, action, de, pen, {action: pen}, {action: de})


# ---------------------------------------------------------------------------
# Detection and Box evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarState:
    """A competitor's race distance (laps) now and its predicted arrival times."""

    ident: str
    distance: float
    t_end: float  # when it reaches the end of the ego's upcoming MS
    t_end_next: float  # ... and the end of the MS after that


def detect_interaction(ego_distance: float, ego_t_end: float, ego_t_end_next: float,
                       cars: Sequence[CarState], horizon: float, skip: Sequence[str] = (),
                       margin: float = 0.0):
    """Attack or Defend trigger for the upcoming MS, or None.

    ``ego_t_end``/``ego_t_end_next`` are the free-flow arrival times at the
    end of the upcoming MS and the one after. Only cars whose predicted gap
    is within ``horizon`` seconds are considered. A car ahead triggers
    Attack when the ego's free-flow arrival at the end of the upcoming MS is
    less than ``margin`` seconds behind it (``margin=0`` means a virtual
    pass); a pass that only happens in the MS after is left to the next
    boundary, where it can be completed. A follower virtually passing the
    ego triggers Defend. The closest car wins and Attack takes precedence.

    Returns ``(kind, car, dt_p, dt_p_next)``.
    """
    attack, defend = None, None
    for car in cars:
        if car.ident in skip:
            continue
        gap = car.t_end - ego_t_end
        if abs(gap) > horizon:
            continue
        ahead = car.distance > ego_distance
        if ahead and gap > -margin:
            if attack is None or car.distance < attack.distance:
                attack = car
        elif not ahead and gap < 0:
            if defend is None or car.distance > defend.distance:
                defend = car
    if attack is not None:
        return ATTACK, attack, attack.t_end - ego_t_end, attack.t_end_next - ego_t_end_next
    if defend is not None:
        return DEFEND, defend, defend.t_end - ego_t_end, defend.t_end_next - ego_t_end_next
    return None


def box_time_penalty(unforced_objective: float, forced_objective: float, s_lap: float, t_lap_ref: float) -> float:
    """Distance difference between two plans as time at the reference pace."""
    return (unforced_objective - forced_objective) / s_lap * t_lap_ref


def evaluate_box(meas, cfg, maps, unforced_objective: float, t_lap_ref: float, unforced_plan=None):
    """Time-equivalent cost of making the current lap an in-lap.

    Compares ``unforced_objective`` with the forced-in-lap optimum; a
    negative value means boxing covers more distance. Returns None when the
    forced problem is infeasible (Box unavailable).
    """
    from .strategy import solve_forced_inlap

    if unforced_plan is not None and unforced_plan.ok and unforced_plan.pits_after_current \
            and unforced_plan.driven_laps == 1:
        return 0.0
    forced = solve_forced_inlap(meas, cfg, maps)
    if not forced.ok:
        return None
    return box_time_penalty(unforced_objective, forced.objective, cfg.s_lap, t_lap_ref)


def load_probability_table(path) -> ProbabilityModel:
    return ProbabilityModel.from_csv(Path(path))
