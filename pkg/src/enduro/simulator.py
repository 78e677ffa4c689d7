"""Deterministic mini-sector race simulation.

Competitors replay fixed lap-time traces; the ego car re-plans at every
lap start and takes interaction decisions at every mini-sector (MS)
boundary. Interaction outcomes are resolved deterministically: the more
probable outcome happens.

Distances are counted in mini-sectors from the start line. Pit boxes sit
on the line: an in-lap ends at the line, the car charges, and the out-lap
offset is paid before it crosses the line again.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import interactions as ia
from .models import (GroundTruthParams, MapSet, charge_time_to_energy, energy_to_charge_time, eval_lap_time,
                     soc_from_charge_time, split_lap_map_to_ms, synth_ground_truth)
from .strategy import (BuildError, EgoMeasurement, RaceConfig, StrategyPlan, solve_final_stint, solve_strategy)

log = logging.getLogger(__name__)

POLICIES = ("optimal", "baseline")


class ScenarioError(ValueError):
    """Scenario file missing fields or violating an invariant."""


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompetitorTrace:
    """Fixed lap times of one competitor; pit time is added at the line after a pit lap."""

    ident: str
    lap_times: tuple
    pit_laps: tuple = ()
    pit_durations: tuple = ()
    start_delay: float = 0.0
    shares: tuple | None = None

    def __post_init__(self):
        if not self.lap_times:
            raise ScenarioError(f"competitor {self.ident!r} has no laps")
        if any(not (t > 0 and math.isfinite(t)) for t in self.lap_times):
            raise ScenarioError(f"competitor {self.ident!r}: lap times must be positive")
        if len(self.pit_laps) != len(self.pit_durations):
            raise ScenarioError(f"competitor {self.ident!r}: one duration per pit lap")
        n = len(self.lap_times)
        for lap, dur in zip(self.pit_laps, self.pit_durations):
            if not 1 <= lap <= n:
                raise ScenarioError(f"competitor {self.ident!r}: pit lap {lap} outside 1..{n}")
            if dur < 0:
                raise ScenarioError(f"competitor {self.ident!r}: negative pit duration")
        if self.start_delay < 0:
            raise ScenarioError(f"competitor {self.ident!r}: negative start delay")

    def boundary_times(self, shares: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        """Arrival and departure time at each MS boundary (index 0 = start).

        The two differ only at the line after a pit lap, where the car waits
        in its box.
        """
        w = np.asarray(self.shares if self.shares is not None else shares, dtype=float)
        if abs(w.sum() - 1.0) > 1e-9:
            raise ScenarioError(f"competitor {self.ident!r}: MS shares must sum to 1")
        pits = dict(zip(self.pit_laps, self.pit_durations))
        arr, dep = [self.start_delay], [self.start_delay]
        t = self.start_delay
        for lap, lt in enumerate(self.lap_times, start=1):
            for k, wm in enumerate(w):
                t += lt * wm
                arr.append(t)
                if k == len(w) - 1:
                    t += pits.get(lap, 0.0)
                dep.append(t)
        return np.array(arr), np.array(dep)


@dataclass(frozen=True)
class EgoInit:
    t_fc: float = 0.0
    start_delay: float = 0.0


@dataclass
class Scenario:
    name: str
    config: RaceConfig
    maps: MapSet
    probs: ia.ProbabilityModel
    sectors: list
    competitors: list
    ego: EgoInit
    t_rl: float
    t_gap_min: float
    in_lap_offset: float
    out_lap_offset: float
    n_fits: int = 10
    digest: str = ""
    path: str = ""
    params: GroundTruthParams | None = None

    @property
    def shares(self) -> np.ndarray:
        return np.array([s.share for s in self.sectors])

    @property
    def n_ms(self) -> int:
        return len(self.sectors)


def _need(table: dict, key: str, where: str):
    if key not in table:
        raise ScenarioError(f"{where}: missing required field '{key}'")
    return table[key]


def _num(table: dict, key: str, where: str, default=None, positive=False, nonneg=False):
    if key not in table:
        if default is None:
            raise ScenarioError(f"{where}: missing required field '{key}'")
        return default
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{where}.{key}: expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ScenarioError(f"{where}.{key}: must be positive, got {v!r}")
    if nonneg and v < 0:
        raise ScenarioError(f"{where}.{key}: must be non-negative, got {v!r}")
    return v


def read_competitors(path, n_ms: int | None = None) -> list[CompetitorTrace]:
    """Competitor CSV: ``id, lap, time, pit, pit_duration``.

    A row with ``lap = 0`` gives the start delay behind the line instead of a
    lap time.
    """
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "lap", "time"} - set(reader.fieldnames or ())
        if missing:
            raise ScenarioError(f"{path}: missing competitor columns {sorted(missing)}")
        for line, r in enumerate(reader, start=2):
            try:
                ident, lap, t = r["id"].strip(), int(r["lap"]), float(r["time"])
                pit = int(r.get("pit") or 0)
                dur = float(r.get("pit_duration") or 0.0)
            except (ValueError, AttributeError) as exc:
                raise ScenarioError(f"{path}:{line}: {exc}") from None
            d = rows.setdefault(ident, {"laps": {}, "pits": [], "start": 0.0})
            if lap == 0:
                d["start"] = t
                continue
            if lap in d["laps"]:
                raise ScenarioError(f"{path}:{line}: duplicate lap {lap} for {ident!r}")
            d["laps"][lap] = t
            if pit:
                d["pits"].append((lap, dur))
    out = []
    for ident in rows:
        d = rows[ident]
        laps = sorted(d["laps"])
        if laps != list(range(1, len(laps) + 1)):
            raise ScenarioError(f"{path}: competitor {ident!r} laps must run 1..n without gaps")
        pits = sorted(d["pits"])
        out.append(CompetitorTrace(ident, tuple(d["laps"][k] for k in laps), tuple(p for p, _ in pits),
                                   tuple(t for _, t in pits), d["start"]))
    return out


def write_competitors(path, traces: Sequence[CompetitorTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lap", "time", "pit", "pit_duration"])
        for tr in traces:
            pits = dict(zip(tr.pit_laps, tr.pit_durations))
            w.writerow([tr.ident, 0, f"{tr.start_delay:.3f}", 0, "0"])
            for lap, lt in enumerate(tr.lap_times, start=1):
                w.writerow([tr.ident, lap, f"{lt:.3f}", int(lap in pits), f"{pits.get(lap, 0.0):.3f}"])


def _digest_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def load_scenario(path) -> Scenario:
    """Read and validate a TOML scenario (competitor and probability CSVs are
    resolved relative to it)."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    base = path.parent
    files = [path]

    track = _need(doc, "track", str(path))
    s_lap = _num(track, "s_lap", "track", positive=True)
    shares = _need(track, "ms_shares", "track")
    try:
        sectors = ia.make_mini_sectors(shares, track.get("ms_bounds"))
    except ValueError as exc:
        raise ScenarioError(f"track.ms_shares: {exc}") from None

    race = _need(doc, "race", str(path))
    try:
        cfg = RaceConfig(t_race=float(_num(race, "t_race", "race", positive=True)), s_lap=float(s_lap),
                         n_stops=int(_num(race, "n_stops", "race", default=1, positive=True)),
                         n_laps=int(_num(race, "n_laps", "race", default=1, positive=True)))
    except BuildError as exc:
        raise ScenarioError(f"race: {exc}") from None

    ego = _need(doc, "ego", str(path))
    n_fits = int(_num(ego, "n_fits", "ego", default=10, positive=True))
    if "maps" in ego:
        maps = MapSet.load(base / ego["maps"])
        params = None
        in_off = float(_num(ego, "in_lap_offset", "ego", nonneg=True))
        out_off = float(_num(ego, "out_lap_offset", "ego", nonneg=True))
    else:
        gt_table = _need(ego, "ground_truth", "ego")
        try:
            params = GroundTruthParams.from_dict(dict(gt_table))
            maps = synth_ground_truth(params).build_maps(n_fits)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"ego.ground_truth: {exc}") from None
        in_off, out_off = params.in_lap_offset, params.out_lap_offset
    t_fc0 = float(_num(ego, "t_fc0", "ego", default=0.0, nonneg=True))
    if t_fc0 > maps.t_charge_max:
        raise ScenarioError(f"ego.t_fc0: {t_fc0} exceeds t_charge_max {maps.t_charge_max:.6g}")
    ego_init = EgoInit(t_fc0, float(_num(ego, "start_delay", "ego", default=0.0, nonneg=True)))

    inter = doc.get("interaction", {})
    t_rl = float(_num(inter, "t_rl", "interaction", default=0.3, nonneg=True))
    t_gap_min = float(_num(inter, "t_gap_min", "interaction", default=0.5, positive=True))

    prob = doc.get("probabilities", {})
    if "file" in prob:
        ppath = base / prob["file"]
        files.append(ppath)
        try:
            probs = ia.ProbabilityModel.from_csv(ppath)
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"probabilities.file: {exc}") from None
    else:
        try:
            probs = ia.ProbabilityModel.logistic(len(sectors), prob.get("ov_scale"),
                                                 float(prob.get("width", 0.3)), float(prob.get("center_ov", 0.3)),
                                                 float(prob.get("center_def", 0.0)))
        except ValueError as exc:
            raise ScenarioError(f"probabilities: {exc}") from None
    if probs.n_ms != len(sectors):
        raise ScenarioError(f"probabilities cover {probs.n_ms} mini-sectors, track has {len(sectors)}")

    comp = doc.get("competitors", {})
    traces: list[CompetitorTrace] = []
    if "file" in comp:
        cpath = base / comp["file"]
        files.append(cpath)
        if not cpath.is_file():
            raise ScenarioError(f"competitors.file: not found: {cpath}")
        traces = read_competitors(cpath)
        overrides = comp.get("shares", {})
        for k, tr in enumerate(traces):
            if tr.ident in overrides:
                w = tuple(float(x) for x in overrides[tr.ident])
                if len(w) != len(sectors) or abs(sum(w) - 1.0) > 1e-9 or min(w) <= 0:
                    raise ScenarioError(f"competitors.shares.{tr.ident}: need {len(sectors)} positive shares summing to 1")
                traces[k] = CompetitorTrace(tr.ident, tr.lap_times, tr.pit_laps, tr.pit_durations,
                                            tr.start_delay, w)
    name = str(doc.get("name", path.stem))
    return Scenario(name, cfg, maps, probs, sectors, traces, ego_init, t_rl, t_gap_min, in_off, out_off,
                    n_fits, _digest_files(files), str(path), params)


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------


@dataclass
class WorldState:
    t: float
    s: int  # completed mini-sectors
    t_fc: float
    n_laps: int
    n_stops: int
    plan: StrategyPlan | None = None
    buffer: float = 0.0
    cooldown: dict = field(default_factory=dict)
    out_lap: bool = False
    finished: bool = False
    pending_outlap: str = ""


MS_FIELDS = ("s", "lap", "ms", "t_start", "t_end", "t_free", "dist_start", "position", "t_fc_start",
             "dtc_plan", "dtc_extra", "t_fc_end", "soc_end", "stop", "stop_time", "t_fc_after_stop", "kind",
             "competitor", "dt_p", "action", "de", "penalty", "outcome", "delay", "table", "note")
LAP_FIELDS = ("lap", "t_start", "t_end", "t_lap", "dt_charge", "t_lap_ref", "inlap", "soc_end", "plan_objective",
              "plan_status", "horizon", "n_stops")


@dataclass
class RaceLog:
    scenario: str
    policy: str
    digest: str
    ms_records: list = field(default_factory=list)
    lap_records: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    competitor_ids: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timing: list = field(default_factory=list)

    def ms_csv(self) -> str:
        return _csv(MS_FIELDS, self.ms_records)

    def laps_csv(self) -> str:
        return _csv(LAP_FIELDS, self.lap_records)

    def positions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "time", "ego"] + list(self.competitor_ids))
        for row in self.positions:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"race_log": out / "race_log.csv", "laps": out / "laps.csv", "positions": out / "positions.csv",
                 "summary": out / "summary.json", "timing": out / "timing.json"}
        files["race_log"].write_text(self.ms_csv())
        files["laps"].write_text(self.laps_csv())
        files["positions"].write_text(self.positions_csv())
        files["summary"].write_text(self.summary_json())
        files["timing"].write_text(json.dumps({"per_ms": self.timing}, indent=1) + "\n")
        return files

    @classmethod
    def read(cls, out_dir) -> "RaceLog":
        d = Path(out_dir)
        summary = json.loads((d / "summary.json").read_text())
        lg = cls(summary.get("scenario", ""), summary.get("policy", ""), summary.get("scenario_digest", ""))
        lg.summary = summary
        lg.ms_records = _read_csv(d / "race_log.csv")
        lg.lap_records = _read_csv(d / "laps.csv")
        return lg

    def time_at_distance(self, dist: float) -> float:
        """Time at which the ego car had covered ``dist`` laps (MS-linear)."""
        for r in self.ms_records:
            if int(r["stop"]):
                continue
            d0 = float(r["dist_start"])
            d1 = d0 + 1.0 / self.summary["n_ms"]
            if d0 - 1e-12 <= dist <= d1 + 1e-12:
                t0 = float(r["t_start"])
                return t0 + (float(r["t_end"]) - t0) * (dist - d0) / (d1 - d0)
        raise ValueError(f"distance {dist} not reached")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v) + 0.0)  # full precision, no negative zero
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(k, "")) for k in fields])
    return buf.getvalue()


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Interaction resolution
# ---------------------------------------------------------------------------


def resolve_interaction(decision: ia.Decision, ctx: ia.InteractionContext, probs: ia.ProbabilityModel,
                        t_free_end: float, t_comp_end: float, curve=None) -> tuple[float, str]:
    """Apply the most probable outcome of ``decision``.

    Returns the ego MS end time and the outcome label. Overtake and Block
    succeed when their probability is at least 0.5; a pass also needs the
    ego to reach the MS end before the competitor.
    """
    a = decision.action
    de = decision.de
    dt_gain = -curve(de) if (curve is not None and de != 0.0) else 0.0
    if a in (ia.OVERTAKE, ia.OUTLAP_OVERTAKE):
        p = probs.p_overtake(ctx.dt_d(de), ctx.m)
        t_pass = t_free_end - dt_gain + ctx.t_rl
        if p >= 0.5 and t_pass < t_comp_end:
            return t_pass, "success"
        return max(t_free_end - dt_gain + ctx.t_rl, t_comp_end + ctx.t_gap_min), "failure"
    if a == ia.BLOCK:
        p = probs.p_defend(ctx.dt_d(de), ctx.m)
        if p >= 0.5:
            return t_free_end - dt_gain + ctx.t_rl, "success"
        return max(t_free_end - dt_gain + ctx.t_rl, t_comp_end + ctx.t_gap_min), "failure"
    if a == ia.STAY_BEHIND:
        return max(t_free_end - dt_gain, t_comp_end + ctx.t_gap_min), "followed"
    if a == ia.LET_THROUGH:
        return max(t_free_end - dt_gain, t_comp_end + ctx.t_gap_min), "let-through"
    if a == ia.BOX:
        return t_free_end, "box"
    return t_free_end, "none"


def baseline_policy(kind: str, ctx: ia.InteractionContext) -> ia.Decision:
    return ia.baseline_decision(ctx)


# ---------------------------------------------------------------------------
# Race loop
# ---------------------------------------------------------------------------


class _Field:
    """Competitor boundary times and distances."""

    def __init__(self, traces, shares, n_ms):
        self.ids = [tr.ident for tr in traces]
        self.n_ms = n_ms
        times = [tr.boundary_times(shares) for tr in traces]
        self.arr = [a for a, _ in times]
        self.dep = [d for _, d in times]
        # after the trace ends the car keeps its last-lap pace
        self.tail = [float((a[-1] - a[-1 - n_ms]) / n_ms) if len(a) > n_ms else float(a[-1] - a[-2])
                     for a in self.arr]

    def cross_time(self, k: int, s: int) -> float:
        a = self.arr[k]
        if s < len(a):
            return float(a[s])
        return float(self.dep[k][-1] + (s - len(a) + 1) * self.tail[k])

    def distance(self, k: int, t: float) -> float:
        """Completed mini-sectors (fractional) at time ``t``."""
        a, d = self.arr[k], self.dep[k]
        if t <= d[0]:
            return 0.0
        if t >= d[-1]:
            return (len(a) - 1) + (t - d[-1]) / self.tail[k]
        i = int(np.searchsorted(a, t, side="right")) - 1
        if t <= d[i]:
            return float(i)
        return i + (t - d[i]) / (a[i + 1] - d[i])


def _energy_after(cm, t_fc: float, de: float) -> float:
    """Time to full charge after spending ``de`` J more (clamped to the battery)."""
    e = charge_time_to_energy(cm, min(max(t_fc, 0.0), cm.t_charge_max))
    e1 = min(max(e - de, cm.e_min), cm.e_max)
    return energy_to_charge_time(cm, e1)


class RaceRunner:
    def __init__(self, scenario: Scenario, policy: str, node_limit: int = 20000):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
        self.sc = scenario
        self.policy = policy
        self.node_limit = node_limit
        self.maps = scenario.maps
        self.cm = scenario.maps.charge
        self.field = _Field(scenario.competitors, scenario.shares, scenario.n_ms)
        self.log = RaceLog(scenario.name, policy, scenario.digest, competitor_ids=list(self.field.ids))

    # -- helpers ---------------------------------------------------------
    def _cfg(self, st: WorldState):
        return self.sc.config.replace(n_laps=st.n_laps, n_stops=max(1, st.n_stops))

    def _solve(self, st: WorldState, lap: int) -> tuple[StrategyPlan, float]:
        cfg = self._cfg(st)
        meas = EgoMeasurement(min(st.t, cfg.t_race), min(st.t_fc, self.maps.t_charge_max), lap)
        t0 = time.perf_counter()
        # a stop straight after a stop only trades integer laps for a fractional final stint
        if st.n_stops == 0:
            plan = solve_final_stint(meas, cfg, self.maps)
        else:
            plan = solve_strategy(meas, cfg, self.maps, node_limit=self.node_limit,
                                  allow_immediate_stop=not st.out_lap)
        return plan, time.perf_counter() - t0

    def _position(self, dist_ms: float, t: float) -> int:
        return 1 + sum(1 for k in range(len(self.field.ids)) if self.field.distance(k, t) > dist_ms + 1e-9)

    def _record_positions(self, st: WorldState, t: float, dist_ms: float):
        row = [st.s, t, dist_ms]
        row += [self.field.distance(k, t) for k in range(len(self.field.ids))]
        self.log.positions.append(row)

    def _handover(self, st: WorldState, plan: StrategyPlan):
        """The first driven future stint becomes the current stint."""
        stints = plan.driven_stints if plan is not None and plan.ok else []
        if stints:
            i = stints[0]
            n = float(plan.n_laps_stint[i])
            last = i == len(plan.b_pit) - 1
            st.n_laps = max(1, int(math.ceil(n - 1e-6)) if last else int(round(n)))
        else:
            st.n_laps = max(1, st.n_laps)
        # stops the plan did not use are dropped, so later plans cannot add splash stops
        st.n_stops = len(stints) - 1 if stints else max(0, st.n_stops - 1)

    # -- main loop -------------------------------------------------------
    def run(self) -> RaceLog:
        sc, n_ms, shares = self.sc, self.sc.n_ms, self.sc.shares
        cfg = sc.config
        st = WorldState(t=sc.ego.start_delay, s=0, t_fc=sc.ego.t_fc, n_laps=cfg.n_laps, n_stops=cfg.n_stops)
        lap = 0
        cum_delay = 0.0
        t_in = sc.in_lap_offset
        while st.t < cfg.t_race and not st.finished:
            plan, solve_time = self._solve(st, lap)
            st.plan = plan
            stop_now = (plan.ok and plan.first_driven is None and plan.pits_after_current
                        and plan.objective > 1e-6 * cfg.s_lap)
            if not plan.ok:
                log.info("lap %d: %s", lap + 1, plan.message)
            flat = not plan.ok and st.n_stops > 0 and self.maps.t_charge_max - st.t_fc < self.maps.base.domain[0]
            if stop_now or flat:
                self._pit_stop(st, plan, t_entry=t_in, lap=lap)
                self._handover(st, plan)
                continue
            lap_start = st.t
            budget, t_ref, inlap, coast = self._lap_targets(st, plan)
            if budget is None:
                st.finished = True
                break
            curves = split_lap_map_to_ms(self.maps.base, shares, budget,
                                         self.cm.power(charge_time_to_energy(self.cm, st.t_fc)))
            box_plan = None
            lap_objective = plan.objective if plan.ok else float("nan")
            for m in range(1, n_ms + 1):
                if st.t >= cfg.t_race:
                    break
                dec_t0 = time.perf_counter()
                rec = self._ms_step(st, lap, m, budget, t_ref, inlap, curves, plan, box_plan)
                decision_time = time.perf_counter() - dec_t0
                if rec.get("action") == ia.BOX:
                    box_plan = rec.pop("_box_plan")
                    inlap = True
                rec.pop("_box_plan", None)
                cum_delay += rec["delay"]
                self.log.ms_records.append(rec)
                self.log.timing.append({"s": rec["s"], "decision": decision_time,
                                        "strategy": solve_time if m == 1 else 0.0,
                                        "ms_time": rec["t_end"] - rec["t_start"]})
            else:
                soc = soc_from_charge_time(self.cm, min(st.t_fc, self.maps.t_charge_max))
                self.log.lap_records.append({"lap": lap + 1, "t_start": lap_start, "t_end": st.t,
                                             "t_lap": st.t - lap_start, "dt_charge": budget, "t_lap_ref": t_ref,
                                             "inlap": int(inlap), "soc_end": soc, "plan_objective": lap_objective,
                                             "plan_status": "coast" if coast else plan.status,
                                             "horizon": st.n_laps, "n_stops": st.n_stops})
                lap += 1
                st.out_lap = False
                if inlap:
                    self._pit_stop(st, box_plan or plan, t_entry=0.0, lap=lap)
                    self._handover(st, box_plan or plan)
                else:
                    st.n_laps = max(1, st.n_laps - 1)
                continue
            break
        return self._finish(st, cum_delay)

    def _lap_targets(self, st: WorldState, plan: StrategyPlan):
        """Charge budget, reference lap time and in-lap flag for the lap now starting."""
        d_lo, d_hi = self.maps.base.domain
        if plan.ok and plan.first_driven is not None:
            j = plan.first_driven
            inlap = plan.driven_laps == 1 and plan.pits_after_current
            return float(plan.dt_charge[j]), float(plan.t_lap_ref[j]), inlap, False
        # nothing worth a full lap: run on what is left until the flag
        avail = self.maps.t_charge_max - st.t_fc
        if avail < d_lo - 1e-9:
            return None, None, False, True
        d = min(d_hi, avail)
        return d, float(eval_lap_time(self.maps.base, d)), False, True

    def _ms_step(self, st, lap, m, budget, t_ref, inlap, curves, plan, box_plan) -> dict:
        sc = self.sc
        n_ms = sc.n_ms
        w = sc.shares
        tau = float(w[m - 1] * t_ref)
        tau_next = float(w[m % n_ms] * t_ref)
        t0, s0 = st.t, st.s
        t_free = t0 + tau
        dtc_plan = float(w[m - 1] * budget)
        rec = {"s": s0 + 1, "lap": lap + 1, "ms": m, "t_start": t0, "t_free": t_free, "dist_start": s0 / n_ms,
               "position": self._position(s0, t0), "t_fc_start": st.t_fc, "dtc_plan": dtc_plan, "stop": 0,
               "stop_time": 0.0, "t_fc_after_stop": "", "kind": "", "competitor": "", "dt_p": "",
               "action": ia.NO_ACTION, "de": 0.0, "penalty": 0.0, "outcome": "", "delay": 0.0, "table": "",
               "note": ""}
        self._record_positions(st, t0, float(s0))

        cars = []
        skip = [c for c, until in st.cooldown.items() if until >= s0 + 1]
        for k, ident in enumerate(self.field.ids):
            cars.append(ia.CarState(ident, self.field.distance(k, t0), self.field.cross_time(k, s0 + 1),
                                    self.field.cross_time(k, s0 + 2)))
        hit = ia.detect_interaction(float(s0), t_free, t_free + tau_next, cars, horizon=tau, skip=skip,
                                     margin=sc.t_gap_min)
        t_end = t_free
        de = 0.0
        curve = curves[m - 1]
        if hit is not None:
            kind, car, dt_p, dt_p_next = hit
            k = self.field.ids.index(car.ident)
            e_now = charge_time_to_energy(self.cm, min(st.t_fc + dtc_plan, self.maps.t_charge_max))
            sens = ia.ChargeSensitivity(self.cm, e_now)
            follow = dt_p + sc.t_gap_min
            de_follow = min(0.0, curve.energy_for_time(max(follow, 0.0)))
            t_target, t_plan = self._let_through_horizon(k, s0, t_free, t_ref, m)
            ctx = ia.InteractionContext(
                kind, m, dt_p, dt_p_next, sc.t_gap_min, sc.t_rl, st.buffer, sc.probs, curve, sens,
                de_sb_min=de_follow, de_lt_min=3 * de_follow, t_target=t_target, t_ms_plan=t_plan,
                reinteraction=self._reinteraction(k, s0, t_free, t_ref, m), competitor=car.ident)
            if st.pending_outlap == car.ident and kind == ia.ATTACK:
                d0 = ia.baseline_decision(ctx)
                decision = ia.Decision(ia.PIT_EXIT, ia.OUTLAP_OVERTAKE, d0.de, d0.penalty, {ia.OUTLAP_OVERTAKE: d0.penalty},
                                       {ia.OUTLAP_OVERTAKE: d0.de}, "committed at pit exit")
            elif self.policy == "baseline":
                decision = baseline_policy(kind, ctx)
            else:
                decision = ia.decide(ctx)
                if m == n_ms and not inlap and plan.ok:
                    box_pen, bplan = self._box_penalty(st, lap, plan, decision.penalty, t_ref, t0)
                    if box_pen is not None:
                        decision = ia.decide(ctx, box_penalty=box_pen)
                        if decision.action == ia.BOX:
                            rec["_box_plan"] = bplan
            st.buffer = ia.update_sb_buffer(st.buffer, decision)
            de = decision.de if decision.action != ia.LET_THROUGH else decision.de / 3.0
            if decision.action == ia.BOX:
                t_end = t_free + sc.in_lap_offset
                outcome = "box"
                de = 0.0
            else:
                t_end, outcome = resolve_interaction(ia.Decision(kind, decision.action, de, decision.penalty),
                                                     ctx, sc.probs, t_free, car.t_end, curve)
            if outcome == "failure" and decision.action in (ia.OVERTAKE, ia.OUTLAP_OVERTAKE):
                st.cooldown[car.ident] = s0 + 2
                rec["note"] = "cooldown"
            rec.update(kind=kind, competitor=car.ident, dt_p=dt_p, action=decision.action, de=de,
                       penalty=decision.penalty, outcome=outcome,
                       table=json.dumps({a: round(v, 9) for a, v in sorted(decision.table.items())},
                                        sort_keys=True))
            if decision.note:
                rec["note"] = (rec["note"] + "; " if rec["note"] else "") + decision.note
        else:
            st.buffer = 0.0
        st.pending_outlap = ""
        # cars ahead that were not passed keep the ego behind them
        if rec["outcome"] != "box":
            for k, ident in enumerate(self.field.ids):
                if rec["competitor"] == ident and rec["outcome"] == "success":
                    continue
                if self.field.distance(k, t0) > s0 + 1e-9:
                    t_cross = self.field.cross_time(k, s0 + 1)
                    if t_cross > t0:
                        t_end = max(t_end, t_cross + sc.t_gap_min)
        t_fc_plan = st.t_fc + dtc_plan
        t_fc_end = min(_energy_after(self.cm, t_fc_plan, de), self.maps.t_charge_max) if de else t_fc_plan
        t_fc_end = min(t_fc_end, self.maps.t_charge_max)
        # measured against the clamped plan: running dry past the flag is not an interaction cost
        dtc_extra = t_fc_end - min(t_fc_plan, self.maps.t_charge_max)
        rec.update(t_end=t_end, dtc_extra=dtc_extra, t_fc_end=t_fc_end,
                   soc_end=soc_from_charge_time(self.cm, t_fc_end), delay=(t_end - t_free) + dtc_extra)
        st.t, st.s, st.t_fc = t_end, s0 + 1, t_fc_end
        return rec

    def _let_through_horizon(self, k, s0, t_free, t_ref, m):
        """Ego plan vs. follow-the-competitor MS times for the next three MSs."""
        w = self.sc.shares
        n_ms = self.sc.n_ms
        t_plan, t_target = [], []
        prev_c = self.field.cross_time(k, s0 + 1)
        t_e = max(t_free, prev_c + self.sc.t_gap_min)
        for i in range(1, 4):
            tau = float(w[(m - 1 + i) % n_ms] * t_ref)
            c_next = self.field.cross_time(k, s0 + 1 + i)
            follow = max(tau, c_next + self.sc.t_gap_min - t_e)
            t_plan.append(tau)
            t_target.append(follow)
            t_e += follow
        return tuple(t_target), tuple(t_plan)

    def _reinteraction(self, k, s0, t_free, t_ref, m) -> bool:
        """Would the ego catch the competitor again within three MSs after letting it by?"""
        t_target, t_plan = self._let_through_horizon(k, s0, t_free, t_ref, m)
        return any(tt > tp + 1e-9 for tt, tp in zip(t_target, t_plan))

    def _box_penalty(self, st, lap, plan, best_other, t_ref, t_now):
        """Box table entry: best on-track penalty plus the distance effect of stopping now."""
        cfg = self._cfg(st)
        meas = EgoMeasurement(plan.t_meas, plan.t_fc_meas, lap)
        if st.n_stops == 0 or (plan.pits_after_current and plan.driven_laps == 1):
            return None, None
        delayed = EgoMeasurement(min(plan.t_meas + max(best_other, 0.0), cfg.t_race), plan.t_fc_meas, lap)
        unforced = solve_strategy(delayed, cfg, self.maps, node_limit=self.node_limit)
        if not unforced.ok:
            return None, None
        from .strategy import solve_forced_inlap
        forced = solve_forced_inlap(meas, cfg, self.maps, node_limit=self.node_limit)
        if not forced.ok:
            return None, None
        delta = ia.box_time_penalty(unforced.objective, forced.objective, cfg.s_lap, t_ref)
        return best_other + delta, forced

    def _pit_stop(self, st: WorldState, plan, t_entry: float, lap: int):
        """Charge to full at the line; the pit-exit decision may shorten the stop."""
        sc = self.sc
        t0 = st.t
        charge = max(st.t_fc, 0.0)
        t_exit = t0 + t_entry + charge + sc.out_lap_offset
        rec = {"s": st.s, "lap": lap, "ms": 0, "t_start": t0, "t_free": t_exit, "dist_start": st.s / sc.n_ms,
               "position": self._position(st.s, t0), "t_fc_start": st.t_fc, "dtc_plan": 0.0, "dtc_extra": 0.0,
               "stop": 1, "kind": "", "competitor": "", "dt_p": "", "action": ia.NO_ACTION, "de": 0.0,
               "penalty": 0.0, "outcome": "", "delay": 0.0, "table": "", "note": "pit stop"}
        dec_t0 = time.perf_counter()
        short = 0.0
        exit_hit = self._pit_exit(st, t_exit, plan)
        if exit_hit is not None:
            ctx, k = exit_hit
            if self.policy == "baseline":
                decision = baseline_policy(ia.PIT_EXIT, ctx)
            else:
                decision = ia.decide(ctx, short_pit_available=ctx.dt_charge_sp <= charge)
            rec.update(kind=ia.PIT_EXIT, competitor=ctx.competitor, dt_p=ctx.dt_p, action=decision.action,
                       penalty=decision.penalty,
                       table=json.dumps({a: round(v, 9) for a, v in sorted(decision.table.items())},
                                        sort_keys=True))
            if decision.action == ia.SHORT_PIT_STOP:
                short = ctx.dt_charge_sp
                rec.update(outcome="exit-ahead", delay=decision.penalty)
            else:
                # the out-lap pass is attempted in the first MS
                st.cooldown.pop(ctx.competitor, None)
                st.pending_outlap = ctx.competitor
                rec.update(outcome="deferred")
        t_fc_after = short
        stop_time = t_entry + (charge - short) + sc.out_lap_offset
        rec.update(t_end=t0 + stop_time, stop_time=stop_time, t_fc_after_stop=t_fc_after, t_fc_end=t_fc_after,
                   soc_end=soc_from_charge_time(self.cm, t_fc_after))
        self.log.ms_records.append(rec)
        self.log.timing.append({"s": st.s, "decision": time.perf_counter() - dec_t0, "strategy": 0.0,
                                "ms_time": stop_time})
        st.t += stop_time
        st.t_fc = t_fc_after
        st.out_lap = True
        st.buffer = 0.0

    def _pit_exit(self, st: WorldState, t_exit: float, plan):
        """Competitor crossing the line just before the ego car rejoins."""
        sc = self.sc
        w = sc.shares
        best = None
        for k, ident in enumerate(self.field.ids):
            t_c = self.field.cross_time(k, st.s)
            gap = t_exit - t_c
            if 0.0 < gap <= w[0] * self._ref_lap() and (best is None or gap < best[1]):
                best = (k, gap)
        if best is None:
            return None
        k, gap = best
        # predicted next stint (even split) for the short-stop cost
        n_next, tc_next = self._next_stint(plan)
        d_bar = tc_next / n_next if n_next >= 1 else 0.0
        lo, hi = self.maps.base.domain
        if n_next >= 1 and lo <= d_bar <= hi:
            dtc_bar = (d_bar,) * n_next
            t_bar = (float(eval_lap_time(self.maps.base, d_bar)),) * n_next
        else:
            dtc_bar, t_bar = (), ()
        tau1 = w[0] * self._ref_lap()
        dt_p = self.field.cross_time(k, st.s + 1) - (t_exit + tau1)
        curve = split_lap_map_to_ms(self.maps.base, w, min(max(d_bar, lo), hi) if d_bar else 0.5 * (lo + hi),
                                    self.cm.power(self.cm.e_max))[0]
        ctx = ia.InteractionContext(ia.PIT_EXIT, 1, dt_p, 0.0, sc.t_gap_min, sc.t_rl, 0.0, sc.probs, curve,
                                    ia.ChargeSensitivity(self.cm, self.cm.e_max), lap_map=self.maps.base,
                                    dt_charge_bar=dtc_bar, t_lap_bar=t_bar, dt_charge_sp=gap + sc.t_gap_min,
                                    competitor=self.field.ids[k])
        if not dtc_bar:
            ctx = ia._with(ctx, dt_charge_sp=math.inf)
        return ctx, k

    def _ref_lap(self) -> float:
        lo, hi = self.maps.base.domain
        return float(eval_lap_time(self.maps.base, 0.5 * (lo + hi)))

    def _next_stint(self, plan) -> tuple[int, float]:
        if plan is None or not plan.ok or not plan.driven_stints:
            return 0, 0.0
        i = plan.driven_stints[0]
        n = float(plan.n_laps_stint[i])
        last = i == len(plan.b_pit) - 1
        n_int = int(math.ceil(n - 1e-6)) if last else int(round(n))
        tc = self.maps.t_charge_max if last else float(plan.t_charge_stint[i])
        return n_int, tc

    def _finish(self, st: WorldState, cum_delay: float) -> RaceLog:
        sc = self.sc
        t_race = sc.config.t_race
        recs = [r for r in self.log.ms_records if not r["stop"]]
        dist = 0.0
        for r in recs:
            if r["t_end"] <= t_race:
                dist = r["dist_start"] + 1.0 / sc.n_ms
            elif r["t_start"] < t_race:
                frac = (t_race - r["t_start"]) / (r["t_end"] - r["t_start"])
                dist = r["dist_start"] + frac / sc.n_ms
        standings = self._position(dist * sc.n_ms, t_race)
        n_dec = sum(1 for r in self.log.ms_records if r["kind"])
        actions: dict[str, int] = {}
        for r in self.log.ms_records:
            if r["kind"]:
                actions[r["action"]] = actions.get(r["action"], 0) + 1
        delay_total = float(sum(r["delay"] for r in self.log.ms_records))
        self.log.summary = {
            "scenario": sc.name, "policy": self.policy, "scenario_digest": sc.digest, "n_ms": sc.n_ms,
            "t_race": t_race, "s_lap": sc.config.s_lap, "distance_laps": dist, "distance_m": dist * sc.config.s_lap,
            "laps_completed": len(self.log.lap_records), "finishing_position": standings,
            "n_competitors": len(self.field.ids), "cumulative_interaction_delay": delay_total,
            "interactions": n_dec, "actions": dict(sorted(actions.items())),
            "pit_stops": sum(1 for r in self.log.ms_records if r["stop"]),
            "first_plan_objective_laps": (self.log.lap_records[0]["plan_objective"] / sc.config.s_lap
                                          if self.log.lap_records else 0.0),
        }
        return self.log


def run_race(scenario: Scenario, policy: str = "optimal", node_limit: int = 20000) -> RaceLog:
    """Simulate one race with the given interaction policy."""
    return RaceRunner(scenario, policy, node_limit).run()


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

COMPARE_FIELDS = ("lap", "t_a", "t_b", "time_gap", "soc_a", "soc_b", "dsoc", "delay_a", "delay_b",
                  "actions_a", "actions_b")


@dataclass
class Comparison:
    rows: list
    summary: dict

    def csv(self) -> str:
        return _csv(COMPARE_FIELDS, self.rows)


def _lap_series(lg: RaceLog):
    laps = {int(r["lap"]): r for r in lg.lap_records}
    delay: dict[int, float] = {}
    acts: dict[int, list] = {}
    run = 0.0
    for r in lg.ms_records:
        lap = int(r["lap"])
        run += float(r["delay"])
        delay[lap] = run
        if r["kind"]:
            acts.setdefault(lap, []).append(f"{r['ms']}:{r['action']}")
    return laps, delay, acts


def compare(log_a: RaceLog, log_b: RaceLog) -> Comparison:
    """Per-lap series of ``b`` relative to ``a`` (positive gap: ``a`` is ahead)."""
    if log_a.summary.get("scenario_digest") != log_b.summary.get("scenario_digest"):
        raise ScenarioError("cannot compare logs from different scenarios")
    la, da, aa = _lap_series(log_a)
    lb, db, ab = _lap_series(log_b)
    rows = []
    for lap in sorted(set(la) & set(lb)):
        ra, rb = la[lap], lb[lap]
        soc_a, soc_b = float(ra["soc_end"]), float(rb["soc_end"])
        rows.append({"lap": lap, "t_a": float(ra["t_end"]), "t_b": float(rb["t_end"]),
                     "time_gap": float(rb["t_end"]) - float(ra["t_end"]), "soc_a": soc_a, "soc_b": soc_b,
                     "dsoc": soc_a - soc_b, "delay_a": da.get(lap, 0.0), "delay_b": db.get(lap, 0.0),
                     "actions_a": " ".join(aa.get(lap, [])), "actions_b": " ".join(ab.get(lap, []))})
    d_a = float(log_a.summary["distance_laps"])
    d_b = float(log_b.summary["distance_laps"])
    common = min(d_a, d_b)
    t_a, t_b = log_a.time_at_distance(common), log_b.time_at_distance(common)
    summary = {"policy_a": log_a.summary.get("policy"), "policy_b": log_b.summary.get("policy"),
               "distance_a": d_a, "distance_b": d_b, "common_distance": common,
               "time_a": t_a, "time_b": t_b, "final_gap": t_b - t_a,
               "delay_a": float(log_a.summary["cumulative_interaction_delay"]),
               "delay_b": float(log_b.summary["cumulative_interaction_delay"])}
    return Comparison(rows, summary)


def soc_reconstruction_error(lg: RaceLog, charge) -> float:
    """Largest gap between logged SoC and SoC rebuilt from planned budgets, extra energy and stops.

    The rebuild walks the battery in the energy domain: each MS draws its
    planned charge-time budget plus the logged extra energy ``de``.
    """
    rows = lg.ms_records
    if not rows:
        return 0.0
    t_fc = float(rows[0]["t_fc_start"])
    worst = 0.0
    for r in rows:
        if int(r["stop"]):
            t_fc = float(r["t_fc_after_stop"])
        else:
            t_plan = min(t_fc + float(r["dtc_plan"]), charge.t_charge_max)
            de = float(r["de"])
            t_fc = min(_energy_after(charge, t_plan, de), charge.t_charge_max) if de else t_plan
        soc = soc_from_charge_time(charge, min(max(t_fc, 0.0), charge.t_charge_max))
        worst = max(worst, abs(soc - float(r["soc_end"])), abs(t_fc - float(r["t_fc_end"])) / charge.t_charge_max)
    return worst


def make_synthetic_field(n_cars: int, n_laps: int, base_lap: float, spread: float, pit_window: tuple,
                         pit_duration: tuple, start_spacing: float, seed: int, jitter: float = 0.4,
                         prefix: str = "car") -> list[CompetitorTrace]:
    """Reproducible competitor traces: per-car pace offset, lap noise, one stop each."""
    rng = np.random.default_rng(seed)
    traces = []
    for k in range(n_cars):
        pace = base_lap + rng.uniform(-spread, spread)
        laps = tuple(float(round(pace + rng.normal(0.0, jitter), 3)) for _ in range(n_laps))
        pit_lap = int(rng.integers(pit_window[0], pit_window[1] + 1))
        dur = float(round(rng.uniform(*pit_duration), 3))
        traces.append(CompetitorTrace(f"{prefix}{k + 1:02d}", laps, (pit_lap,), (dur,),
                                      float(round(k * start_spacing, 3))))
    return traces
