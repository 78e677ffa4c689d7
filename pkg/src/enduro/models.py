"""Pre-computed performance maps for the ego car.

Everything the online optimizer needs about the vehicle lives here: the
charging profile (battery energy <-> equivalent charge time), the
piecewise-affine lap-time maps, the quadratic stint-time model and the
per-mini-sector time/energy trade-off curves derived from the lap map.

The ground truth used to generate samples is synthetic. Per-lap time as a
function of the charge-time budget ``d`` of that lap is

    L(d) = t0 + slope * d + curvature * d**2 + inv_coeff / d

which is convex for ``curvature, inv_coeff >= 0``. With ``curvature == 0`` a
stint of ``N`` laps on an even split of ``t_charge`` sums to
``t0*N + slope*t_charge + inv_coeff*N**2/t_charge``, which is exactly
representable by the lifted quadratic form of the stint model.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1


class DomainError(ValueError):
    """Argument outside the validity domain of a map."""


class FitError(ValueError):
    """Sample set cannot be fitted by the requested model."""


# ---------------------------------------------------------------------------
# Charge model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChargeModel:
    """Charging profile: charge power (W) as a piecewise-linear function of
    battery energy (J), integrated in closed form on every segment."""

    e_min: float
    e_max: float
    power_curve: tuple[tuple[float, float], ...]
    _knots_e: np.ndarray = field(init=False, repr=False, compare=False)
    _knots_p: np.ndarray = field(init=False, repr=False, compare=False)
    _knots_t: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.e_max > self.e_min:
            raise ValueError(f"e_max ({self.e_max}) must exceed e_min ({self.e_min})")
        curve = np.asarray(self.power_curve, dtype=float)
        if curve.ndim != 2 or curve.shape[1] != 2 or len(curve) < 1:
            raise ValueError("power_curve must be a list of (energy, power) pairs")
        order = np.argsort(curve[:, 0], kind="stable")
        curve = curve[order]
        if np.any(np.diff(curve[:, 0]) <= 0):
            raise ValueError("power_curve energies must be distinct")
        if np.any(curve[:, 1] <= 0):
            raise ValueError("charge power must be strictly positive")
        inner = curve[(curve[:, 0] > self.e_min) & (curve[:, 0] < self.e_max), 0]
        knots_e = np.concatenate([[self.e_min], inner, [self.e_max]])
        knots_p = np.interp(knots_e, curve[:, 0], curve[:, 1])
        # time from each knot to e_max
        seg = np.array([_segment_time(knots_e[i], knots_e[i + 1], knots_p[i], knots_p[i + 1])
                        for i in range(len(knots_e) - 1)])
        knots_t = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
        object.__setattr__(self, "power_curve", tuple(map(tuple, curve.tolist())))
        object.__setattr__(self, "_knots_e", knots_e)
        object.__setattr__(self, "_knots_p", knots_p)
        object.__setattr__(self, "_knots_t", knots_t)

    @property
    def t_charge_max(self) -> float:
        return float(self._knots_t[0])

    def power(self, e: float) -> float:
        return float(np.interp(e, self._knots_e, self._knots_p))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "e_min": self.e_min, "e_max": self.e_max,
                "power_curve": [list(p) for p in self.power_curve]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChargeModel":
        return cls(float(d["e_min"]), float(d["e_max"]),
                   tuple((float(e), float(p)) for e, p in d["power_curve"]))


def _segment_time(e0, e1, p0, p1):
    """Integral of dE / P(E) over [e0, e1] with P linear between p0 and p1."""
    if p1 == p0:
        return (e1 - e0) / p0
    slope = (p1 - p0) / (e1 - e0)
    return math.log(p1 / p0) / slope


def energy_to_charge_time(cm: ChargeModel, e: float) -> float:
    """Charge time needed to bring the battery from ``e`` to ``e_max``."""
    tol = 1e-12 * max(abs(cm.e_max), 1.0)
    if not (cm.e_min - tol <= e <= cm.e_max + tol):
        raise DomainError(f"energy {e} outside [{cm.e_min}, {cm.e_max}]")
    e = min(max(e, cm.e_min), cm.e_max)
    ke, kp, kt = cm._knots_e, cm._knots_p, cm._knots_t
    i = int(np.searchsorted(ke, e, side="right")) - 1
    i = min(max(i, 0), len(ke) - 2)
    p_e = kp[i] + (kp[i + 1] - kp[i]) * (e - ke[i]) / (ke[i + 1] - ke[i])
    return float(kt[i + 1] + _segment_time(e, ke[i + 1], p_e, kp[i + 1]))


def charge_time_to_energy(cm: ChargeModel, t: float) -> float:
    """Inverse of :func:`energy_to_charge_time`."""
    t_max = cm.t_charge_max
    tol = 1e-12 * max(t_max, 1.0)
    if not (-tol <= t <= t_max + tol):
        raise DomainError(f"charge time {t} outside [0, {t_max}]")
    t = min(max(t, 0.0), t_max)
    ke, kp, kt = cm._knots_e, cm._knots_p, cm._knots_t
    # kt is decreasing; find segment i with kt[i+1] <= t <= kt[i]
    i = int(np.searchsorted(-kt, -t, side="left")) - 1
    i = min(max(i, 0), len(ke) - 2)
    tau = t - kt[i + 1]  # time spent inside the segment
    p0, p1 = kp[i], kp[i + 1]
    if p1 == p0:
        return float(ke[i + 1] - tau * p0)
    slope = (p1 - p0) / (ke[i + 1] - ke[i])
    p_e = p1 * math.exp(-slope * tau)
    return float(ke[i] + (p_e - p0) / slope)


def soc_from_charge_time(cm: ChargeModel, t_fc: float) -> float:
    """State of charge in [0, 1] from time to full charge."""
    e = charge_time_to_energy(cm, t_fc)
    return (e - cm.e_min) / (cm.e_max - cm.e_min)


# ---------------------------------------------------------------------------
# Lap-time maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LapTimeMap:
    """Convex max-of-affine lap time over the per-lap charge-time budget."""

    kind: str
    pieces: np.ndarray  # (n_fits, 2) rows of (c1, c0)
    domain: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("base", "in"):
            raise ValueError(f"unknown lap map kind {self.kind!r}")
        pieces = np.array(self.pieces, dtype=float).reshape(-1, 2)
        if len(pieces) == 0:
            raise ValueError("lap map needs at least one piece")
        lo, hi = float(self.domain[0]), float(self.domain[1])
        if not hi >= lo:
            raise ValueError("empty lap map domain")
        pieces.setflags(write=False)
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "domain", (lo, hi))

    @property
    def n_fits(self) -> int:
        return len(self.pieces)

    def __call__(self, dt_charge):
        return eval_lap_time(self, dt_charge)

    def shifted(self, offset: float, kind: str = "in") -> "LapTimeMap":
        p = self.pieces.copy()
        p[:, 1] += offset
        return LapTimeMap(kind, p, self.domain)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": self.kind,
                "pieces": self.pieces.tolist(), "domain": list(self.domain)}

    @classmethod
    def from_dict(cls, d: dict) -> "LapTimeMap":
        return cls(d["kind"], np.asarray(d["pieces"], dtype=float), tuple(d["domain"]))


def eval_lap_time(lap_map: LapTimeMap, dt_charge):
    """Max over the affine pieces; scalar in, scalar out (arrays accepted)."""
    x = np.asarray(dt_charge, dtype=float)
    lo, hi = lap_map.domain
    tol = 1e-9 * max(1.0, abs(hi))
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise DomainError(f"charge time {dt_charge} outside map domain [{lo}, {hi}]")
    c = lap_map.pieces
    vals = np.max(np.multiply.outer(x, c[:, 0]) + c[:, 1], axis=-1)
    return float(vals) if vals.ndim == 0 else vals


def fit_pwa_map(samples, n_fits: int, kind: str = "base", max_iter: int = 100,
                convexity_tol: float = 1e-6) -> LapTimeMap:
    """Least-squares max-of-affine fit of a convex, non-increasing curve.

    Samples are partitioned on a uniform grid of the charge-time axis; each
    cell gets its own least-squares line, then samples are reassigned to the
    piece that attains the max (ties go to the lower index) and the lines are
    refitted until the partition stops changing.
    """
    data = np.asarray(samples, dtype=float).reshape(-1, 2)
    if n_fits < 1:
        raise FitError("n_fits must be positive")
    if len(data) < 2 * n_fits:
        raise FitError(f"need at least {2 * n_fits} samples for {n_fits} pieces, got {len(data)}")
    data = data[np.argsort(data[:, 0], kind="stable")]
    x, y = data[:, 0], data[:, 1]
    if np.any(np.diff(x) <= 0):
        raise FitError("sample abscissae must be distinct")
    chord = np.diff(y) / np.diff(x)
    scale = max(1.0, float(np.max(np.abs(chord))))
    if np.any(np.diff(chord) < -convexity_tol * scale):
        raise FitError("samples are not convex")
    if np.any(chord > convexity_tol * scale):
        raise FitError("samples are not non-increasing")

    edges = np.linspace(x[0], x[-1], n_fits + 1)
    labels = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_fits - 1)
    pieces = np.zeros((n_fits, 2))
    fitted = np.zeros(n_fits, dtype=bool)
    for _ in range(max_iter):
        for k in range(n_fits):
            mask = labels == k
            if mask.sum() >= 2:
                pieces[k] = _ls_line(x[mask], y[mask])
                fitted[k] = True
            elif not fitted[k]:
                # starve-proof: seed an empty cell from its neighbourhood
                centre = 0.5 * (edges[k] + edges[k + 1])
                idx = np.argsort(np.abs(x - centre), kind="stable")[:2]
                pieces[k] = _ls_line(x[idx], y[idx])
                fitted[k] = True
        new_labels = np.argmax(np.outer(x, pieces[:, 0]) + pieces[:, 1], axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return LapTimeMap(kind, pieces, (float(x[0]), float(x[-1])))


def _ls_line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    if slope > 0.0:
        # keep the map non-increasing
        return np.array([0.0, float(np.mean(y))])
    return np.array([float(slope), float(intercept)])


def normalized_rmse(lap_map: LapTimeMap, samples) -> float:
    """RMSE of the map on ``samples`` divided by the maximum sampled lap time."""
    data = np.asarray(samples, dtype=float).reshape(-1, 2)
    err = eval_lap_time(lap_map, data[:, 0]) - data[:, 1]
    return float(np.sqrt(np.mean(err ** 2)) / np.max(data[:, 1]))


# ---------------------------------------------------------------------------
# Stint-time model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StintTimeModel:
    """Lifted quadratic stint-time model.

    ``eval_stint_time = x^T Q x + offset`` with
    ``x = [1/sqrt(t), sqrt(t), N/sqrt(t)]``; the final stint, driven on a full
    battery, is ``d_sf . [N^2, N, 1]``. ``offset`` carries the pit-lane
    losses that a PSD quadratic form cannot represent.
    """

    q_s: np.ndarray
    d_sf: np.ndarray
    n_laps_max: float
    t_charge_min: float
    t_charge_max: float
    offset: float = 0.0

    def __post_init__(self):
        q = np.array(self.q_s, dtype=float).reshape(3, 3)
        d = np.array(self.d_sf, dtype=float).reshape(3)
        if not np.allclose(q, q.T, atol=1e-12 * max(1.0, np.abs(q).max())):
            raise ValueError("q_s must be symmetric")
        q = 0.5 * (q + q.T)
        if np.linalg.eigvalsh(q).min() < -1e-9 * max(np.trace(q), 1e-300):
            raise ValueError("q_s must be positive semi-definite")
        q.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "q_s", q)
        object.__setattr__(self, "d_sf", d)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "q_s": self.q_s.ravel().tolist(),
                "d_sf": self.d_sf.tolist(), "n_laps_max": self.n_laps_max,
                "t_charge_min": self.t_charge_min, "t_charge_max": self.t_charge_max,
                "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "StintTimeModel":
        return cls(np.asarray(d["q_s"], dtype=float).reshape(3, 3), np.asarray(d["d_sf"], dtype=float),
                   float(d["n_laps_max"]), float(d.get("t_charge_min", 0.0)),
                   float(d["t_charge_max"]), float(d.get("offset", 0.0)))


def eval_stint_time(stm: StintTimeModel, n_laps: float, t_charge: float) -> float:
    if not t_charge > 0:
        raise DomainError(f"t_charge must be positive, got {t_charge}")
    if n_laps < 0:
        raise DomainError(f"n_laps must be non-negative, got {n_laps}")
    q = stm.q_s
    t, n = float(t_charge), float(n_laps)
    num = (q[0, 0] + 2 * q[0, 1] * t + q[1, 1] * t * t
           + 2 * q[0, 2] * n + 2 * q[1, 2] * t * n + q[2, 2] * n * n)
    return num / t + stm.offset


def eval_final_stint_time(stm: StintTimeModel, n_laps: float) -> float:
    if n_laps < 0:
        raise DomainError(f"n_laps must be non-negative, got {n_laps}")
    d = stm.d_sf
    return float((d[0] * n_laps + d[1]) * n_laps + d[2])


def stint_tangent_cut(stm: StintTimeModel, n0: float, t0: float) -> tuple[float, float, float]:
    """Tangent plane ``a_n*N + a_t*t + b`` of the stint time at ``(n0, t0)``."""
    if not t0 > 0:
        raise DomainError(f"cut point needs t_charge > 0, got {t0}")
    q = stm.q_s
    v = np.array([1.0, t0, n0])
    quad = float(v @ q @ v)
    a_n = 2.0 * float(q[2] @ v) / t0
    a_t = 2.0 * float(q[1] @ v) / t0 - quad / t0 ** 2
    f0 = quad / t0 + stm.offset
    return a_n, a_t, f0 - a_n * n0 - a_t * t0


def final_stint_tangent_cut(stm: StintTimeModel, n0: float) -> tuple[float, float]:
    """Tangent line ``a_n*N + b`` of the final-stint time at ``n0``."""
    d = stm.d_sf
    a_n = 2 * d[0] * n0 + d[1]
    return float(a_n), float(eval_final_stint_time(stm, n0) - a_n * n0)


def stint_monomials(n, t):
    """Columns {1/t, t, N/t, N^2/t, N, 1} of the stint least-squares fit."""
    n = np.asarray(n, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.column_stack([1 / t, t, n / t, n * n / t, n, np.ones_like(t)])


def project_psd(q: np.ndarray) -> np.ndarray:
    q = 0.5 * (q + q.T)
    w, v = np.linalg.eigh(q)
    return (v * np.clip(w, 0.0, None)) @ v.T


def fit_stint_model(stint_samples, final_samples, n_laps_max: float,
                    t_charge_min: float, t_charge_max: float) -> StintTimeModel:
    """Least squares on the lifted monomials, then eigenvalue clipping.

    ``stint_samples`` rows are (N, t_charge, t_stint), ``final_samples`` rows
    are (N, t_stint) at a full-battery budget. The constant monomial is kept
    as the model offset (the q_12 entry is fixed at zero).
    """
    s = np.asarray(stint_samples, dtype=float).reshape(-1, 3)
    f = np.asarray(final_samples, dtype=float).reshape(-1, 2)
    if len(s) < 6 or len(f) < 3:
        raise FitError("not enough stint samples")
    a = stint_monomials(s[:, 0], s[:, 1])
    coef, *_ = np.linalg.lstsq(a, s[:, 2], rcond=None)
    q = np.array([[coef[0], 0.0, coef[2] / 2],
                  [0.0, coef[1], coef[4] / 2],
                  [coef[2] / 2, coef[4] / 2, coef[3]]])
    q = project_psd(q)
    d_sf, *_ = np.linalg.lstsq(np.column_stack([f[:, 0] ** 2, f[:, 0], np.ones(len(f))]), f[:, 1], rcond=None)
    return StintTimeModel(q, d_sf, n_laps_max, t_charge_min, t_charge_max, float(coef[5]))


# ---------------------------------------------------------------------------
# Mini-sector trade-off curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MsTradeoffCurve:
    """Mini-sector time deviation (s) versus extra battery energy spent (J)."""

    ms_index: int
    pieces: np.ndarray  # rows (slope s/J, intercept s)
    domain: tuple[float, float]  # admissible energy deviation (J)
    nominal_time: float
    nominal_energy: float

    def __call__(self, de):
        x = np.asarray(de, dtype=float)
        lo, hi = self.domain
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise DomainError(f"energy deviation {de} outside [{lo}, {hi}]")
        vals = np.max(np.multiply.outer(x, self.pieces[:, 0]) + self.pieces[:, 1], axis=-1)
        return float(vals) if vals.ndim == 0 else vals

    def energy_for_time(self, dt: float) -> float:
        """Smallest energy deviation whose time deviation is <= ``dt``.

        Clamped to the curve domain; used to turn a slower target time into
        the energy it saves.
        """
        lo, hi = self.domain
        if self(lo) <= dt:
            return lo
        if self(hi) > dt:
            return hi
        a, b = lo, hi
        for _ in range(200):
            mid = 0.5 * (a + b)
            if self(mid) <= dt:
                b = mid
            else:
                a = mid
            if b - a <= 1e-12 * max(1.0, abs(lo), abs(hi)):
                break
        return b


def split_lap_map_to_ms(lap_map: LapTimeMap, shares: Sequence[float], d_nominal: float,
                        power_nominal: float) -> list[MsTradeoffCurve]:
    """Scale the lap map into one trade-off curve per mini-sector.

    Mini-sector ``m`` with time share ``w`` sees ``w * L(d0 + dE/(P*w))`` minus
    its nominal time ``w * L(d0)``; ``P`` converts joules into charge time.
    """
    w = np.asarray(shares, dtype=float)
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"mini-sector shares must be positive and sum to 1 (sum={w.sum()!r})")
    lo, hi = lap_map.domain
    t_nom = eval_lap_time(lap_map, d_nominal)
    curves = []
    for m, wm in enumerate(w, start=1):
        c = lap_map.pieces
        pieces = np.column_stack([c[:, 0] / power_nominal,
                                  wm * (c[:, 0] * d_nominal + c[:, 1]) - wm * t_nom])
        dom = (power_nominal * wm * (lo - d_nominal), power_nominal * wm * (hi - d_nominal))
        curves.append(MsTradeoffCurve(m, pieces, dom, wm * t_nom, power_nominal * wm * d_nominal))
    return curves


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthParams:
    t0: float = 47.5
    slope: float = 0.3
    curvature: float = 0.0
    inv_coeff: float = 1900.0
    d_lo: float = 30.0
    d_hi: float = 75.0
    in_lap_offset: float = 20.0
    out_lap_offset: float = 15.0
    e_min: float = 0.0
    e_max: float = 36.0e6
    power_curve: tuple[tuple[float, float], ...] = ((0.0, 80.0e3), (36.0e6, 40.0e3))
    n_laps_max: float = 30.0
    n_samples: int = 400

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ground-truth parameters: {sorted(unknown)}")
        kw = dict(d)
        if "power_curve" in kw:
            kw["power_curve"] = tuple((float(e), float(p)) for e, p in kw["power_curve"])
        return cls(**kw)


@dataclass(frozen=True)
class MapSet:
    """Everything the strategy optimizer consumes."""

    base: LapTimeMap
    inlap: LapTimeMap
    stint: StintTimeModel
    charge: ChargeModel

    @property
    def t_charge_max(self) -> float:
        return self.charge.t_charge_max

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"base": out / "lap_map_base.json", "in": out / "lap_map_in.json",
                 "stint": out / "stint_model.json", "charge": out / "charge_model.json"}
        for key, obj in (("base", self.base), ("in", self.inlap), ("stint", self.stint),
                         ("charge", self.charge)):
            files[key].write_text(json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n")
        return files

    @classmethod
    def load(cls, in_dir) -> "MapSet":
        d = Path(in_dir)
        rd = lambda name: json.loads((d / name).read_text())  # noqa: E731
        return cls(LapTimeMap.from_dict(rd("lap_map_base.json")), LapTimeMap.from_dict(rd("lap_map_in.json")),
                   StintTimeModel.from_dict(rd("stint_model.json")),
                   ChargeModel.from_dict(rd("charge_model.json")))


class GroundTruth:
    """Self-consistent synthetic vehicle: lap, stint and charge behaviour."""

    def __init__(self, params: GroundTruthParams):
        p = params
        if p.curvature < 0 or p.inv_coeff < 0:
            raise ValueError("lap-time curve must be convex (curvature, inv_coeff >= 0)")
        if not 0 < p.d_lo < p.d_hi:
            raise ValueError("charge-time domain must satisfy 0 < d_lo < d_hi")
        if self._slope(p, p.d_hi) > 1e-12:
            raise ValueError("lap-time curve must be non-increasing on [d_lo, d_hi]")
        if p.in_lap_offset < 0 or p.out_lap_offset < 0:
            raise ValueError("pit-lane offsets must be non-negative")
        self.params = p
        self.charge = ChargeModel(p.e_min, p.e_max, p.power_curve)

    @staticmethod
    def _slope(p, d):
        return p.slope + 2 * p.curvature * d - p.inv_coeff / d ** 2

    def lap_time(self, d):
        p = self.params
        d = np.asarray(d, dtype=float)
        return p.t0 + p.slope * d + p.curvature * d * d + p.inv_coeff / d

    def lap_samples(self, n: int | None = None) -> np.ndarray:
        p = self.params
        x = np.linspace(p.d_lo, p.d_hi, n or p.n_samples)
        return np.column_stack([x, self.lap_time(x)])

    def stint_time(self, n_laps, t_charge):
        """Even energy split over ``n_laps`` laps plus in- and out-lap losses."""
        p = self.params
        return n_laps * self.lap_time(t_charge / n_laps) + p.in_lap_offset + p.out_lap_offset

    def final_stint_time(self, n_laps):
        p = self.params
        return n_laps * self.lap_time(self.charge.t_charge_max / n_laps) + p.out_lap_offset

    def stint_samples(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        t_max = self.charge.t_charge_max
        rows = []
        for n in np.linspace(1.0, p.n_laps_max, 30):
            lo, hi = p.d_lo * n, min(p.d_hi * n, t_max)
            if hi <= lo:
                continue
            for tc in np.linspace(lo, hi, 12):
                rows.append((n, tc, float(self.stint_time(n, tc))))
        n_lo, n_hi = t_max / p.d_hi, min(t_max / p.d_lo, p.n_laps_max)
        final = [(n, float(self.final_stint_time(n))) for n in np.linspace(n_lo, n_hi, 40)]
        return np.array(rows), np.array(final)

    def n_laps_max(self) -> float:
        return min(self.params.n_laps_max, self.charge.t_charge_max / self.params.d_lo)

    def build_maps(self, n_fits: int) -> MapSet:
        samples = self.lap_samples()
        base = fit_pwa_map(samples, n_fits, kind="base")
        inlap = base.shifted(self.params.in_lap_offset, kind="in")
        stint_s, final_s = self.stint_samples()
        stint = fit_stint_model(stint_s, final_s, self.n_laps_max(), 1e-3, self.charge.t_charge_max)
        return MapSet(base, inlap, stint, self.charge)


def synth_ground_truth(params: GroundTruthParams | dict) -> GroundTruth:
    if isinstance(params, dict):
        params = GroundTruthParams.from_dict(params)
    return GroundTruth(params)
