"""Model container for small mixed-integer programs with convex cut generators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"
SENSES = ("<=", ">=", "==")

FEAS_TOL = 1e-6
INT_TOL = 1e-6
GAP_TOL = 1e-6


class ModelError(ValueError):
    """Malformed model (bad bounds, unknown variable, non-finite data)."""


@dataclass(frozen=True)
class Variable:
    name: str
    lb: float
    ub: float
    kind: str = CONTINUOUS


@dataclass(frozen=True)
class Constraint:
    coeffs: tuple[tuple[int, float], ...]
    sense: str
    rhs: float
    name: str = ""


class CutGenerator(Protocol):
    """A convex constraint ``g(x) <= 0`` handled by outer approximation."""

    name: str

    def violation(self, x: np.ndarray) -> float:
        """Amount by which ``x`` violates the constraint (<= 0 when satisfied)."""

    def cut(self, x: np.ndarray) -> Constraint:
        """A linear inequality valid for the feasible set and tight at ``x``."""


@dataclass
class LinearModel:
    """Variables, linear rows, objective and the convex cut generators.

    Rows are kept sparse as ``(index, coefficient)`` tuples; the solver
    densifies them. ``big_m`` records the big-M constants the builder used so
    that they travel with the instance.
    """

    variables: list[Variable] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    sense: str = "max"
    generators: list = field(default_factory=list)
    big_m: dict[str, float] = field(default_factory=dict)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def add_var(self, name: str, lb: float, ub: float, kind: str = CONTINUOUS) -> int:
        if name in self._index:
            raise ModelError(f"duplicate variable {name!r}")
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind {kind!r}")
        lb, ub = float(lb), float(ub)
        if not (math.isfinite(lb) and math.isfinite(ub)):
            raise ModelError(f"variable {name!r} needs finite bounds")
        if kind == BINARY and not (0.0 <= lb <= ub <= 1.0 and lb in (0.0, 1.0) and ub in (0.0, 1.0)):
            raise ModelError(f"binary {name!r} must have bounds within [0, 1]")
        if lb > ub:
            raise ModelError(f"variable {name!r} has lb > ub ({lb} > {ub})")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, lb, ub, kind))
        return self._index[name]

    def var(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ModelError(f"unknown variable {name!r}") from None

    def add_constr(self, coeffs: dict, sense: str, rhs: float, name: str = "") -> Constraint:
        row = self.make_row(coeffs, sense, rhs, name)
        self.constraints.append(row)
        return row

    def make_row(self, coeffs: dict, sense: str, rhs: float, name: str = "") -> Constraint:
        if sense not in SENSES:
            raise ModelError(f"unknown sense {sense!r}")
        items = []
        for key, val in coeffs.items():
            j = self.var(key) if isinstance(key, str) else int(key)
            if not 0 <= j < len(self.variables):
                raise ModelError(f"variable index {j} out of range")
            val = float(val)
            if not math.isfinite(val):
                raise ModelError(f"non-finite coefficient in row {name!r}")
            if val != 0.0:
                items.append((j, val))
        rhs = float(rhs)
        if not math.isfinite(rhs):
            raise ModelError(f"non-finite rhs in row {name!r}")
        items.sort()
        return Constraint(tuple(items), sense, rhs, name)

    def set_objective(self, coeffs: dict, sense: str = "max") -> None:
        if sense not in ("max", "min"):
            raise ModelError(f"unknown objective sense {sense!r}")
        self.objective = {}
        for key, val in coeffs.items():
            j = self.var(key) if isinstance(key, str) else int(key)
            self.objective[j] = self.objective.get(j, 0.0) + float(val)
        self.sense = sense

    def add_generator(self, gen) -> None:
        self.generators.append(gen)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def binaries(self) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.kind == BINARY]

    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lb = np.array([v.lb for v in self.variables])
        ub = np.array([v.ub for v in self.variables])
        return lb, ub

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self.objective.items():
            c[j] = v
        return c

    def copy(self) -> "LinearModel":
        m = LinearModel(list(self.variables), list(self.constraints), dict(self.objective),
                        self.sense, list(self.generators), dict(self.big_m))
        m._index = dict(self._index)
        return m

    def with_bounds(self, overrides: dict) -> "LinearModel":
        """Copy with some variable bounds replaced (``{name_or_index: (lb, ub)}``)."""
        m = self.copy()
        for key, (lb, ub) in overrides.items():
            j = m.var(key) if isinstance(key, str) else int(key)
            v = m.variables[j]
            m.variables[j] = Variable(v.name, float(lb), float(ub), v.kind)
        return m

    def row_activity(self, row: Constraint, x: np.ndarray) -> float:
        return float(sum(a * x[j] for j, a in row.coeffs))

    def max_violation(self, x: np.ndarray, rows=None) -> float:
        """Largest bound or row violation of ``x`` (0 when feasible)."""
        lb, ub = self.bounds()
        worst = float(max(0.0, np.max(lb - x, initial=0.0), np.max(x - ub, initial=0.0)))
        for row in (self.constraints if rows is None else rows):
            act = self.row_activity(row, x)
            if row.sense == "<=":
                worst = max(worst, act - row.rhs)
            elif row.sense == ">=":
                worst = max(worst, row.rhs - act)
            else:
                worst = max(worst, abs(act - row.rhs))
        return worst

    def to_lp_format(self) -> str:
        """CPLEX LP text, for cross-checking with external solvers."""
        names = [_lp_name(v.name) for v in self.variables]

        def expr(pairs):
            parts = []
            for j, a in pairs:
                sign = "-" if a < 0 else "+"
                parts.append(f"{sign} {abs(a):.17g} {names[j]}")
            s = " ".join(parts) or "0 " + names[0]
            return s[2:] if s.startswith("+ ") else s

        lines = ["\\ generated by enduro", "Maximize" if self.sense == "max" else "Minimize",
                 " obj: " + expr(sorted(self.objective.items())), "Subject To"]
        for i, row in enumerate(self.constraints):
            op = {"<=": "<=", ">=": ">=", "==": "="}[row.sense]
            label = _lp_name(row.name) if row.name else f"c{i}"
            lines.append(f" {label}_{i}: {expr(row.coeffs)} {op} {row.rhs:.17g}")
        lines.append("Bounds")
        for v, n in zip(self.variables, names):
            lines.append(f" {v.lb:.17g} <= {n} <= {v.ub:.17g}")
        bins = [n for v, n in zip(self.variables, names) if v.kind == BINARY]
        if bins:
            lines.append("Binaries")
            lines.append(" " + " ".join(bins))
        lines.append("End")
        return "\n".join(lines) + "\n"


def _lp_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in name)


@dataclass
class MipSolution:
    status: str
    x: np.ndarray
    objective: float
    nodes: int = 0
    cuts: int = 0
    wall_time: float = 0.0
    lp_iterations: int = 0
    bound: float = float("nan")
    warm: object = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def value(self, model: LinearModel, name: str) -> float:
        return float(self.x[model.var(name)])
