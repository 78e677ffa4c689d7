"""Dense bounded-variable dual simplex with warm starts.

Every row ``i`` gets a slack ``s_i`` with ``a_i x + s_i = b_i``; the slack
bounds encode the sense (``<=``: s >= 0, ``>=``: s <= 0, ``==``: s = 0).
All structural variables are boxed, so the all-slack basis with each
structural at its cost-favoured bound is dual feasible and no phase 1 is
needed. Branch-and-bound children and outer-approximation rounds restart
from the parent's basis: bound changes and appended rows keep it dual
feasible, and a few dual pivots restore primal feasibility.

Leaving rows are picked by largest infeasibility, entering columns by a
Harris two-pass ratio test (largest pivot among near-ties, then lowest
index), so a given input always produces the same pivot sequence. After a
run of degenerate pivots the solver switches to Bland's smallest-index
rule until the dual objective moves again, which rules out cycling.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import FEAS_TOL, Constraint, LinearModel, MipSolution

PIVOT_TOL = 1e-9
DUAL_TOL = 1e-9
PRIMAL_TOL = 1e-9
HARRIS_TOL = 1e-10
REFACTOR_EVERY = 50
STALL_PIVOTS = 25


@dataclass(frozen=True)
class WarmStart:
    """Basis snapshot: basic column per row and non-basic bound status."""

    basis: np.ndarray
    at_upper: np.ndarray
    n_cols: int
    n_rows: int
    tableau: np.ndarray | None = None  # B^-1 [A | I] at snapshot time


class _DualSimplex:
    def __init__(self, a, b, c, lo, hi, slo, shi, warm: WarmStart | None = None):
        m, n = a.shape
        self.m, self.n = m, n
        self.full = np.hstack([a, np.eye(m)])
        self.b = b
        self.c = np.concatenate([c, np.zeros(m)])
        self.lo = np.concatenate([lo, slo])
        self.hi = np.concatenate([hi, shi])
        self.fixed = self.hi - self.lo <= 0.0
        self.iterations = 0
        if warm is None or not self._load(warm):
            self._cold()

    def _cold(self):
        m, n = self.m, self.n
        self.basis = n + np.arange(m)
        self.at_upper = np.zeros(n + m, dtype=bool)
        self.at_upper[:n] = self.c[:n] < 0
        self.at_upper[n:] = ~np.isfinite(self.lo[n:])
        if not self.refactor():
            raise np.linalg.LinAlgError("slack basis is singular")

    def _load(self, warm: WarmStart) -> bool:
        if warm.n_cols != self.n or warm.n_rows > self.m:
            return False
        k = warm.n_rows
        self.basis = np.concatenate([warm.basis, self.n + np.arange(k, self.m)]).astype(int)
        self.at_upper = np.zeros(self.n + self.m, dtype=bool)
        self.at_upper[: self.n + k] = warm.at_upper
        self.at_upper[self.n + k:] = ~np.isfinite(self.lo[self.n + k:])
        if warm.tableau is None or warm.tableau.shape != (k, self.n + k):
            return self.refactor()
        # extend the stored tableau by the appended rows (their slacks are basic)
        n, m = self.n, self.m
        t = np.zeros((m, n + m))
        t[:k, : n + k] = warm.tableau
        if m > k:
            new = self.full[k:]
            t[k:] = new - new[:, warm.basis] @ t[:k]
        self.t = t
        return self._finish_load()

    def _finish_load(self) -> bool:
        self.d = self.c - self.c[self.basis] @ self.t
        self.d[self.basis] = 0.0
        if not self._repair_duals():
            return self.refactor()
        binv = self.t[:, self.n:]
        self.beta = binv @ (self.b - self.full @ self.nonbasic_values())
        return bool(np.all(np.isfinite(self.beta)))

    def snapshot(self) -> WarmStart:
        return WarmStart(self.basis.copy(), self.at_upper.copy(), self.n, self.m, self.t.copy())

    def nonbasic_values(self):
        x = np.where(self.at_upper, self.hi, self.lo)
        x[self.basis] = 0.0
        return np.where(np.isfinite(x), x, 0.0)

    def values(self):
        x = self.nonbasic_values()
        x[self.basis] = self.beta
        return x

    def refactor(self) -> bool:
        """Recompute tableau, basic values and reduced costs from the data."""
        bmat = self.full[:, self.basis]
        try:
            binv = np.linalg.inv(bmat)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(binv)):
            return False
        self.t = np.hstack([binv @ self.full[:, : self.n], binv])
        self.d = self.c - self.c[self.basis] @ self.t
        self.d[self.basis] = 0.0
        if not self._repair_duals():
            return False
        self.beta = binv @ (self.b - self.full @ self.nonbasic_values())
        return True

    def _nonbasic_free(self):
        nb = np.ones(self.n + self.m, dtype=bool)
        nb[self.basis] = False
        return nb & ~self.fixed

    def _repair_duals(self) -> bool:
        """Clear tiny dual infeasibilities; flip boxed columns with larger ones."""
        nb = self._nonbasic_free()
        wrong = nb & ((~self.at_upper & (self.d < 0)) | (self.at_upper & (self.d > 0)))
        if not wrong.any():
            return True
        tiny = wrong & (np.abs(self.d) <= 1e3 * DUAL_TOL)
        self.d[tiny] = 0.0
        for j in np.flatnonzero(wrong & ~tiny):
            target_upper = not self.at_upper[j]
            if not np.isfinite(self.hi[j] if target_upper else self.lo[j]):
                return False
            self.at_upper[j] = target_upper
        return True

    def run(self, max_iter, refactor_every=REFACTOR_EVERY) -> str:
        """Dual simplex iterations; 'optimal', 'infeasible', 'singular' or 'iteration-limit'."""
        since = 0
        retried = False
        stall = 0
        while True:
            if self.iterations >= max_iter:
                return "iteration-limit"
            if since >= refactor_every:
                if not self.refactor():
                    return "singular"
                since = 0
            lb, ub = self.lo[self.basis], self.hi[self.basis]
            tol = PRIMAL_TOL * (1.0 + np.abs(self.beta))
            below = np.where(np.isfinite(lb), lb - self.beta, -np.inf)
            above = np.where(np.isfinite(ub), self.beta - ub, -np.inf)
            infeas = np.maximum(below, above)
            r = int(np.argmax(infeas - tol))
            bland = stall >= STALL_PIVOTS
            if bland and infeas[r] > tol[r]:
                rows = np.flatnonzero(infeas > tol)
                r = int(rows[np.argmin(self.basis[rows])])
            if infeas[r] <= tol[r]:
                if since >= 10:
                    if not self.refactor():
                        return "singular"
                    since = 0
                    continue
                return "optimal"
            to_lower = below[r] >= above[r]
            alpha = self.t[r]
            nb = self._nonbasic_free()
            if to_lower:
                elig = nb & (((~self.at_upper) & (alpha < -PIVOT_TOL)) | (self.at_upper & (alpha > PIVOT_TOL)))
            else:
                elig = nb & (((~self.at_upper) & (alpha > PIVOT_TOL)) | (self.at_upper & (alpha < -PIVOT_TOL)))
            idx = np.flatnonzero(elig)
            if idx.size == 0:
                if since and not retried:
                    if not self.refactor():
                        return "singular"
                    since = 0
                    retried = True
                    continue
                return "infeasible"
            retried = False
            size = np.abs(alpha[idx])
            dj = np.abs(self.d[idx])
            if bland:
                ratios = dj / size
                cand = np.flatnonzero(ratios <= ratios.min() + 1e-12)
            else:
                theta = ((dj + HARRIS_TOL) / size).min()
                cand = np.flatnonzero(dj / size <= theta)
                big = size[cand].max()
                cand = cand[size[cand] >= big * (1 - 1e-12)]
            q = int(idx[cand[0]])
            stall = stall + 1 if dj[cand[0]] <= DUAL_TOL else 0
            bound = lb[r] if to_lower else ub[r]
            a_rq = alpha[q]
            delta = (self.beta[r] - bound) / a_rq
            entering_old = self.hi[q] if self.at_upper[q] else self.lo[q]
            col = self.t[:, q].copy()
            leaving = self.basis[r]
            self.beta -= delta * col
            self.beta[r] = entering_old + delta
            ratio = self.d[q] / a_rq
            self.d -= ratio * alpha
            self.d[q] = 0.0
            self.d[leaving] = -ratio
            self.at_upper[leaving] = not to_lower
            self.at_upper[q] = False
            self.t[r] /= a_rq
            col[r] = 0.0
            self.t -= np.outer(col, self.t[r])
            self.basis[r] = q
            self.iterations += 1
            since += 1


def _dense(model: LinearModel, rows):
    n = model.n_vars
    a = np.zeros((len(rows), n))
    b = np.zeros(len(rows))
    senses = []
    for i, row in enumerate(rows):
        for j, v in row.coeffs:
            a[i, j] += v
        b[i] = row.rhs
        senses.append(row.sense)
    return a, b, senses


def _row_violation(a, b, senses, x):
    if len(b) == 0:
        return 0.0
    act = a @ x
    scale = np.maximum(1.0, np.abs(a).max(axis=1))
    viol = np.zeros(len(b))
    for i, sense in enumerate(senses):
        if sense == "<=":
            viol[i] = act[i] - b[i]
        elif sense == ">=":
            viol[i] = b[i] - act[i]
        else:
            viol[i] = abs(act[i] - b[i])
    return float(np.max(viol / scale))


def _col_scale(model: LinearModel) -> np.ndarray:
    """Column equilibration factors from the model rows (cuts excluded).

    Depends only on the model so that warm starts across cut rounds and
    branches see the same scaled columns.
    """
    a, _, _ = _dense(model, model.constraints)
    if a.size:
        rmax = np.abs(a).max(axis=1)
        a = a / np.where(rmax > 0, rmax, 1.0)[:, None]
        cmax = np.abs(a).max(axis=0)
    else:
        cmax = np.zeros(model.n_vars)
    return np.where(cmax > 0, 1.0 / np.where(cmax > 0, cmax, 1.0), 1.0)


def lp_solve(model: LinearModel, extra_rows: list[Constraint] | tuple = (), lb=None, ub=None,
             max_iter: int | None = None, warm: WarmStart | None = None) -> MipSolution:
    """Solve the continuous relaxation of ``model`` (binaries treated as [0, 1]).

    ``lb``/``ub`` override the model bounds (used by branch-and-bound);
    ``extra_rows`` are appended to the model rows (outer-approximation cuts);
    ``warm`` is a basis from an earlier solve of the same model. The returned
    solution carries its own basis in ``solution.warm``.
    """
    start = time.perf_counter()
    rows = list(model.constraints) + list(extra_rows)
    a, b, senses = _dense(model, rows)
    mlb, mub = model.bounds()
    lo = mlb if lb is None else np.asarray(lb, dtype=float)
    hi = mub if ub is None else np.asarray(ub, dtype=float)
    c = model.objective_vector()
    if model.sense == "min":
        c = -c
    cscale = _col_scale(model)
    status, x, iters, snap = _solve_arrays(c, a, b, senses, lo, hi, cscale, max_iter, warm)
    suspicious = (status == "optimal" and _row_violation(a, b, senses, x) > FEAS_TOL) or status == "singular" \
        or (status == "infeasible" and warm is not None)
    if suspicious:
        # cold restart with frequent reinversion
        status, x, more, snap = _solve_arrays(c, a, b, senses, lo, hi, cscale, max_iter, None, safe=True)
        iters += more
    if status == "singular":
        status = "iteration-limit"
    obj = float(model.objective_vector() @ x) if x is not None else float("nan")
    if x is None:
        x = np.full(model.n_vars, np.nan)
    return MipSolution(status, x, obj, wall_time=time.perf_counter() - start, lp_iterations=iters, bound=obj,
                       warm=snap)


def _solve_arrays(c, a, b, senses, lo, hi, cscale, max_iter=None, warm=None, safe=False):
    n = len(c)
    if np.any(lo > hi + 1e-12):
        return "infeasible", None, 0, None
    hi = np.maximum(hi, lo)
    m = len(b)
    a_s = a * cscale[None, :]
    rmax = np.abs(a_s).max(axis=1) if m else np.zeros(0)
    rscale = 1.0 / np.where(rmax > 0, rmax, 1.0)
    a_s = a_s * rscale[:, None]
    b_s = b * rscale
    lo_s, hi_s = lo / cscale, hi / cscale
    slo = np.array([0.0 if s in ("<=", "==") else -np.inf for s in senses])
    shi = np.array([0.0 if s in (">=", "==") else np.inf for s in senses])
    cmax = float(np.abs(c).max(initial=0.0))
    cost = -(c * cscale) / (cmax if cmax > 0 else 1.0)  # minimisation form
    ds = _DualSimplex(a_s, b_s, cost, lo_s, hi_s, slo, shi, None if safe else warm)
    limit = max_iter or 20 * (m + n) + 1000
    status = ds.run(limit, 5 if safe else REFACTOR_EVERY)
    if status != "optimal":
        return status, None, ds.iterations, None
    y = np.clip(ds.values()[:n], lo_s, hi_s)
    return "optimal", y * cscale, ds.iterations, ds.snapshot()
