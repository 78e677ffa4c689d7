"""Best-bound branch-and-bound with lazily generated outer-approximation cuts."""
from __future__ import annotations

import heapq
import itertools
import time

import numpy as np

from .model import FEAS_TOL, GAP_TOL, INT_TOL, LinearModel, MipSolution
from .simplex import lp_solve

EPS_T_CHARGE = 1e-3


class CutDomainError(ValueError):
    """A cut generator was asked for a cut outside its domain.

    ``index`` names the variable whose lower bound must be raised to
    ``lower`` before the relaxation is solved again.
    """

    def __init__(self, msg, index, lower=EPS_T_CHARGE):
        super().__init__(msg)
        self.index = index
        self.lower = lower


def add_oa_cuts(model: LinearModel, solution: MipSolution, tol: float = FEAS_TOL, pool=None) -> int:
    """Append one tangent cut per violated convex constraint; returns the count.

    Cuts go to ``pool`` when given, otherwise into ``model.constraints``.
    """
    target = model.constraints if pool is None else pool
    added = 0
    for gen in model.generators:
        if gen.violation(solution.x) > tol:
            target.append(gen.cut(solution.x))
            added += 1
    return added


def _score(model, obj):
    return obj if model.sense == "max" else -obj


def solve_convex(model: LinearModel, lb=None, ub=None, pool=None, max_rounds: int = 50,
                 tol: float = FEAS_TOL, warm=None) -> tuple[MipSolution, int]:
    """Kelley loop on the continuous relaxation: LP, add cuts, repeat.

    Returns the last LP solution and the number of rounds used. The solution
    status is 'optimal' only once every convex constraint holds within
    ``tol``; 'cut-limit' means the round budget ran out first.
    """
    pool = [] if pool is None else pool
    lo, hi = model.bounds()
    lo = lo.copy() if lb is None else np.array(lb, dtype=float)
    hi = hi.copy() if ub is None else np.array(ub, dtype=float)
    iters = 0
    rounds = 0
    while True:
        sol = lp_solve(model, pool, lo, hi, warm=warm)
        iters += sol.lp_iterations
        warm = sol.warm
        if sol.status != "optimal":
            sol.lp_iterations = iters
            return sol, rounds
        try:
            added = add_oa_cuts(model, sol, tol, pool)
        except CutDomainError as exc:
            if lo[exc.index] >= exc.lower:
                raise
            lo[exc.index] = exc.lower
            continue
        if added == 0:
            sol.lp_iterations = iters
            return sol, rounds
        rounds += 1
        if rounds >= max_rounds:
            sol.status = "cut-limit"
            sol.lp_iterations = iters
            return sol, rounds


def _most_fractional(x, binaries):
    best, best_dist = -1, 0.5 + 1.0
    for j in binaries:
        frac = abs(x[j] - round(x[j]))
        if frac <= INT_TOL:
            continue
        dist = abs(x[j] - 0.5)
        if dist < best_dist - 1e-15:
            best, best_dist = j, dist
    return best


def solve_mip(model: LinearModel, node_limit: int = 20000, max_rounds: int = 50,
              gap: float = GAP_TOL) -> MipSolution:
    """Global optimum of a mixed-binary model with convex cut generators.

    Branching picks the most fractional binary (lowest index on ties); the
    open node with the best relaxation bound is expanded next. Cuts are
    globally valid, so a single pool is shared by every node.
    """
    start = time.perf_counter()
    binaries = model.binaries
    pool: list = []
    counter = itertools.count()
    lp_iters = 0
    nodes = 0
    best_x, best_score = None, -np.inf
    heap: list = []
    hit_limit = False

    def evaluate(lo, hi, warm=None):
        nonlocal lp_iters, nodes
        nodes += 1
        sol, _ = solve_convex(model, lo, hi, pool, max_rounds, warm=warm)
        lp_iters += sol.lp_iterations
        return sol

    lo0, hi0 = model.bounds()
    root = evaluate(lo0, hi0)
    root_bound = _score(model, root.objective) if root.status in ("optimal", "cut-limit") else -np.inf
    if root.status in ("optimal", "cut-limit"):
        heapq.heappush(heap, (-root_bound, next(counter), lo0, hi0, root))
    elif root.status != "infeasible":
        return MipSolution(root.status, root.x, root.objective, nodes, len(pool),
                           time.perf_counter() - start, lp_iters)

    while heap:
        neg_bound, _, lo, hi, sol = heapq.heappop(heap)
        bound = -neg_bound
        if best_x is not None and bound <= best_score + gap * max(1.0, abs(best_score)):
            break
        j = _most_fractional(sol.x, binaries)
        if j < 0:
            if sol.status == "optimal" and bound > best_score:
                best_x, best_score = sol.x.copy(), bound
            continue
        if nodes >= node_limit:
            hit_limit = True
            break
        for value in (0.0, 1.0):
            clo, chi = lo.copy(), hi.copy()
            clo[j] = chi[j] = value
            child = evaluate(clo, chi, sol.warm)
            if child.status not in ("optimal", "cut-limit"):
                continue
            cb = _score(model, child.objective)
            if best_x is not None and cb <= best_score + gap * max(1.0, abs(best_score)):
                continue
            heapq.heappush(heap, (-cb, next(counter), clo, chi, child))

    elapsed = time.perf_counter() - start
    if best_x is None:
        status = "iteration-limit" if hit_limit else "infeasible"
        return MipSolution(status, np.full(model.n_vars, np.nan), float("nan"), nodes, len(pool),
                           elapsed, lp_iters, bound=float("nan"))
    x = best_x
    for j in binaries:
        x[j] = float(round(x[j]))
    obj = float(model.objective_vector() @ x)
    status = "iteration-limit" if hit_limit else "optimal"
    return MipSolution(status, x, obj, nodes, len(pool), elapsed, lp_iters,
                       bound=root.objective if root.status == "optimal" else float("nan"))
