"""Small self-contained mixed-integer convex optimizer."""
from .model import (BINARY, CONTINUOUS, Constraint, LinearModel, MipSolution, ModelError, Variable)
from .simplex import lp_solve
from .bnb import add_oa_cuts, solve_convex, solve_mip

__all__ = ["BINARY", "CONTINUOUS", "Constraint", "LinearModel", "MipSolution", "ModelError",
           "Variable", "lp_solve", "add_oa_cuts", "solve_convex", "solve_mip"]
