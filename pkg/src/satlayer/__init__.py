"""Differentiable constraint-solver layers over a self-contained SAT stack.

The package stacks, bottom to top: a formula DSL with CNF compilation and
bitvector arithmetic (`formula`), a CDCL solver with assumption cores
(`sat`), exact weighted partial MaxSAT (`maxsat`), the solver layer's
forward/backward algorithms (`layer`), a small autodiff kernel (`nn`), task
harnesses (`tasks`), and an experiment CLI (`cli`).
"""

from .formula import (BitVec, CnfInstance, Context, Lit, Var, bv_add, bv_eq,
                      bv_mul, bv_mul_const, from_dimacs, to_dimacs, tseitin)
from .sat import SolveOutcome, Solver, minimize_core, solve
from .maxsat import MaxSatResult, SoftUnit, brute_force_oracle, max_weight
from .layer import (ForwardRecord, LayerSpec, SolveCache, backward_core,
                    backward_max, corrected_output, forward_max, forward_smt)

__version__ = "0.1.0"

__all__ = [
    "BitVec", "CnfInstance", "Context", "Lit", "Var", "bv_add", "bv_eq",
    "bv_mul", "bv_mul_const", "from_dimacs", "to_dimacs", "tseitin",
    "SolveOutcome", "Solver", "minimize_core", "solve",
    "MaxSatResult", "SoftUnit", "brute_force_oracle", "max_weight",
    "ForwardRecord", "LayerSpec", "SolveCache", "backward_core",
    "backward_max", "corrected_output", "forward_max", "forward_smt",
    "__version__",
]
