"""Exact weighted partial MaxSAT over hard CNF plus soft unit literals.

Small instances only (a few dozen soft units): branch and bound over
deletion sets, guided by unsat cores from one warm CDCL instance. The
independent reference is `brute_force_oracle`, which enumerates soft-unit
subsets in decreasing weight order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .formula import CnfInstance, Lit, Var
from .sat import Solver, _int_lit


class HardUnsatError(Exception):
    """The hard CNF is unsatisfiable on its own."""


@dataclass(frozen=True)
class SoftUnit:
    lit: Lit
    weight: float

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"soft weight must be positive and finite, "
                             f"got {self.weight!r}")


@dataclass(frozen=True)
class MaxSatResult:
    model: tuple  # total assignment satisfying all hard clauses
    chosen: tuple  # sorted soft indices the model satisfies
    weight: float  # sum of weights over chosen


def _satisfied(model, soft) -> tuple:
    return tuple(i for i, s in enumerate(soft)
                 if model[s.lit.var.id] != s.lit.negated)


def _weight_of(indices, soft) -> float:
    return sum(soft[i].weight for i in indices)


def _check_soft(cnf: CnfInstance, soft) -> None:
    for s in soft:
        if not 0 <= s.lit.var.id < cnf.num_vars:
            raise ValueError(f"soft literal var {s.lit.var.id} out of range")


def max_weight(cnf: CnfInstance, soft) -> MaxSatResult:
    """Maximize the total weight of satisfied soft units subject to cnf.

    Branch and bound on deletion sets: a node assumes every non-deleted
    soft literal; an unsat core picks the literals worth deleting next.
    Every candidate is scored by ALL soft units its model satisfies, so the
    first satisfiable node with an empty deletion set is already optimal.
    """
    soft = list(soft)
    _check_soft(cnf, soft)
    s = Solver(cnf)
    base = s.solve_with([])
    if not base.sat:
        raise HardUnsatError("hard clauses are unsatisfiable on their own")
    if not soft:
        return MaxSatResult(base.model, (), 0.0)

    total = _weight_of(range(len(soft)), soft)
    by_lit: dict[int, list[int]] = {}
    for i, u in enumerate(soft):
        by_lit.setdefault(_int_lit(u.lit), []).append(i)

    best_key = None  # (weight, characteristic vector), maximized
    best = None
    visited = set()
    stack = [frozenset()]
    while stack:
        deleted = stack.pop()
        if deleted in visited:
            continue
        visited.add(deleted)
        if best_key is not None:
            bound = total - _weight_of(sorted(deleted), soft)
            if bound < best_key[0] - 1e-12:
                continue  # no descendant can beat the incumbent
        assume, seen = [], set()
        for i, u in enumerate(soft):
            p = _int_lit(u.lit)
            if i not in deleted and p not in seen:
                seen.add(p)
                assume.append(p)
        r = s.solve_with(assume)
        if r.sat:
            chosen = _satisfied(r.model, soft)
            key = (_weight_of(chosen, soft),
                   tuple(1 if i in chosen else 0 for i in range(len(soft))))
            if best_key is None or key > best_key:
                best_key, best = key, MaxSatResult(r.model, chosen, key[0])
            continue
        # every hard model falsifies some core literal: branch on deleting
        # each soft unit carrying one (descending index, so the stack pops
        # low-index deletions first)
        branch = sorted({i for l in r.core for i in by_lit[_int_lit(l)]
                         if i not in deleted})
        assert branch, "empty core under assumptions with satisfiable hard"
        for i in reversed(branch):
            child = deleted | {i}
            if child not in visited:
                stack.append(child)
    return best


def brute_force_oracle(cnf: CnfInstance, soft) -> MaxSatResult:
    """Reference optimum: try soft subsets in decreasing weight order.

    The first subset jointly satisfiable with the hard clauses is optimal
    (any heavier subset would itself have been satisfiable earlier), and
    positive weights force the model to satisfy exactly that subset.
    """
    soft = list(soft)
    if len(soft) > 16:
        raise ValueError(f"{len(soft)} soft units exceeds the oracle bound")
    _check_soft(cnf, soft)
    s = Solver(cnf)
    base = s.solve_with([])
    if not base.sat:
        raise HardUnsatError("hard clauses are unsatisfiable on their own")
    n = len(soft)
    masks = sorted(
        range(1 << n),
        key=lambda m: (-_weight_of([i for i in range(n) if m >> i & 1], soft),
                       tuple(-(m >> i & 1) for i in range(n))))
    for m in masks:
        idx = [i for i in range(n) if m >> i & 1]
        r = s.solve_with([_int_lit(soft[i].lit) for i in idx])
        if r.sat:
            return MaxSatResult(r.model, tuple(idx), _weight_of(idx, soft))
    raise AssertionError("unreachable: the empty subset is satisfiable")


def parse_wdimacs(text: str):
    """Parse WCNF-style text: `h <lits> 0` hard lines, `<w> <lit> 0` soft units.

    Returns (CnfInstance, [SoftUnit]). Comment (`c`) and header (`p`) lines
    are skipped; variables are sized from the header when present, else from
    the literals used.
    """
    hard: list[list[int]] = []
    soft: list[tuple[float, int]] = []
    num_vars = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "cp":
            if line.startswith("p"):
                parts = line.split()
                if len(parts) >= 3 and parts[2].isdigit():
                    num_vars = max(num_vars, int(parts[2]))
            continue
        parts = line.split()
        if parts[-1] != "0":
            raise ValueError(f"line {lineno}: missing terminating 0")
        body = parts[:-1]
        if parts[0] == "h":
            lits = [int(t) for t in body[1:]]
            if not lits:
                raise ValueError(f"line {lineno}: empty hard clause")
            hard.append(lits)
        else:
            if len(body) != 2:
                raise ValueError(f"line {lineno}: soft clauses must be units")
            w, l = float(body[0]), int(body[1])
            soft.append((w, l))
        for l in (lits if parts[0] == "h" else [l]):
            num_vars = max(num_vars, abs(l))
    cls = tuple(tuple(Lit(Var(abs(i) - 1), i < 0) for i in cl) for cl in hard)
    cnf = CnfInstance(num_vars, cls)
    units = [SoftUnit(Lit(Var(abs(l) - 1), l < 0), w) for w, l in soft]
    return cnf, units
