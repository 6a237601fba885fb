"""Conflict-driven clause-learning SAT with assumptions and unsat cores.

Internally a literal is the int ``2*var + (1 if negated)``, negated with
``^ 1``. Assumptions are placed as pseudo-decisions below all heuristic
decisions, MiniSat-style, so a failed query yields a final-conflict core
over the assumption literals. Everything is deterministic: ties break on
variable index and there is no randomness anywhere.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .formula import CnfInstance, Lit, Var

UNDEF = -1


def _int_lit(l: Lit) -> int:
    return l.var.id << 1 | (1 if l.negated else 0)


def _ext_lit(i: int) -> Lit:
    return Lit(Var(i >> 1), bool(i & 1))


@dataclass(frozen=True)
class SolveOutcome:
    """Either a satisfying model or an unsat core over the assumptions."""

    sat: bool
    model: tuple = None  # tuple[bool, ...] over all vars when sat
    core: tuple = None  # tuple[Lit, ...] subset of assumptions when unsat
    stats: dict = field(default_factory=dict, compare=False)


class Solver:
    """One CDCL instance over a fixed CNF, reusable across assumption sets.

    Learned clauses are implied by the CNF alone (assumptions enter the
    search only as decisions, never as resolution premises), so keeping an
    instance warm across calls with different assumptions is sound.
    """

    def __init__(self, cnf: CnfInstance):
        n = cnf.num_vars
        self.n = n
        self.ok = True  # False once the CNF is root-level contradictory
        self.val = [UNDEF] * n
        self.level = [0] * n
        self.reason = [None] * n  # clause index, or None for decisions
        self.trail: list[int] = []
        self.trail_lim: list[int] = []
        self.qhead = 0
        self.clauses: list[list[int]] = []
        # watches[p] lists clauses with a watched literal falsified when p
        # becomes true (i.e. clauses watching p^1)
        self.watches: list[list[int]] = [[] for _ in range(2 * n)]
        self.activity = [0.0] * n
        self.var_inc = 1.0
        self.heap = [(0.0, v) for v in range(n)]  # (-activity, var), lazy
        self.seen = bytearray(n)
        self.n_conflicts = self.n_decisions = self.n_props = 0
        for cl in cnf.clauses:
            self.add_clause([_int_lit(l) for l in cl])

    # ----- assignment primitives -----------------------------------------

    def lit_value(self, p: int) -> int:
        v = self.val[p >> 1]
        return UNDEF if v == UNDEF else v ^ (p & 1)

    def enqueue(self, p: int, reason) -> None:
        v = p >> 1
        self.val[v] = (p & 1) ^ 1
        self.level[v] = len(self.trail_lim)
        self.reason[v] = reason
        self.trail.append(p)

    def cancel_until(self, lvl: int) -> None:
        if len(self.trail_lim) <= lvl:
            return
        for p in reversed(self.trail[self.trail_lim[lvl]:]):
            v = p >> 1
            self.val[v] = UNDEF
            self.reason[v] = None
            heapq.heappush(self.heap, (-self.activity[v], v))
        del self.trail[self.trail_lim[lvl]:]
        del self.trail_lim[lvl:]
        self.qhead = len(self.trail)

    # ----- clause ingestion (root level only) -----------------------------

    def add_clause(self, lits: list[int]) -> None:
        if not self.ok:
            return
        out, have = [], set()
        for p in lits:
            if p in have:
                continue
            if p ^ 1 in have:
                return  # tautology
            w = self.lit_value(p)
            if w == 1:
                return  # satisfied at root
            if w == 0:
                continue  # falsified at root, drop literal
            have.add(p)
            out.append(p)
        if not out:
            self.ok = False
        elif len(out) == 1:
            self.enqueue(out[0], None)
        else:
            self._attach(out)

    def _attach(self, c: list[int]) -> int:
        ci = len(self.clauses)
        self.clauses.append(c)
        self.watches[c[0] ^ 1].append(ci)
        self.watches[c[1] ^ 1].append(ci)
        return ci

    # ----- search ---------------------------------------------------------

    def propagate(self):
        """Unit propagation; returns a conflicting clause index or None."""
        while self.qhead < len(self.trail):
            p = self.trail[self.qhead]
            self.qhead += 1
            self.n_props += 1
            ws = self.watches[p]
            self.watches[p] = []
            j = 0
            while j < len(ws):
                ci = ws[j]
                j += 1
                c = self.clauses[ci]
                if c[0] == p ^ 1:
                    c[0], c[1] = c[1], c[0]
                # c[1] is now the falsified watch
                if self.lit_value(c[0]) == 1:
                    self.watches[p].append(ci)
                    continue
                for k in range(2, len(c)):
                    if self.lit_value(c[k]) != 0:
                        c[1], c[k] = c[k], c[1]
                        self.watches[c[1] ^ 1].append(ci)
                        break
                else:
                    self.watches[p].append(ci)
                    if self.lit_value(c[0]) == 0:
                        self.watches[p].extend(ws[j:])
                        return ci
                    self.enqueue(c[0], ci)
        return None

    def bump(self, v: int) -> None:
        a = self.activity[v] + self.var_inc
        self.activity[v] = a
        if a > 1e100:
            self.activity = [x * 1e-100 for x in self.activity]
            self.var_inc *= 1e-100
            self.heap = [(-self.activity[u], u) for u in range(self.n)
                         if self.val[u] == UNDEF]
            heapq.heapify(self.heap)
        elif self.val[v] == UNDEF:
            heapq.heappush(self.heap, (-a, v))

    def pick_branch(self) -> int:
        # every unassigned var has a heap entry carrying its current
        # activity; anything else popped here is stale
        while True:
            na, v = heapq.heappop(self.heap)
            if self.val[v] == UNDEF and -na == self.activity[v]:
                return v

    def analyze(self, confl: int):
        """First-UIP conflict analysis -> (learnt clause, backjump level)."""
        cur = len(self.trail_lim)
        seen = self.seen
        learnt: list[int] = []
        touched: list[int] = []
        path = 0
        p = None
        idx = len(self.trail) - 1
        while True:
            c = self.clauses[confl]
            # a reason clause implies its first literal, so skip it there
            for q in (c if p is None else c[1:]):
                v = q >> 1
                if not seen[v] and self.level[v] > 0:
                    seen[v] = 1
                    touched.append(v)
                    self.bump(v)
                    if self.level[v] == cur:
                        path += 1
                    else:
                        learnt.append(q)
            while not seen[self.trail[idx] >> 1]:
                idx -= 1
            p = self.trail[idx]
            v = p >> 1
            confl = self.reason[v]
            seen[v] = 0
            idx -= 1
            path -= 1
            if path == 0:
                break
        for v in touched:
            seen[v] = 0
        learnt.insert(0, p ^ 1)
        if len(learnt) == 1:
            return learnt, 0
        k = max(range(1, len(learnt)), key=lambda i: self.level[learnt[i] >> 1])
        learnt[1], learnt[k] = learnt[k], learnt[1]
        return learnt, self.level[learnt[1] >> 1]

    def _final_core(self, p: int, assumptions) -> tuple:
        """Assumption literals implying the falsification of assumption p."""
        out = {p}
        if self.trail_lim:
            seen = self.seen
            touched = [p >> 1]
            seen[p >> 1] = 1
            for i in range(len(self.trail) - 1, self.trail_lim[0] - 1, -1):
                q = self.trail[i]
                v = q >> 1
                if not seen[v]:
                    continue
                if self.reason[v] is None:
                    out.add(q)  # assumption pseudo-decision
                else:
                    for r in self.clauses[self.reason[v]][1:]:
                        u = r >> 1
                        if not seen[u]:
                            seen[u] = 1
                            touched.append(u)
                seen[v] = 0
            for v in touched:
                seen[v] = 0
        order = {q: i for i, q in enumerate(assumptions)}
        return tuple(sorted(out, key=lambda q: order.get(q, -1)))

    def solve_with(self, assumptions) -> SolveOutcome:
        """Search under the given assumption literals (ints)."""
        c0, d0, p0 = self.n_conflicts, self.n_decisions, self.n_props

        def done(sat, model=None, core=None):
            return SolveOutcome(
                sat, model=model, core=core,
                stats={"conflicts": self.n_conflicts - c0,
                       "decisions": self.n_decisions - d0,
                       "propagations": self.n_props - p0})

        self.cancel_until(0)
        if self.ok and self.propagate() is not None:
            self.ok = False
        if not self.ok:
            return done(False, core=())
        restarts = 0
        budget = 100 * _luby(restarts)
        conflicts = 0
        while True:
            confl = self.propagate()
            if confl is not None:
                self.n_conflicts += 1
                conflicts += 1
                if not self.trail_lim:
                    self.ok = False
                    return done(False, core=())
                learnt, bj = self.analyze(confl)
                self.cancel_until(bj)
                if len(learnt) == 1:
                    self.enqueue(learnt[0], None)
                else:
                    self.enqueue(learnt[0], self._attach(learnt))
                self.var_inc /= 0.95  # activity decay, applied as inflation
                continue
            if conflicts >= budget:
                restarts += 1
                conflicts = 0
                budget = 100 * _luby(restarts)
                self.cancel_until(0)
                continue
            lvl = len(self.trail_lim)
            if lvl < len(assumptions):
                a = assumptions[lvl]
                w = self.lit_value(a)
                if w == 0:
                    core = self._final_core(a, assumptions)
                    return done(False, core=tuple(_ext_lit(q) for q in core))
                self.trail_lim.append(len(self.trail))  # dummy if already true
                if w == UNDEF:
                    self.enqueue(a, None)
                continue
            if len(self.trail) == self.n:
                return done(True, model=tuple(x == 1 for x in self.val))
            v = self.pick_branch()
            self.n_decisions += 1
            self.trail_lim.append(len(self.trail))
            self.enqueue(v << 1 | 1, None)  # default phase: false


def _luby(i: int) -> int:
    """Luby restart sequence 1,1,2,1,1,2,4,... at 0-based index i."""
    size, seq = 1, 0
    while size < i + 1:
        seq += 1
        size = 2 * size + 1
    while size - 1 != i:
        size = (size - 1) >> 1
        seq -= 1
        i %= size
    return 1 << seq


def _check_assumptions(cnf: CnfInstance, assumptions) -> list[int]:
    out = []
    for l in assumptions:
        if not 0 <= l.var.id < cnf.num_vars:
            raise ValueError(f"assumption var {l.var.id} out of range")
        out.append(_int_lit(l))
    return out


def solve(cnf: CnfInstance, assumptions=()) -> SolveOutcome:
    """Decide cnf under assumptions with a fresh solver (a pure function)."""
    assumptions = tuple(assumptions)
    ints = _check_assumptions(cnf, assumptions)
    out = Solver(cnf).solve_with(ints)
    if __debug__ and out.sat:
        assert _model_ok(cnf, out.model, assumptions)
    return out


def _model_ok(cnf: CnfInstance, model, assumptions) -> bool:
    holds = lambda l: model[l.var.id] != l.negated
    return (all(any(holds(l) for l in cl) for cl in cnf.clauses)
            and all(holds(l) for l in assumptions))


def minimize_core(cnf: CnfInstance, core) -> tuple:
    """Shrink an unsat core until dropping any one element gives Sat.

    Deletion-based, scanning in reverse assumption order; each Unsat
    sub-solve's final conflict replaces the remaining candidate list, which
    skips whole groups of redundant assumptions at once.
    """
    core = tuple(core)
    ints = _check_assumptions(cnf, core)
    s = Solver(cnf)
    first = s.solve_with(ints)
    if first.sat:
        raise ValueError("cnf is satisfiable under the given core; "
                         "nothing to minimize")
    work = [_int_lit(l) for l in first.core]
    kept: list[int] = []
    while work:
        cand = work.pop()
        r = s.solve_with(kept + work)
        if r.sat:
            kept.append(cand)  # dropping cand flipped the verdict: necessary
        else:
            drop = set(kept)
            work = [q for q in (_int_lit(l) for l in r.core) if q not in drop]
    order = {q: i for i, q in enumerate(ints)}
    return tuple(_ext_lit(q) for q in sorted(kept, key=lambda q: order[q]))


def solve_by_enumeration(cnf: CnfInstance, assumptions=()) -> SolveOutcome:
    """Truth-table reference solver: one bigint bit per assignment.

    Verdict-grade only — an unsat `core` is the full assumption list, not
    a refined one. Limited to 24 variables (16M-bit integers).
    """
    n = cnf.num_vars
    if n > 24:
        raise ValueError(f"{n} vars is too many to enumerate")
    assumptions = tuple(assumptions)
    _check_assumptions(cnf, assumptions)
    ones = (1 << (1 << n)) - 1
    cols = []
    for v in range(n):
        half = 1 << v
        unit = ((1 << half) - 1) << half
        cols.append(unit * (ones // ((1 << (2 * half)) - 1)))

    def lit_col(l: Lit) -> int:
        c = cols[l.var.id]
        return ones ^ c if l.negated else c

    acc = ones
    for cl in cnf.clauses:
        m = 0
        for l in cl:
            m |= lit_col(l)
        acc &= m
    for a in assumptions:
        acc &= lit_col(a)
    if acc == 0:
        return SolveOutcome(False, core=assumptions)
    t = (acc & -acc).bit_length() - 1
    return SolveOutcome(True, model=tuple(bool((t >> v) & 1) for v in range(n)))
