"""Propositional + fixed-width bitvector constraint DSL, compiled to CNF.

Formulas are built over atoms allocated from a Context (one arena per
formula). Compilation is a Tseitin transformation that asserts the root;
designated input/output atoms ("ports") keep their arena ids so CNF literals
stay stable, with definitional variables appended after them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations


# ---------------------------------------------------------------------------
# Variables and literals

@dataclass(frozen=True, order=True)
class Var:
    id: int  # dense 0-based arena index


@dataclass(frozen=True, order=True)
class Lit:
    var: Var
    negated: bool = False

    def __invert__(self) -> "Lit":
        return Lit(self.var, not self.negated)


class Context:
    """Arena allocating dense variable ids for one formula."""

    def __init__(self):
        self._count = 0

    @property
    def num_vars(self) -> int:
        return self._count

    def var(self) -> Var:
        v = Var(self._count)
        self._count += 1
        return v

    def vars(self, n: int) -> list[Var]:
        return [self.var() for _ in range(n)]

    def lits(self, n: int) -> list[Lit]:
        return [Lit(v) for v in self.vars(n)]


# ---------------------------------------------------------------------------
# Formula AST. Smart constructors below fold constants; the raw dataclasses
# stay dumb so trees are hashable and printable.

@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class Atom:
    var: Var


@dataclass(frozen=True)
class Not:
    arg: "BoolFormula"


@dataclass(frozen=True)
class And:
    args: tuple


@dataclass(frozen=True)
class Or:
    args: tuple


@dataclass(frozen=True)
class Xor:
    a: "BoolFormula"
    b: "BoolFormula"


@dataclass(frozen=True)
class Iff:
    a: "BoolFormula"
    b: "BoolFormula"


@dataclass(frozen=True)
class Implies:
    a: "BoolFormula"
    b: "BoolFormula"


@dataclass(frozen=True)
class ExactlyK:
    lits: tuple  # of Lit
    k: int


BoolFormula = Const | Atom | Not | And | Or | Xor | Iff | Implies | ExactlyK

TRUE = Const(True)
FALSE = Const(False)


def atom(x: Var | Lit) -> BoolFormula:
    if isinstance(x, Var):
        return Atom(x)
    return Not(Atom(x.var)) if x.negated else Atom(x.var)


def lit_formula(b: "Lit | bool") -> BoolFormula:
    """A bitvector bit (Lit or constant) as a formula."""
    if isinstance(b, bool):
        return Const(b)
    return atom(b)


def neg(f: BoolFormula) -> BoolFormula:
    if isinstance(f, Const):
        return Const(not f.value)
    if isinstance(f, Not):
        return f.arg
    return Not(f)


def conj(*fs: BoolFormula) -> BoolFormula:
    out = []
    for f in fs:
        if isinstance(f, Const):
            if not f.value:
                return FALSE
            continue  # drop neutral TRUE
        if isinstance(f, And):
            out.extend(f.args)
        else:
            out.append(f)
    if not out:
        return TRUE
    if len(out) == 1:
        return out[0]
    return And(tuple(out))


def disj(*fs: BoolFormula) -> BoolFormula:
    out = []
    for f in fs:
        if isinstance(f, Const):
            if f.value:
                return TRUE
            continue
        if isinstance(f, Or):
            out.extend(f.args)
        else:
            out.append(f)
    if not out:
        return FALSE
    if len(out) == 1:
        return out[0]
    return Or(tuple(out))


def xor(a: BoolFormula, b: BoolFormula) -> BoolFormula:
    if isinstance(a, Const):
        return neg(b) if a.value else b
    if isinstance(b, Const):
        return neg(a) if b.value else a
    return Xor(a, b)


def iff(a: BoolFormula, b: BoolFormula) -> BoolFormula:
    if isinstance(a, Const):
        return b if a.value else neg(b)
    if isinstance(b, Const):
        return a if b.value else neg(a)
    return Iff(a, b)


def implies(a: BoolFormula, b: BoolFormula) -> BoolFormula:
    if isinstance(a, Const):
        return b if a.value else TRUE
    if isinstance(b, Const):
        return TRUE if b.value else neg(a)
    return Implies(a, b)


def exactly_k(lits, k: int) -> BoolFormula:
    """Satisfied exactly when k of the literals are true."""
    lits = tuple(lits)
    if not 0 <= k <= len(lits):
        raise ValueError(f"k={k} out of range for {len(lits)} literals")
    if k == 0:
        return conj(*(neg(atom(l)) for l in lits))
    if k == len(lits):
        return conj(*(atom(l) for l in lits))
    return ExactlyK(lits, k)


def atoms(f: BoolFormula) -> set[Var]:
    """All variables occurring in f."""
    out: set[Var] = set()
    stack = [f]
    while stack:
        g = stack.pop()
        if isinstance(g, Atom):
            out.add(g.var)
        elif isinstance(g, Not):
            stack.append(g.arg)
        elif isinstance(g, (And, Or)):
            stack.extend(g.args)
        elif isinstance(g, (Xor, Iff, Implies)):
            stack.append(g.a)
            stack.append(g.b)
        elif isinstance(g, ExactlyK):
            out.update(l.var for l in g.lits)
    return out


def evaluate(f: BoolFormula, assignment: dict[Var, bool]) -> bool:
    """Truth value of f under a total assignment to its atoms."""
    if isinstance(f, Const):
        return f.value
    if isinstance(f, Atom):
        return assignment[f.var]
    if isinstance(f, Not):
        return not evaluate(f.arg, assignment)
    if isinstance(f, And):
        return all(evaluate(g, assignment) for g in f.args)
    if isinstance(f, Or):
        return any(evaluate(g, assignment) for g in f.args)
    if isinstance(f, Xor):
        return evaluate(f.a, assignment) != evaluate(f.b, assignment)
    if isinstance(f, Iff):
        return evaluate(f.a, assignment) == evaluate(f.b, assignment)
    if isinstance(f, Implies):
        return (not evaluate(f.a, assignment)) or evaluate(f.b, assignment)
    if isinstance(f, ExactlyK):
        n = sum(assignment[l.var] != l.negated for l in f.lits)
        return n == f.k
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# CNF

@dataclass(frozen=True)
class CnfInstance:
    """Clausal form with designated input (z) and output (y) port literals."""

    num_vars: int
    clauses: tuple  # of tuple[Lit, ...], each non-empty
    z_ports: tuple = ()
    y_ports: tuple = ()

    def __post_init__(self):
        for cl in self.clauses:
            if not cl:
                raise ValueError("empty clause")
            for l in cl:
                if not 0 <= l.var.id < self.num_vars:
                    raise ValueError(f"literal var {l.var.id} out of range")
        for name, ports in (("z", self.z_ports), ("y", self.y_ports)):
            ids = [l.var.id for l in ports]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {name}_ports")
            for i in ids:
                if not 0 <= i < self.num_vars:
                    raise ValueError(f"{name}_port var {i} out of range")

    @property
    def p(self) -> int:
        return len(self.z_ports)

    @property
    def q(self) -> int:
        return len(self.y_ports)


def _as_port_lits(ports) -> tuple:
    return tuple(Lit(p) if isinstance(p, Var) else p for p in ports)


def _expand_exactly_k(node: ExactlyK, ctx: Context) -> BoolFormula:
    """Lower a cardinality node to plain connectives.

    Binomial expansion for up to 6 literals, sequential counter above
    (registers are fresh arena atoms, so the rewrite stays a formula).
    """
    lits, k, n = node.lits, node.k, len(node.lits)
    fs = [atom(l) for l in lits]
    if k == 0:
        return conj(*(neg(g) for g in fs))
    if k == n:
        return conj(*fs)
    if n <= 6:
        parts = []
        # at most k: no k+1 of them all true
        for sub in combinations(fs, k + 1):
            parts.append(disj(*(neg(g) for g in sub)))
        # at least k: any n-k+1 of them contain a true one
        for sub in combinations(fs, n - k + 1):
            parts.append(disj(*sub))
        return conj(*parts)
    # s[i][j] <-> at least j+1 of the first i+1 literals are true
    width = min(k + 1, n)
    s = [[atom(v) for v in ctx.vars(width)] for _ in range(n)]
    defs = [iff(s[0][0], fs[0])]
    defs += [iff(s[0][j], FALSE) for j in range(1, width)]
    for i in range(1, n):
        defs.append(iff(s[i][0], disj(s[i - 1][0], fs[i])))
        for j in range(1, width):
            defs.append(iff(s[i][j], disj(s[i - 1][j], conj(s[i - 1][j - 1], fs[i]))))
    count_k = s[n - 1][k - 1]
    over_k = s[n - 1][k] if k < width else FALSE
    return conj(*defs, count_k, neg(over_k))


def _simplify(f: BoolFormula) -> BoolFormula:
    """Rebuild through the folding constructors so Const only survives at the root."""
    if isinstance(f, (Const, Atom)):
        return f
    if isinstance(f, Not):
        return neg(_simplify(f.arg))
    if isinstance(f, And):
        return conj(*(_simplify(g) for g in f.args))
    if isinstance(f, Or):
        return disj(*(_simplify(g) for g in f.args))
    if isinstance(f, Xor):
        return xor(_simplify(f.a), _simplify(f.b))
    if isinstance(f, Iff):
        return iff(_simplify(f.a), _simplify(f.b))
    if isinstance(f, Implies):
        return implies(_simplify(f.a), _simplify(f.b))
    if isinstance(f, ExactlyK):
        return f
    raise TypeError(f"not a formula: {f!r}")


def tseitin(f: BoolFormula, ctx: Context, z_ports=(), y_ports=()) -> CnfInstance:
    """Clausify f, asserting it, with stable port literals.

    The result is equisatisfiable with f, and every total assignment to f's
    atoms extends to exactly the CNF models that restrict to it (satisfying
    assignments extend uniquely, falsifying ones not at all).
    """
    f = _simplify(f)
    if isinstance(f, Const):
        raise ValueError("formula folds to a constant; nothing to compile")

    clauses: list[tuple[int, ...]] = []  # ints: +(id+1) / -(id+1)
    memo: dict[int, int] = {}  # id(node) -> defining literal
    # memo keys are object ids, so every memoized node must stay alive for
    # the whole compile: cardinality lowering builds throwaway trees whose
    # ids would otherwise be recycled and collide.
    pins: list = []

    def compile_node(node) -> int:
        key = id(node)
        if key in memo:
            return memo[key]
        pins.append(node)
        if isinstance(node, Atom):
            out = node.var.id + 1
        elif isinstance(node, Not):
            out = -compile_node(node.arg)
        elif isinstance(node, ExactlyK):
            out = compile_node(_simplify(_expand_exactly_k(node, ctx)))
        elif isinstance(node, And):
            parts = [compile_node(g) for g in node.args]
            d = ctx.var().id + 1
            for p in parts:
                clauses.append((-d, p))
            clauses.append(tuple([d] + [-p for p in parts]))
            out = d
        elif isinstance(node, Or):
            parts = [compile_node(g) for g in node.args]
            d = ctx.var().id + 1
            for p in parts:
                clauses.append((d, -p))
            clauses.append(tuple([-d] + parts))
            out = d
        elif isinstance(node, (Xor, Iff)):
            a, b = compile_node(node.a), compile_node(node.b)
            d = ctx.var().id + 1
            if isinstance(node, Iff):
                b = -b  # a iff b  ==  a xor (not b); reuse the xor clauses
            # (-d | a | b) (-d | -a | -b) (d | a | -b) (d | -a | b)
            clauses.append((-d, a, b))
            clauses.append((-d, -a, -b))
            clauses.append((d, a, -b))
            clauses.append((d, -a, b))
            out = d
        elif isinstance(node, Implies):
            a, b = compile_node(node.a), compile_node(node.b)
            d = ctx.var().id + 1
            clauses.append((-d, -a, b))
            clauses.append((d, a))
            clauses.append((d, -b))
            out = d
        else:
            raise TypeError(f"cannot compile {node!r}")
        memo[key] = out
        return out

    root = compile_node(f)
    clauses.append((root,))
    lit_of = lambda i: Lit(Var(abs(i) - 1), i < 0)
    return CnfInstance(
        num_vars=ctx.num_vars,
        clauses=tuple(tuple(lit_of(i) for i in cl) for cl in clauses),
        z_ports=_as_port_lits(z_ports),
        y_ports=_as_port_lits(y_ports),
    )


# ---------------------------------------------------------------------------
# Bitvectors, most-significant bit first; arithmetic is modulo 2**width.

@dataclass(frozen=True)
class BitVec:
    bits: tuple  # of Lit | bool, MSB first

    def __post_init__(self):
        if not self.bits:
            raise ValueError("zero-width bitvector")

    @property
    def width(self) -> int:
        return len(self.bits)


def bv_const(value: int, width: int) -> BitVec:
    value &= (1 << width) - 1
    return BitVec(tuple(bool((value >> (width - 1 - i)) & 1) for i in range(width)))


def bv_from_lits(lits) -> BitVec:
    return BitVec(tuple(lits))


def bv_value(bv: BitVec, assignment: dict[Var, bool]) -> int:
    """Integer value under an assignment (constants pass through)."""
    out = 0
    for b in bv.bits:
        bit = b if isinstance(b, bool) else assignment[b.var] != b.negated
        out = (out << 1) | int(bit)
    return out


def _materialize(expr: BoolFormula, ctx: Context, side: list) -> "Lit | bool":
    """Reduce an expression to a single bit, defining a fresh atom if needed."""
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Atom):
        return Lit(expr.var)
    if isinstance(expr, Not) and isinstance(expr.arg, Atom):
        return Lit(expr.arg.var, True)
    v = ctx.var()
    side.append(iff(Atom(v), expr))
    return Lit(v)


def bv_add(a: BitVec, b: BitVec, ctx: Context) -> tuple[BitVec, list]:
    """Ripple-carry sum mod 2**width. Returns (result, side constraints)."""
    if a.width != b.width:
        raise ValueError(f"width mismatch: {a.width} vs {b.width}")
    side: list = []
    carry: BoolFormula = FALSE
    out = []
    for i in range(a.width - 1, -1, -1):  # LSB first
        fa = lit_formula(a.bits[i])
        fb = lit_formula(b.bits[i])
        half = xor(fa, fb)
        out.append(_materialize(xor(half, carry), ctx, side))
        if i > 0:  # last carry drops out (mod 2**width)
            carry_expr = disj(conj(fa, fb), conj(carry, half))
            carry = lit_formula(_materialize(carry_expr, ctx, side))
    return BitVec(tuple(reversed(out))), side


def _bv_shift_trunc(a: BitVec, j: int, width: int) -> BitVec:
    """a * 2**j, truncated/zero-extended to the low `width` bits."""
    bits = list(a.bits) + [False] * j
    bits = bits[-width:] if len(bits) >= width else [False] * (width - len(bits)) + bits
    return BitVec(tuple(bits))


def bv_zero_extend(a: BitVec, width: int) -> BitVec:
    if width < a.width:
        raise ValueError("cannot shrink")
    return BitVec((False,) * (width - a.width) + a.bits)


def bv_mul_const(a: BitVec, c: int, ctx: Context, width: int | None = None) -> tuple[BitVec, list]:
    """Shift-and-add product a*c mod 2**width (width defaults to a.width)."""
    if c < 0:
        raise ValueError("constant must be non-negative")
    width = a.width if width is None else width
    side: list = []
    acc = bv_const(0, width)
    j = 0
    while (c >> j) and j < width:
        if (c >> j) & 1:
            acc, more = bv_add(acc, _bv_shift_trunc(a, j, width), ctx)
            side.extend(more)
        j += 1
    return acc, side


def bv_mul(a: BitVec, b: BitVec, ctx: Context, width: int) -> tuple[BitVec, list]:
    """Product of two symbolic vectors at an explicit width.

    Sum of partial products: b's bit j gates a shifted copy of a.
    """
    side: list = []
    acc = bv_const(0, width)
    for j in range(min(b.width, width)):
        gate = lit_formula(b.bits[b.width - 1 - j])
        shifted = _bv_shift_trunc(a, j, width)
        row = BitVec(tuple(
            _materialize(conj(gate, lit_formula(bit)), ctx, side)
            for bit in shifted.bits
        ))
        acc, more = bv_add(acc, row, ctx)
        side.extend(more)
    return acc, side


def bv_eq(a: BitVec, b: BitVec) -> BoolFormula:
    """Per-bit equality as a conjunction of Iff."""
    if a.width != b.width:
        raise ValueError(f"width mismatch: {a.width} vs {b.width}")
    return conj(*(iff(lit_formula(x), lit_formula(y)) for x, y in zip(a.bits, b.bits)))


def bv_le_const(a: BitVec, k: int) -> BoolFormula:
    """a <= k, unsigned, by MSB-first lexicographic comparison."""
    if k < 0:
        raise ValueError("bound must be non-negative")
    if k >> a.width:  # bound exceeds the representable range
        return TRUE
    out: BoolFormula = TRUE
    for i in range(a.width - 1, -1, -1):  # LSB upward
        bit = lit_formula(a.bits[i])
        if (k >> (a.width - 1 - i)) & 1:
            out = disj(neg(bit), out)  # a 0 here wins outright
        else:
            out = conj(neg(bit), out)  # a 1 here loses outright
    return out


def bv_nonzero(a: BitVec) -> BoolFormula:
    return disj(*(lit_formula(b) for b in a.bits))


# ---------------------------------------------------------------------------
# DIMACS

def _dimacs_lit(l: Lit) -> int:
    return -(l.var.id + 1) if l.negated else l.var.id + 1


def to_dimacs(cnf: CnfInstance) -> str:
    """DIMACS CNF text; ports recorded as `c zport <i> <lit>` comments."""
    lines = []
    for i, l in enumerate(cnf.z_ports):
        lines.append(f"c zport {i} {_dimacs_lit(l)}")
    for i, l in enumerate(cnf.y_ports):
        lines.append(f"c yport {i} {_dimacs_lit(l)}")
    lines.append(f"p cnf {cnf.num_vars} {len(cnf.clauses)}")
    for cl in cnf.clauses:
        lines.append(" ".join(str(_dimacs_lit(l)) for l in cl) + " 0")
    return "\n".join(lines) + "\n"


def from_dimacs(text: str) -> CnfInstance:
    """Parse DIMACS CNF, honoring zport/yport comments."""
    num_vars = None
    clauses: list[tuple[Lit, ...]] = []
    zp: dict[int, Lit] = {}
    yp: dict[int, Lit] = {}
    pending: list[int] = []
    n_clauses = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("c"):
            parts = line.split()
            if len(parts) == 4 and parts[1] in ("zport", "yport"):
                idx, val = int(parts[2]), int(parts[3])
                lit = Lit(Var(abs(val) - 1), val < 0)
                (zp if parts[1] == "zport" else yp)[idx] = lit
            continue
        if line.startswith("p"):
            parts = line.split()
            if (len(parts) != 4 or parts[0] != "p" or parts[1] != "cnf"
                    or not parts[2].isdigit() or not parts[3].isdigit()):
                raise ValueError(f"line {lineno}: bad header {line!r}")
            num_vars, n_clauses = int(parts[2]), int(parts[3])
            continue
        if num_vars is None:
            raise ValueError(f"line {lineno}: clause before header")
        pending += [int(t) for t in line.split()]
        while 0 in pending:
            cut = pending.index(0)
            cl = pending[:cut]
            pending = pending[cut + 1:]
            if not cl:
                raise ValueError(f"line {lineno}: empty clause")
            clauses.append(tuple(Lit(Var(abs(i) - 1), i < 0) for i in cl))
    if num_vars is None:
        raise ValueError("missing header")
    if n_clauses is not None and n_clauses != len(clauses):
        raise ValueError(f"header claims {n_clauses} clauses, found {len(clauses)}")
    ports = lambda d: tuple(d[i] for i in sorted(d))
    return CnfInstance(num_vars, tuple(clauses), ports(zp), ports(yp))
